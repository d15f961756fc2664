//! Reverse-mode differentiation by operation recording.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] replays the record in reverse and accumulates one
//! gradient per node; [`Backward::param_grads`] collects those that belong
//! to registered parameters.

use crate::error::{Error, Result};
use crate::tensor::{dot_slice, sigmoid, softmax_slice, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors. Model components hold [`ParamId`]s into a store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::dim("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// One gradient tensor per registered parameter, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            tensors: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::dim(
                "Gradients::accumulate",
                &[self.tensors.len()],
                &[other.tensors.len()],
            ));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.accumulate(b)?;
        }
        Ok(())
    }

    pub fn accumulate_param(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        self.tensors[id.0].accumulate(g)
    }

    /// Global L2 norm over every parameter gradient.
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }

    /// First parameter holding a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.tensors.iter().position(|t| !t.all_finite()).map(ParamId)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    GroupSoftmax(Var, usize),
    GroupSum(Var, usize),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    Overwrite(Var, Vec<usize>, Var),
    RowDots(Vec<Var>, Var),
    WeightedSum(Var, Vec<Var>),
    MeanRows(Vec<Var>),
    MaxRows(Vec<Var>, Vec<usize>),
    Logit(Var),
    Bce(Var, Tensor),
    AddN(Vec<Var>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward pass against a frozen [`ParamStore`].
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf. Gradients with respect to it are available from [`Backward::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf nodes, one per row of a matrix.
    pub fn leaf_rows(&mut self, m: &Tensor) -> Vec<Var> {
        m.row_vectors().into_iter().map(|r| self.leaf(r)).collect()
    }

    /// Node bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Stacks row nodes back into a matrix value.
    pub fn stack_values(&self, rows: &[Var]) -> Tensor {
        let cols = rows.first().map_or(0, |r| self.value(*r).len());
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|r| self.value(*r).data().iter().copied())
            .collect();
        Tensor::new(vec![rows.len(), cols], data).expect("rows share a width")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn vector_rows(&self, op: &'static str, rows: &[Var]) -> Result<usize> {
        let first = rows.first().ok_or(Error::EmptySequence(op))?;
        let shape = self.value(*first).shape().to_vec();
        for r in &rows[1..] {
            if self.value(*r).shape() != shape.as_slice() {
                return Err(Error::dim(op, &shape, self.value(*r).shape()));
            }
        }
        Ok(self.value(*first).len())
    }

    pub fn matvec(&mut self, w: Var, v: Var) -> Result<Var> {
        let out = self.value(w).matvec(self.value(v))?;
        Ok(self.push(out, Op::MatVec(w, v)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    /// Element-wise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let out = self.value(a).mul(&c)?;
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 - x);
        self.push(out, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Argument("softmax of an empty vector".into()));
        }
        let out = Tensor::new(v.shape().to_vec(), softmax_slice(v.data()))?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Softmax applied independently to consecutive groups of `group` entries.
    pub fn group_softmax(&mut self, a: Var, group: usize) -> Result<Var> {
        let v = self.value(a);
        if group == 0 || !v.len().is_multiple_of(group) {
            return Err(Error::dim("group_softmax", v.shape(), &[group]));
        }
        let data: Vec<f64> = v.data().chunks(group).flat_map(softmax_slice).collect();
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::GroupSoftmax(a, group)))
    }

    /// Sums consecutive groups of `group` entries.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let v = self.value(a);
        if group == 0 || !v.len().is_multiple_of(group) {
            return Err(Error::dim("group_sum", v.shape(), &[group]));
        }
        let data: Vec<f64> = v.data().chunks(group).map(|c| c.iter().sum()).collect();
        Ok(self.push(Tensor::vector(data), Op::GroupSum(a, group)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat(&values);
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            data.push(
                *v.data()
                    .get(i)
                    .ok_or_else(|| Error::Argument(format!("gather index {i} out of range for {:?}", v.shape())))?,
            );
        }
        Ok(self.push(Tensor::vector(data), Op::Gather(a, idx.to_vec())))
    }

    /// Copy of `base` with `base[idx[k]] = values[k]`.
    pub fn overwrite(&mut self, base: Var, idx: &[usize], values: Var) -> Result<Var> {
        let b = self.value(base);
        let vals = self.value(values);
        if vals.len() != idx.len() {
            return Err(Error::dim("overwrite", &[idx.len()], vals.shape()));
        }
        let mut out = b.clone();
        for (k, &i) in idx.iter().enumerate() {
            if i >= out.len() {
                return Err(Error::Argument(format!("overwrite index {i} out of range")));
            }
            out.data_mut()[i] = vals.data()[k];
        }
        Ok(self.push(out, Op::Overwrite(base, idx.to_vec(), values)))
    }

    /// `out[t] = rows[t] · q`.
    pub fn row_dots(&mut self, rows: &[Var], q: Var) -> Result<Var> {
        let width = self.vector_rows("row_dots", rows)?;
        if self.value(q).len() != width {
            return Err(Error::dim("row_dots", &[width], self.value(q).shape()));
        }
        let qd = self.value(q).data();
        let data: Vec<f64> = rows.iter().map(|r| dot_slice(self.value(*r).data(), qd)).collect();
        Ok(self.push(Tensor::vector(data), Op::RowDots(rows.to_vec(), q)))
    }

    /// `Σ_t w[t] · rows[t]`.
    pub fn weighted_sum(&mut self, w: Var, rows: &[Var]) -> Result<Var> {
        let width = self.vector_rows("weighted_sum", rows)?;
        if self.value(w).len() != rows.len() {
            return Err(Error::dim("weighted_sum", &[rows.len()], self.value(w).shape()));
        }
        let mut out = vec![0.0; width];
        for (r, &wt) in rows.iter().zip(self.value(w).data()) {
            for (o, x) in out.iter_mut().zip(self.value(*r).data()) {
                *o += wt * x;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::WeightedSum(w, rows.to_vec())))
    }

    pub fn mean_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let width = self.vector_rows("mean_rows", rows)?;
        let mut out = vec![0.0; width];
        for r in rows {
            for (o, x) in out.iter_mut().zip(self.value(*r).data()) {
                *o += x;
            }
        }
        let n = rows.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(rows.to_vec())))
    }

    /// Component-wise maximum over rows. The gradient flows to the first
    /// row attaining the maximum.
    pub fn max_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let width = self.vector_rows("max_rows", rows)?;
        let mut out = vec![f64::NEG_INFINITY; width];
        let mut arg = vec![0usize; width];
        for (k, r) in rows.iter().enumerate() {
            for (j, &x) in self.value(*r).data().iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    arg[j] = k;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaxRows(rows.to_vec(), arg)))
    }

    /// `ln(p / (1 - p))` on clamped probabilities.
    pub fn logit(&mut self, p: Var) -> Var {
        let out = self.value(p).map(|x| {
            let c = clamp_prob(x);
            c.ln() - (1.0 - c).ln()
        });
        self.push(out, Op::Logit(p))
    }

    /// Mean binary cross-entropy of `probs` against constant `labels`.
    pub fn bce(&mut self, probs: Var, labels: Tensor) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != labels.shape() {
            return Err(Error::dim("bce", p.shape(), labels.shape()));
        }
        if p.is_empty() {
            return Err(Error::Argument("bce over zero classes".into()));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&x, &y)| {
                let c = clamp_prob(x);
                -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
            })
            .sum();
        let out = Tensor::scalar(total / p.len() as f64);
        Ok(self.push(out, Op::Bce(probs, labels)))
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Argument("add_n of nothing".into()))?;
        let mut out = self.value(first).clone();
        for p in &parts[1..] {
            out.accumulate(self.value(*p))?;
        }
        Ok(self.push(out, Op::AddN(parts.to_vec())))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Reverse sweep from `output`, seeded with ones of its shape.
    pub fn backward(&self, output: Var) -> Backward {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatVec(w, v) => {
                    let wv = self.value(*w);
                    let vv = self.value(*v);
                    let (m, n) = (wv.shape()[0], wv.shape()[1]);
                    let mut dw = Vec::with_capacity(m * n);
                    for &gi in g.data() {
                        dw.extend(vv.data().iter().map(|&x| gi * x));
                    }
                    let mut dv = vec![0.0; n];
                    for (row, &gi) in wv.data().chunks_exact(n.max(1)).zip(g.data()) {
                        for (d, &x) in dv.iter_mut().zip(row) {
                            *d += gi * x;
                        }
                    }
                    accumulate(&mut grads, *w, Tensor::new(vec![m, n], dw).unwrap());
                    accumulate(&mut grads, *v, Tensor::new(vv.shape().to_vec(), dv).unwrap());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b)).unwrap();
                    let gb = g.mul(self.value(*a)).unwrap();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k)),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g.mul(c).unwrap()),
                Op::OneMinus(a) => accumulate(&mut grads, *a, g.scale(-1.0)),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = zip_map(&g, y, |gi, yi| gi * yi * (1.0 - yi));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = zip_map(&g, y, |gi, yi| gi * (1.0 - yi * yi));
                    accumulate(&mut grads, *a, d);
                }
                Op::Softmax(a) => {
                    let d = softmax_backward(g.data(), node.value.data());
                    accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                Op::GroupSoftmax(a, group) => {
                    let d: Vec<f64> = g
                        .data()
                        .chunks(*group)
                        .zip(node.value.data().chunks(*group))
                        .flat_map(|(gc, yc)| softmax_backward(gc, yc))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::vector(d));
                }
                Op::GroupSum(a, group) => {
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi, *group))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::vector(d));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let n = pv.len();
                        let d = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        accumulate(&mut grads, *p, Tensor::new(pv.shape().to_vec(), d).unwrap());
                    }
                }
                Op::Gather(a, idx) => {
                    let av = self.value(*a);
                    let mut d = Tensor::zeros(av.shape());
                    for (k, &i) in idx.iter().enumerate() {
                        d.data_mut()[i] += g.data()[k];
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Overwrite(base, idx, values) => {
                    let mut gb = g.clone();
                    let mut gv = Vec::with_capacity(idx.len());
                    // Later writes to a repeated index win in the forward pass.
                    let mut seen = vec![false; g.len()];
                    for &i in idx.iter().rev() {
                        gv.push(if seen[i] { 0.0 } else { g.data()[i] });
                        seen[i] = true;
                        gb.data_mut()[i] = 0.0;
                    }
                    gv.reverse();
                    let vshape = self.value(*values).shape().to_vec();
                    accumulate(&mut grads, *base, gb);
                    accumulate(&mut grads, *values, Tensor::new(vshape, gv).unwrap());
                }
                Op::RowDots(rows, q) => {
                    let qv = self.value(*q).clone();
                    let mut dq = vec![0.0; qv.len()];
                    for (r, &gi) in rows.iter().zip(g.data()) {
                        let rv = self.value(*r);
                        for (d, &x) in dq.iter_mut().zip(rv.data()) {
                            *d += gi * x;
                        }
                        accumulate(&mut grads, *r, qv.scale(gi).reshape(rv.shape().to_vec()).unwrap());
                    }
                    accumulate(&mut grads, *q, Tensor::new(qv.shape().to_vec(), dq).unwrap());
                }
                Op::WeightedSum(w, rows) => {
                    let wv = self.value(*w).clone();
                    let mut dw = Vec::with_capacity(rows.len());
                    for (r, &wt) in rows.iter().zip(wv.data()) {
                        let rv = self.value(*r);
                        dw.push(dot_slice(rv.data(), g.data()));
                        accumulate(&mut grads, *r, g.scale(wt).reshape(rv.shape().to_vec()).unwrap());
                    }
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                Op::MeanRows(rows) => {
                    let share = g.scale(1.0 / rows.len() as f64);
                    for r in rows {
                        let shape = self.value(*r).shape().to_vec();
                        accumulate(&mut grads, *r, share.clone().reshape(shape).unwrap());
                    }
                }
                Op::MaxRows(rows, arg) => {
                    let mut per_row: Vec<Option<Tensor>> = vec![None; rows.len()];
                    for (j, (&k, &gj)) in arg.iter().zip(g.data()).enumerate() {
                        let slot = per_row[k].get_or_insert_with(|| Tensor::zeros(self.value(rows[k]).shape()));
                        slot.data_mut()[j] += gj;
                    }
                    for (r, d) in rows.iter().zip(per_row) {
                        if let Some(d) = d {
                            accumulate(&mut grads, *r, d);
                        }
                    }
                }
                Op::Logit(p) => {
                    let pv = self.value(*p);
                    let d = zip_map(&g, pv, |gi, x| {
                        if x <= PROB_EPS || x >= 1.0 - PROB_EPS {
                            0.0
                        } else {
                            gi / (x * (1.0 - x))
                        }
                    });
                    accumulate(&mut grads, *p, d);
                }
                Op::Bce(p, labels) => {
                    let pv = self.value(*p);
                    let n = pv.len() as f64;
                    let gs = g.data()[0];
                    let d = zip_map(pv, labels, |x, y| {
                        if x <= PROB_EPS || x >= 1.0 - PROB_EPS {
                            0.0
                        } else {
                            gs * (-y / x + (1.0 - y) / (1.0 - x)) / n
                        }
                    });
                    accumulate(&mut grads, *p, d);
                }
                Op::AddN(parts) => {
                    for p in parts {
                        accumulate(&mut grads, *p, g.clone());
                    }
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::filled(&shape, g.data()[0]));
                }
            }
        }

        let params: Vec<(ParamId, usize)> = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v.0)))
            .collect();
        Backward { grads, params }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn softmax_backward(g: &[f64], y: &[f64]) -> Vec<f64> {
    let gy = dot_slice(g, y);
    g.iter().zip(y).map(|(gi, yi)| yi * (gi - gy)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.accumulate(&d).expect("gradient shapes agree"),
        slot @ None => *slot = Some(d),
    }
}

/// Result of a reverse sweep.
pub struct Backward {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Backward {
    /// Gradient with respect to a leaf or parameter node; `None` when the
    /// node did not influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter in the store; those that did not take
    /// part in the forward pass are zero.
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out.tensors[id.0] = g.clone();
            }
        }
        out
    }
}
