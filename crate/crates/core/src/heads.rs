//! Video-level classifier heads: mixture of experts, the two-level
//! hierarchical MoE, and grouped classifier chains.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recurrent::Init;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Total map from fine classes to coarse (vertical) classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyRepr", into = "TaxonomyRepr")]
pub struct Taxonomy {
    coarse_of: Vec<usize>,
    coarse_count: usize,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyRepr {
    coarse_count: usize,
    coarse_of: Vec<usize>,
}

impl TryFrom<TaxonomyRepr> for Taxonomy {
    type Error = Error;
    fn try_from(r: TaxonomyRepr) -> Result<Self> {
        Taxonomy::new(r.coarse_of, r.coarse_count)
    }
}

impl From<Taxonomy> for TaxonomyRepr {
    fn from(t: Taxonomy) -> Self {
        TaxonomyRepr {
            coarse_count: t.coarse_count,
            coarse_of: t.coarse_of,
        }
    }
}

impl Taxonomy {
    pub fn new(coarse_of: Vec<usize>, coarse_count: usize) -> Result<Self> {
        if coarse_of.is_empty() || coarse_count == 0 {
            return Err(Error::Taxonomy("needs at least one fine and one coarse class".into()));
        }
        let mut used = vec![false; coarse_count];
        for (fine, &c) in coarse_of.iter().enumerate() {
            if c >= coarse_count {
                return Err(Error::Taxonomy(format!(
                    "fine class {fine} maps to coarse class {c}, only {coarse_count} exist"
                )));
            }
            used[c] = true;
        }
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(Error::Taxonomy(format!("coarse class {empty} has no fine classes")));
        }
        Ok(Taxonomy {
            coarse_of,
            coarse_count,
        })
    }

    /// Every fine class in its own coarse class.
    pub fn identity(classes: usize) -> Result<Self> {
        Taxonomy::new((0..classes).collect(), classes)
    }

    pub fn fine_count(&self) -> usize {
        self.coarse_of.len()
    }

    pub fn coarse_count(&self) -> usize {
        self.coarse_count
    }

    pub fn coarse_of(&self, fine: usize) -> Result<usize> {
        self.coarse_of
            .get(fine)
            .copied()
            .ok_or_else(|| Error::Taxonomy(format!("fine class {fine} is not mapped")))
    }

    pub fn table(&self) -> &[usize] {
        &self.coarse_of
    }

    pub fn members(&self, coarse: usize) -> Vec<usize> {
        (0..self.coarse_of.len())
            .filter(|&f| self.coarse_of[f] == coarse)
            .collect()
    }

    pub fn coarse_labels(&self, fine: &BTreeSet<usize>) -> Result<BTreeSet<usize>> {
        fine.iter().map(|&f| self.coarse_of(f)).collect()
    }
}

/// Per-class gated mixture of `mixtures` sigmoid experts. Row `c·m + e` of
/// each matrix belongs to class `c`, expert `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeParams {
    pub gate: ParamId,
    pub expert_w: ParamId,
    pub expert_b: ParamId,
    pub classes: usize,
    pub mixtures: usize,
    pub input: usize,
}

impl MoeParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        classes: usize,
        mixtures: usize,
        init: &mut Init,
    ) -> Result<Self> {
        if mixtures == 0 || classes == 0 {
            return Err(Error::Config(format!(
                "moe head needs mixtures >= 1 and classes >= 1, got {mixtures} and {classes}"
            )));
        }
        let rows = classes * mixtures;
        Ok(MoeParams {
            gate: store.register(format!("{prefix}.gate"), init.matrix(rows, input)),
            expert_w: store.register(format!("{prefix}.expert_w"), init.matrix(rows, input)),
            expert_b: store.register(format!("{prefix}.expert_b"), Tensor::zeros(&[rows])),
            classes,
            mixtures,
            input,
        })
    }
}

/// `p_c = Σ_e softmax(gate_c · x)_e · σ(expert_{c,e} · x + b_{c,e})`.
pub fn moe_forward(tape: &mut Tape, p: &MoeParams, x: Var) -> Result<Var> {
    let width = tape.value(x).len();
    if width != p.input {
        return Err(Error::dim("moe_forward", &[p.input], &[width]));
    }
    let gate = tape.param(p.gate);
    let ew = tape.param(p.expert_w);
    let eb = tape.param(p.expert_b);
    let gate_logits = tape.matvec(gate, x)?;
    let gates = tape.group_softmax(gate_logits, p.mixtures)?;
    let pre = tape.matvec(ew, x)?;
    let pre = tape.add(pre, eb)?;
    let experts = tape.sigmoid(pre);
    let mixed = tape.mul(gates, experts)?;
    tape.group_sum(mixed, p.mixtures)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmoeParams {
    pub coarse: MoeParams,
    pub fine: MoeParams,
}

impl HmoeParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        taxonomy: &Taxonomy,
        mixtures: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let v = taxonomy.coarse_count();
        Ok(HmoeParams {
            coarse: MoeParams::register(store, &format!("{prefix}.coarse"), input, v, mixtures, init)?,
            fine: MoeParams::register(
                store,
                &format!("{prefix}.fine"),
                input + v,
                taxonomy.fine_count(),
                mixtures,
                init,
            )?,
        })
    }
}

pub struct HmoeOutput {
    pub coarse: Var,
    /// Coarse pre-activation responses, `logit(coarse)`.
    pub responses: Var,
    pub fine: Var,
}

/// Coarse MoE, then a fine MoE over `x ⊕ coarse responses`.
pub fn hmoe_forward(tape: &mut Tape, p: &HmoeParams, x: Var) -> Result<HmoeOutput> {
    let coarse = moe_forward(tape, &p.coarse, x)?;
    let responses = tape.logit(coarse);
    let fine_in = tape.concat(&[x, responses]);
    let fine = moe_forward(tape, &p.fine, fine_in)?;
    Ok(HmoeOutput {
        coarse,
        responses,
        fine,
    })
}

/// Sequential group classifiers reading a running probability vector
/// through a bottleneck projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainParams {
    pub groups: Vec<Vec<usize>>,
    pub heads: Vec<MoeParams>,
    pub bottleneck_w: ParamId,
    pub bottleneck_b: ParamId,
    pub input: usize,
    pub classes: usize,
    pub bottleneck: usize,
}

impl ChainParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        groups: Vec<Vec<usize>>,
        mixtures: usize,
        bottleneck: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let classes: usize = groups.iter().map(Vec::len).sum();
        check_partition(&groups, classes)?;
        if bottleneck == 0 || bottleneck >= input + classes {
            return Err(Error::Config(format!(
                "bottleneck width {bottleneck} must lie in [1, {})",
                input + classes
            )));
        }
        let bottleneck_w = store.register(
            format!("{prefix}.bottleneck_w"),
            init.matrix(bottleneck, input + classes),
        );
        let bottleneck_b = store.register(format!("{prefix}.bottleneck_b"), Tensor::zeros(&[bottleneck]));
        let heads = groups
            .iter()
            .enumerate()
            .map(|(g, members)| {
                MoeParams::register(
                    store,
                    &format!("{prefix}.group{g}"),
                    bottleneck,
                    members.len(),
                    mixtures,
                    init,
                )
            })
            .collect::<Result<_>>()?;
        Ok(ChainParams {
            groups,
            heads,
            bottleneck_w,
            bottleneck_b,
            input,
            classes,
            bottleneck,
        })
    }
}

fn check_partition(groups: &[Vec<usize>], classes: usize) -> Result<()> {
    let mut seen = vec![false; classes];
    for g in groups {
        if g.is_empty() {
            return Err(Error::Config("chain group is empty".into()));
        }
        for &c in g {
            if c >= classes || seen[c] {
                return Err(Error::Config(format!("chain groups do not partition 0..{classes}")));
            }
            seen[c] = true;
        }
    }
    Ok(())
}

/// Runs the groups in order. Each step reads `bottleneck(x ⊕ q)` where `q`
/// holds the probabilities written so far (zeros initially) and overwrites
/// its own group's entries.
pub fn chain_forward(tape: &mut Tape, p: &ChainParams, x: Var) -> Result<Var> {
    let width = tape.value(x).len();
    if width != p.input {
        return Err(Error::dim("chain_forward", &[p.input], &[width]));
    }
    let w = tape.param(p.bottleneck_w);
    let b = tape.param(p.bottleneck_b);
    let mut q = tape.leaf(Tensor::zeros(&[p.classes]));
    for (members, head) in p.groups.iter().zip(&p.heads) {
        let joined = tape.concat(&[x, q]);
        let z = tape.matvec(w, joined)?;
        let z = tape.add(z, b)?;
        let probs = moe_forward(tape, head, z)?;
        q = tape.overwrite(q, members, probs)?;
    }
    Ok(q)
}

/// Sorts classes by descending count (ties by ascending index) and cuts
/// the order into consecutive groups of `ceil(C / G)`.
pub fn group_by_frequency(label_counts: &[u64], groups: usize) -> Result<Vec<Vec<usize>>> {
    let c = label_counts.len();
    if groups == 0 || groups > c {
        return Err(Error::Argument(format!("cannot cut {c} classes into {groups} groups")));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| label_counts[b].cmp(&label_counts[a]).then(a.cmp(&b)));
    let size = c.div_ceil(groups);
    Ok(order.chunks(size).map(<[usize]>::to_vec).collect())
}

/// Fine cross-entropy plus `lambda` times coarse cross-entropy.
pub fn joint_loss(
    tape: &mut Tape,
    coarse_probs: Var,
    fine_probs: Var,
    coarse_labels: Tensor,
    fine_labels: Tensor,
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("lambda must be non-negative, got {lambda}")));
    }
    let fine = tape.bce(fine_probs, fine_labels)?;
    let coarse = tape.bce(coarse_probs, coarse_labels)?;
    let coarse = tape.scale(coarse, lambda);
    tape.add(fine, coarse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use approx::assert_abs_diff_eq;

    fn moe_with(
        store: &mut ParamStore,
        input: usize,
        classes: usize,
        m: usize,
        gate: &[f64],
        ew: &[f64],
        eb: &[f64],
    ) -> MoeParams {
        let p = MoeParams::register(store, "moe", input, classes, m, &mut Init::Zeros).unwrap();
        store
            .set(p.gate, Tensor::new(vec![classes * m, input], gate.to_vec()).unwrap())
            .unwrap();
        store
            .set(p.expert_w, Tensor::new(vec![classes * m, input], ew.to_vec()).unwrap())
            .unwrap();
        store.set(p.expert_b, Tensor::vector(eb.to_vec())).unwrap();
        p
    }

    /// Direct evaluation of a one-input, one-class, two-expert mixture.
    fn scalar_mixture(x: f64, gate: [f64; 2], ew: [f64; 2], eb: [f64; 2]) -> f64 {
        let (g0, g1) = ((gate[0] * x).exp(), (gate[1] * x).exp());
        let s = g0 + g1;
        g0 / s * sigmoid(ew[0] * x + eb[0]) + g1 / s * sigmoid(ew[1] * x + eb[1])
    }

    #[test]
    fn taxonomy_validation() {
        assert!(Taxonomy::new(vec![0, 1, 1], 2).is_ok());
        assert!(matches!(Taxonomy::new(vec![0, 2], 2), Err(Error::Taxonomy(_))));
        assert!(matches!(Taxonomy::new(vec![0, 0], 2), Err(Error::Taxonomy(_))));
        let t = Taxonomy::new(vec![1, 0, 1], 2).unwrap();
        assert_eq!(t.members(1), vec![0, 2]);
        assert!(t.coarse_of(3).is_err());
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<Taxonomy>(&json).unwrap(), t);
        assert!(serde_json::from_str::<Taxonomy>(r#"{"coarse_count":1,"coarse_of":[3]}"#).is_err());
    }

    #[test]
    fn single_expert_is_plain_sigmoid() {
        let mut store = ParamStore::new();
        let p = moe_with(&mut store, 2, 1, 1, &[3.0, -1.0], &[0.5, 2.0], &[-0.25]);
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::vector(vec![0.4, -0.3]));
        let probs = moe_forward(&mut tape, &p, x).unwrap();
        assert_abs_diff_eq!(tape.value(probs).data()[0], sigmoid(0.2 - 0.6 - 0.25), epsilon = 1e-15);
    }

    #[test]
    fn zero_moe_gives_halves() {
        let mut store = ParamStore::new();
        let p = MoeParams::register(&mut store, "m", 3, 4, 2, &mut Init::Zeros).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let probs = moe_forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(probs).data(), &[0.5; 4]);
        let bad = tape.leaf(Tensor::vector(vec![1.0]));
        assert!(matches!(moe_forward(&mut tape, &p, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn two_expert_scalar_mixture() {
        let mut store = ParamStore::new();
        let p = moe_with(&mut store, 1, 1, 2, &[1.5, -0.5], &[2.0, -1.0], &[0.3, 0.1]);
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::scalar(0.8));
        let probs = moe_forward(&mut tape, &p, x).unwrap();
        let expected = scalar_mixture(0.8, [1.5, -0.5], [2.0, -1.0], [0.3, 0.1]);
        assert_abs_diff_eq!(tape.value(probs).data()[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn hmoe_zero_and_definitional() {
        let mut store = ParamStore::new();
        let tax = Taxonomy::new(vec![0, 1, 1], 2).unwrap();
        let p = HmoeParams::register(&mut store, "h", 2, &tax, 3, &mut Init::Zeros).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::vector(vec![0.3, 0.9]));
        let out = hmoe_forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(out.coarse).data(), &[0.5, 0.5]);
        assert_eq!(tape.value(out.fine).data(), &[0.5, 0.5, 0.5]);
        assert_eq!(tape.value(out.responses).data(), &[0.0, 0.0]);
    }

    #[test]
    fn hmoe_feeds_responses_to_fine_head() {
        let mut r = crate::rng::stream(11, &[]);
        let mut store = ParamStore::new();
        let tax = Taxonomy::new(vec![0; 3], 1).unwrap();
        let p = HmoeParams::register(&mut store, "h", 2, &tax, 2, &mut Init::Glorot(&mut r)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::vector(vec![-0.2, 0.6]));
        let out = hmoe_forward(&mut tape, &p, x).unwrap();
        let coarse_p = tape.value(out.coarse).data()[0];
        let response = (coarse_p / (1.0 - coarse_p)).ln();
        let manual_in = tape.leaf(Tensor::vector(vec![-0.2, 0.6, response]));
        let manual = moe_forward(&mut tape, &p.fine, manual_in).unwrap();
        for (a, b) in tape.value(out.fine).data().iter().zip(tape.value(manual).data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn hmoe_two_stage_scalar_oracle() {
        // d = 1, V = 2, C = 3, one expert per class so each probability is a
        // single sigmoid; the oracle composes them by hand.
        let mut store = ParamStore::new();
        let tax = Taxonomy::new(vec![0, 1, 1], 2).unwrap();
        let p = HmoeParams::register(&mut store, "h", 1, &tax, 1, &mut Init::Zeros).unwrap();
        store
            .set(p.coarse.expert_w, Tensor::matrix(2, 1, vec![1.0, -2.0]).unwrap())
            .unwrap();
        store.set(p.coarse.expert_b, Tensor::vector(vec![0.5, 0.0])).unwrap();
        let fine_w = vec![1.0, 0.5, -0.5, 0.0, 1.0, 1.0, 2.0, 0.0, -1.0];
        store
            .set(p.fine.expert_w, Tensor::matrix(3, 3, fine_w.clone()).unwrap())
            .unwrap();
        let mut tape = Tape::new(&store);
        let x = 0.7;
        let xv = tape.leaf(Tensor::scalar(x));
        let out = hmoe_forward(&mut tape, &p, xv).unwrap();
        let r = [x + 0.5, -2.0 * x];
        for (c, expected) in r.iter().enumerate() {
            assert_abs_diff_eq!(tape.value(out.coarse).data()[c], sigmoid(*expected), epsilon = 1e-15);
            assert_abs_diff_eq!(tape.value(out.responses).data()[c], *expected, epsilon = 1e-12);
        }
        for c in 0..3 {
            let w = &fine_w[3 * c..3 * c + 3];
            let z = w[0] * x + w[1] * r[0] + w[2] * r[1];
            assert_abs_diff_eq!(tape.value(out.fine).data()[c], sigmoid(z), epsilon = 1e-12);
        }
    }

    #[test]
    fn group_by_frequency_examples() {
        assert_eq!(
            group_by_frequency(&[5, 9, 1, 7], 2).unwrap(),
            vec![vec![1, 3], vec![0, 2]]
        );
        assert_eq!(
            group_by_frequency(&[2; 6], 3).unwrap(),
            vec![vec![0, 1], vec![2, 3], vec![4, 5]]
        );
        assert_eq!(
            group_by_frequency(&[3, 8, 8, 1], 4).unwrap(),
            vec![vec![1], vec![2], vec![0], vec![3]]
        );
        assert!(group_by_frequency(&[1, 2], 3).is_err());
        assert!(group_by_frequency(&[1, 2], 0).is_err());
    }

    fn chain_fixture(store: &mut ParamStore, r: &mut crate::rng::Rng) -> ChainParams {
        let groups = vec![vec![2, 0], vec![3, 1]];
        ChainParams::register(store, "cc", 1, groups, 2, 3, &mut Init::Glorot(r)).unwrap()
    }

    #[test]
    fn chain_two_step_oracle() {
        let mut r = crate::rng::stream(4, &[]);
        let mut store = ParamStore::new();
        let p = chain_fixture(&mut store, &mut r);
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::scalar(0.9));
        let out = chain_forward(&mut tape, &p, x).unwrap();
        let got = tape.value(out).clone();

        // Re-evaluate step by step with plain tensor arithmetic.
        let w = store.get(p.bottleneck_w);
        let b = store.get(p.bottleneck_b);
        let mut q = Tensor::zeros(&[4]);
        for (members, head) in p.groups.iter().zip(&p.heads) {
            let z = w
                .matvec(&Tensor::concat(&[&Tensor::scalar(0.9), &q]))
                .unwrap()
                .add(b)
                .unwrap();
            let mut t = Tape::new(&store);
            let zv = t.leaf(z);
            let probs = moe_forward(&mut t, head, zv).unwrap();
            for (k, &c) in members.iter().enumerate() {
                q.data_mut()[c] = t.value(probs).data()[k];
            }
        }
        for (a, e) in got.data().iter().zip(q.data()) {
            assert_abs_diff_eq!(*a, *e, epsilon = 1e-15);
        }
    }

    #[test]
    fn chain_single_group_is_moe_on_bottleneck() {
        let mut r = crate::rng::stream(8, &[]);
        let mut store = ParamStore::new();
        let p = ChainParams::register(
            &mut store,
            "cc",
            2,
            vec![vec![1, 0, 2]],
            2,
            3,
            &mut Init::Glorot(&mut r),
        )
        .unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::vector(vec![0.5, -0.4]));
        let out = chain_forward(&mut tape, &p, x).unwrap();
        let z = store
            .get(p.bottleneck_w)
            .matvec(&Tensor::vector(vec![0.5, -0.4, 0.0, 0.0, 0.0]))
            .unwrap()
            .add(store.get(p.bottleneck_b))
            .unwrap();
        let zv = tape.leaf(z);
        let direct = moe_forward(&mut tape, &p.heads[0], zv).unwrap();
        let direct = tape.value(direct).data().to_vec();
        let got = tape.value(out).data();
        for (k, &c) in [1usize, 0, 2].iter().enumerate() {
            assert_abs_diff_eq!(got[c], direct[k], epsilon = 1e-15);
        }
    }

    #[test]
    fn chain_zero_params_give_halves() {
        let mut store = ParamStore::new();
        let p = ChainParams::register(&mut store, "cc", 2, vec![vec![0, 1], vec![2]], 2, 2, &mut Init::Zeros).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let out = chain_forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5; 3]);
    }

    #[test]
    fn chain_rejects_bad_partitions_and_widths() {
        let mut store = ParamStore::new();
        let mut z = Init::Zeros;
        assert!(ChainParams::register(&mut store, "a", 2, vec![vec![0, 0]], 1, 1, &mut z).is_err());
        assert!(ChainParams::register(&mut store, "b", 2, vec![vec![0, 2]], 1, 1, &mut z).is_err());
        assert!(ChainParams::register(&mut store, "c", 2, vec![vec![0], vec![1]], 1, 4, &mut z).is_err());
    }

    #[test]
    fn joint_loss_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let half2 = tape.leaf(Tensor::filled(&[2], 0.5));
        let half3 = tape.leaf(Tensor::filled(&[3], 0.5));
        let y2 = Tensor::vector(vec![1.0, 0.0]);
        let y3 = Tensor::vector(vec![1.0, 1.0, 0.0]);
        let loss = joint_loss(&mut tape, half2, half3, y2.clone(), y3.clone(), 0.7).unwrap();
        assert_abs_diff_eq!(tape.value(loss).data()[0], 1.7 * 2f64.ln(), epsilon = 1e-15);

        let perfect_c = tape.leaf(y2.clone());
        let perfect_f = tape.leaf(y3.clone());
        let loss = joint_loss(&mut tape, perfect_c, perfect_f, y2, y3, 1.0).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-10);

        // λ = 1, two fine classes and one coarse class.
        let pc = tape.leaf(Tensor::vector(vec![0.7]));
        let pf = tape.leaf(Tensor::vector(vec![0.9, 0.4]));
        let loss = joint_loss(
            &mut tape,
            pc,
            pf,
            Tensor::vector(vec![1.0]),
            Tensor::vector(vec![1.0, 0.0]),
            1.0,
        )
        .unwrap();
        let expected = -(0.9f64.ln() + 0.6f64.ln()) / 2.0 - 0.7f64.ln();
        assert_abs_diff_eq!(tape.value(loss).data()[0], expected, epsilon = 1e-15);
        assert!(joint_loss(
            &mut tape,
            pc,
            pf,
            Tensor::vector(vec![1.0]),
            Tensor::vector(vec![1.0, 0.0]),
            -1.0
        )
        .is_err());
    }
}
