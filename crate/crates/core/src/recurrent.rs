//! GRU cells and the bidirectional sum-merged encoder.
//!
//! The cell has no bias terms:
//!
//! ```text
//! z = σ(Wz·w + Uz·h)            update gate
//! r = σ(Wr·w + Ur·h)            reset gate
//! ĥ = tanh(Wh·w + Uh·(h ⊙ r))   candidate
//! h' = (1 − z) ⊙ ĥ + z ⊙ h
//! ```
//!
//! The bidirectional encoder is called "BiLSTM" in the rest of the crate's
//! vocabulary even though its cells are GRUs.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// How freshly registered weights are filled.
pub enum Init<'a> {
    Zeros,
    /// Uniform in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
    Glorot(&'a mut Rng),
}

impl Init<'_> {
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(&[rows, cols]),
            Init::Glorot(rng) => {
                let s = (6.0 / (rows + cols).max(1) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.random_range(-s..=s)).collect();
                Tensor::new(vec![rows, cols], data).unwrap()
            }
        }
    }

    /// A vector initialised like a `1 × len` matrix.
    pub fn vector(&mut self, len: usize) -> Tensor {
        self.matrix(1, len).reshape(vec![len]).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub wz: ParamId,
    pub uz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, init: &mut Init) -> Self {
        let mut w = |name: &str, cols: usize| store.register(format!("{prefix}.{name}"), init.matrix(hidden, cols));
        GruParams {
            wz: w("Wz", input),
            uz: w("Uz", hidden),
            wr: w("Wr", input),
            ur: w("Ur", hidden),
            wh: w("Wh", input),
            uh: w("Uh", hidden),
            input,
            hidden,
        }
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.wz, self.uz, self.wr, self.ur, self.wh, self.uh]
    }
}

/// Forward and backward cells; both directions share shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct BiEncoderParams {
    pub forward: GruParams,
    pub backward: GruParams,
}

impl BiEncoderParams {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, init: &mut Init) -> Self {
        BiEncoderParams {
            forward: GruParams::register(store, &format!("{prefix}.fwd"), input, hidden, init),
            backward: GruParams::register(store, &format!("{prefix}.bwd"), input, hidden, init),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn input(&self) -> usize {
        self.forward.input
    }

    /// The same bundle with the two directions exchanged.
    pub fn swapped(&self) -> Self {
        BiEncoderParams {
            forward: self.backward.clone(),
            backward: self.forward.clone(),
        }
    }
}

pub fn gru_step(tape: &mut Tape, p: &GruParams, w_t: Var, h_prev: Var) -> Result<Var> {
    let (wz, uz, wr, ur, wh, uh) = (
        tape.param(p.wz),
        tape.param(p.uz),
        tape.param(p.wr),
        tape.param(p.ur),
        tape.param(p.wh),
        tape.param(p.uh),
    );
    let a = tape.matvec(wz, w_t)?;
    let b = tape.matvec(uz, h_prev)?;
    let z_pre = tape.add(a, b)?;
    let z = tape.sigmoid(z_pre);

    let a = tape.matvec(wr, w_t)?;
    let b = tape.matvec(ur, h_prev)?;
    let r_pre = tape.add(a, b)?;
    let r = tape.sigmoid(r_pre);

    let gated = tape.mul(h_prev, r)?;
    let a = tape.matvec(wh, w_t)?;
    let b = tape.matvec(uh, gated)?;
    let c_pre = tape.add(a, b)?;
    let cand = tape.tanh(c_pre);

    let keep = tape.one_minus(z);
    let new_part = tape.mul(keep, cand)?;
    let old_part = tape.mul(z, h_prev)?;
    tape.add(new_part, old_part)
}

/// Runs the cell over `frames` from a zero initial state, returning one
/// hidden state per frame.
pub fn gru_encode(tape: &mut Tape, p: &GruParams, frames: &[Var]) -> Result<Vec<Var>> {
    if frames.is_empty() {
        return Err(Error::EmptySequence("gru_encode"));
    }
    let mut h = tape.leaf(Tensor::zeros(&[p.hidden]));
    let mut out = Vec::with_capacity(frames.len());
    for &w in frames {
        h = gru_step(tape, p, w, h)?;
        out.push(h);
    }
    Ok(out)
}

/// Forward pass plus a pass over the reversed sequence, merged by
/// element-wise sum at each original position.
pub fn bilstm_encode(tape: &mut Tape, p: &BiEncoderParams, frames: &[Var]) -> Result<Vec<Var>> {
    if frames.is_empty() {
        return Err(Error::EmptySequence("bilstm_encode"));
    }
    let fwd = gru_encode(tape, &p.forward, frames)?;
    let reversed: Vec<Var> = frames.iter().rev().copied().collect();
    let bwd = gru_encode(tape, &p.backward, &reversed)?;
    let n = frames.len();
    (0..n).map(|t| tape.add(fwd[t], bwd[n - 1 - t])).collect()
}
