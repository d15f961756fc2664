//! Attention pooling over frame encodings and dropout on pooled vectors.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::heads::Taxonomy;
use crate::recurrent::Init;
use crate::rng::{self, Mode};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Trainable query vector for single-query pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub omega: ParamId,
    pub hidden: usize,
}

impl AttentionParams {
    pub fn register(store: &mut ParamStore, prefix: &str, hidden: usize, init: &mut Init) -> Self {
        AttentionParams {
            omega: store.register(format!("{prefix}.omega"), init.vector(hidden)),
            hidden,
        }
    }
}

/// One query per vertical (coarse) label plus the diagonal of the shared
/// bilinear scoring matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiAttentionParams {
    pub a_diag: ParamId,
    pub queries: ParamId,
    pub hidden: usize,
    pub verticals: usize,
}

impl MultiAttentionParams {
    pub fn register(store: &mut ParamStore, prefix: &str, hidden: usize, verticals: usize, init: &mut Init) -> Self {
        let diag = match init {
            Init::Zeros => Tensor::zeros(&[hidden]),
            Init::Glorot(_) => Tensor::filled(&[hidden], 1.0),
        };
        MultiAttentionParams {
            a_diag: store.register(format!("{prefix}.A_diag"), diag),
            queries: store.register(format!("{prefix}.queries"), init.matrix(verticals, hidden)),
            hidden,
            verticals,
        }
    }
}

/// Pooled vector together with the frame weights that produced it.
pub struct Pooled {
    pub x: Var,
    pub weights: Var,
}

/// `M = tanh(H)`, `α = softmax(ω·M_t)`, `x = tanh(Σ_t α_t H_t)`.
///
/// The scores read the squashed rows while the weighted sum reads the raw
/// rows.
pub fn single_attention_weighted(tape: &mut Tape, rows: &[Var], p: &AttentionParams) -> Result<Pooled> {
    if rows.is_empty() {
        return Err(Error::EmptySequence("single_attention"));
    }
    let omega = tape.param(p.omega);
    let squashed: Vec<Var> = rows.iter().map(|&h| tape.tanh(h)).collect();
    let scores = tape.row_dots(&squashed, omega)?;
    let weights = tape.softmax(scores)?;
    let r = tape.weighted_sum(weights, rows)?;
    Ok(Pooled {
        x: tape.tanh(r),
        weights,
    })
}

pub fn single_attention(tape: &mut Tape, rows: &[Var], p: &AttentionParams) -> Result<Var> {
    single_attention_weighted(tape, rows, p).map(|p| p.x)
}

/// Pooled vector for vertical label `i`: `e_j = h_j · diag(A) · b_i`,
/// `α = softmax_j(e)`, `x_i = Σ_j α_j h_j` (no output squashing).
pub fn multi_attention_weighted(tape: &mut Tape, rows: &[Var], p: &MultiAttentionParams, i: usize) -> Result<Pooled> {
    if i >= p.verticals {
        return Err(Error::Argument(format!(
            "vertical label {i} out of range for {} queries",
            p.verticals
        )));
    }
    if rows.is_empty() {
        return Err(Error::EmptySequence("multi_attention"));
    }
    let queries = tape.param(p.queries);
    let a_diag = tape.param(p.a_diag);
    let idx: Vec<usize> = (i * p.hidden..(i + 1) * p.hidden).collect();
    let b_i = tape.gather(queries, &idx)?;
    let q = tape.mul(a_diag, b_i)?;
    let scores = tape.row_dots(rows, q)?;
    let weights = tape.softmax(scores)?;
    Ok(Pooled {
        x: tape.weighted_sum(weights, rows)?,
        weights,
    })
}

pub fn multi_attention(tape: &mut Tape, rows: &[Var], p: &MultiAttentionParams, i: usize) -> Result<Var> {
    multi_attention_weighted(tape, rows, p, i).map(|p| p.x)
}

/// The pooled vector index a fine class reads: its coarse parent.
pub fn route_vertical(fine_class: usize, taxonomy: &Taxonomy) -> Result<usize> {
    taxonomy.coarse_of(fine_class)
}

fn check_keep(keep: f64) -> Result<()> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Argument(format!(
            "keep probability must lie in (0, 1], got {keep}"
        )));
    }
    Ok(())
}

/// Bernoulli(keep) mask scaled by `1 / keep`.
pub fn dropout_mask(len: usize, keep: f64, seed: u64) -> Result<Tensor> {
    check_keep(keep)?;
    let mut r = rng::stream(seed, &[0x4472_6f70]);
    let data = (0..len)
        .map(|_| if r.random_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    Ok(Tensor::vector(data))
}

/// Inverse-scaled dropout in training; the identity at inference.
pub fn dropout(tape: &mut Tape, x: Var, keep: f64, mode: Mode) -> Result<Var> {
    check_keep(keep)?;
    match mode {
        Mode::Infer => Ok(x),
        Mode::Train { .. } if keep == 1.0 => Ok(x),
        Mode::Train { seed } => {
            let mask = dropout_mask(tape.value(x).len(), keep, seed)?;
            let mask = mask.reshape(tape.value(x).shape().to_vec())?;
            tape.mul_const(x, mask)
        }
    }
}
