//! Central-difference gradient verification.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Argument(format!(
            "gradient check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    let x = t.data()[0];
    if !x.is_finite() {
        return Err(Error::Evaluation(format!("f = {x}")));
    }
    Ok(x)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Argument(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    Ok(())
}

/// Maximum over coordinates of `|analytic - numeric| / max(1, |numeric|)`
/// for a scalar function of one tensor argument.
pub fn finite_diff_check<F>(f: F, params: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_in(&ParamStore::new(), f, params, eps)
}

/// As [`finite_diff_check`], with `store` available to `f` through
/// [`Tape::param`]. Only the tensor argument is perturbed.
pub fn finite_diff_check_in<F>(store: &ParamStore, f: F, params: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |x: Tensor| -> Result<f64> {
        let mut tape = Tape::new(store);
        let leaf = tape.leaf(x);
        let out = f(&mut tape, leaf)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new(store);
    let leaf = tape.leaf(params.clone());
    let out = f(&mut tape, leaf)?;
    scalar_of(&tape, out)?;
    let analytic = tape
        .backward(out)
        .wrt(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(params.shape()));

    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.data_mut()[i] += eps;
        let mut minus = params.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// One scalar inside a stored parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCoord {
    pub param: ParamId,
    pub index: usize,
}

/// Draws `n` coordinates uniformly over all scalars in the store.
pub fn sample_coords(store: &ParamStore, n: usize, seed: u64) -> Vec<ParamCoord> {
    let total = store.num_scalars();
    let mut r = rng::stream(seed, &[0x6752_4144]);
    (0..n.min(total))
        .map(|_| {
            let mut flat = r.random_range(0..total);
            for id in store.ids() {
                let len = store.get(id).len();
                if flat < len {
                    return ParamCoord { param: id, index: flat };
                }
                flat -= len;
            }
            unreachable!("flat index within total")
        })
        .collect()
}

/// Per-coordinate outcome of [`check_params`].
#[derive(Clone, Debug)]
pub struct CoordReport {
    pub coord: ParamCoord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares the tape gradient of `loss` against central differences for the
/// chosen parameter coordinates. `loss` must be deterministic in the store.
pub fn check_params<F>(store: &ParamStore, coords: &[ParamCoord], eps: f64, loss: F) -> Result<Vec<CoordReport>>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new(store);
    let out = loss(&mut tape)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out).param_grads(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let out = loss(&mut tape)?;
        scalar_of(&tape, out)
    };

    let mut reports = Vec::with_capacity(coords.len());
    let mut work = store.clone();
    for &coord in coords {
        let original = store.get(coord.param).data()[coord.index];
        work.get_mut(coord.param).data_mut()[coord.index] = original + eps;
        let up = eval(&work)?;
        work.get_mut(coord.param).data_mut()[coord.index] = original - eps;
        let down = eval(&work)?;
        work.get_mut(coord.param).data_mut()[coord.index] = original;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads.get(coord.param).data()[coord.index];
        reports.push(CoordReport {
            coord,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(reports)
}

pub fn max_rel_error(reports: &[CoordReport]) -> f64 {
    reports.iter().map(|r| r.rel_error).fold(0.0, f64::max)
}
