use proptest::prelude::*;

use hvc::gradcheck::finite_diff_check;
use hvc::heads::MoeParams;
use hvc::recurrent::Init;
use hvc::tensor::softmax_slice;
use hvc::{ParamStore, Tape, Tensor, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Σ c_i · v_i with fixed, non-uniform weights so every output
/// coordinate contributes distinctly.
fn weighted(tape: &mut Tape, v: Var) -> hvc::Result<Var> {
    let n = tape.value(v).len();
    let c = Tensor::vector((0..n).map(|i| 0.3 + 0.7 * ((i + 1) as f64).sin()).collect());
    let shaped = c.reshape(tape.value(v).shape().to_vec())?;
    let m = tape.mul_const(v, shaped)?;
    Ok(tape.sum(m))
}

fn split(tape: &mut Tape, x: Var, parts: usize) -> hvc::Result<Vec<Var>> {
    let width = tape.value(x).len() / parts;
    (0..parts)
        .map(|k| tape.gather(x, &(k * width..(k + 1) * width).collect::<Vec<_>>()))
        .collect()
}

fn vec_strategy(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

fn check(x: &[f64], f: impl Fn(&mut Tape, Var) -> hvc::Result<Var>) -> f64 {
    finite_diff_check(f, &Tensor::vector(x.to_vec()), EPS).unwrap()
}

fn below(err: f64) -> Result<(), TestCaseError> {
    if err < TOL {
        Ok(())
    } else {
        Err(TestCaseError::fail(format!("relative error {err:e}")))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_ops(x in vec_strategy(1..7)) {
        let n = x.len();
        below(check(&x, |t, v| { let s = t.sigmoid(v); weighted(t, s) }))?;
        below(check(&x, |t, v| { let s = t.tanh(v); weighted(t, s) }))?;
        below(check(&x, |t, v| { let s = t.one_minus(v); weighted(t, s) }))?;
        below(check(&x, |t, v| { let s = t.scale(v, -1.7); weighted(t, s) }))?;
        below(check(&x, |t, v| { let s = t.mul(v, v)?; weighted(t, s) }))?;
        below(check(&x, |t, v| {
            let c = t.leaf(Tensor::filled(&[n], 0.25));
            let a = t.add(v, c)?;
            let s = t.sub(a, v)?;
            let m = t.mul(s, v)?;
            weighted(t, m)
        }))?;
        below(check(&x, |t, v| {
            let p = t.sigmoid(v);
            let l = t.logit(p);
            weighted(t, l)
        }))?;
    }

    #[test]
    fn softmax_family(x in vec_strategy(1..4), groups in 1usize..4) {
        let x: Vec<f64> = x.iter().cycle().take(x.len() * groups).enumerate().map(|(i, v)| v + 0.1 * i as f64).collect();
        let g = x.len() / groups;
        below(check(&x, |t, v| { let s = t.softmax(v)?; weighted(t, s) }))?;
        below(check(&x, |t, v| { let s = t.group_softmax(v, g)?; weighted(t, s) }))?;
        below(check(&x, |t, v| { let s = t.group_sum(v, g)?; weighted(t, s) }))?;
    }

    #[test]
    fn structural_ops(x in vec_strategy(2..9)) {
        let n = x.len();
        below(check(&x, |t, v| { let c = t.concat(&[v, v]); weighted(t, c) }))?;
        below(check(&x, |t, v| { let g = t.gather(v, &[n - 1, 0, n - 1])?; weighted(t, g) }))?;
        below(check(&x, |t, v| {
            let vals = t.gather(v, &[0, 1])?;
            let s = t.sigmoid(vals);
            let o = t.overwrite(v, &[n - 1, 0], s)?;
            weighted(t, o)
        }))?;
        below(check(&x, |t, v| {
            let parts = [v, v];
            let a = t.add_n(&parts)?;
            weighted(t, a)
        }))?;
    }

    #[test]
    fn row_ops(x in vec_strategy(6..7), rows in 2usize..5) {
        let data: Vec<f64> = (0..rows * 3).map(|i| x[i % 6] * (1.0 + 0.37 * i as f64)).collect();
        let f = |t: &mut Tape, v: Var, which: u8| -> hvc::Result<Var> {
            let mut parts = split(t, v, rows + 1)?;
            let q = parts.pop().unwrap();
            match which {
                0 => { let d = t.row_dots(&parts, q)?; weighted(t, d) }
                1 => {
                    let d = t.row_dots(&parts, q)?;
                    let w = t.softmax(d)?;
                    let s = t.weighted_sum(w, &parts)?;
                    weighted(t, s)
                }
                2 => { let m = t.mean_rows(&parts)?; weighted(t, m) }
                _ => { let m = t.max_rows(&parts)?; weighted(t, m) }
            }
        };
        let mut all = data.clone();
        all.extend_from_slice(&x[..3]);
        for which in 0..4 {
            below(check(&all, |t, v| f(t, v, which))).map_err(|e| TestCaseError::fail(format!("op {which}: {e}")))?;
        }
    }

    #[test]
    fn matvec_both_arguments(w in prop::collection::vec(-1.0f64..1.0, 6), v in vec_strategy(3..4)) {
        let wm = Tensor::matrix(2, 3, w.clone()).unwrap();
        let vt = Tensor::vector(v.clone());
        let by_w = finite_diff_check(|t, m| { let c = t.leaf(vt.clone()); let y = t.matvec(m, c)?; weighted(t, y) }, &wm, EPS).unwrap();
        let by_v = finite_diff_check(|t, x| { let m = t.leaf(wm.clone()); let y = t.matvec(m, x)?; weighted(t, y) }, &vt, EPS).unwrap();
        prop_assert!(by_w < TOL && by_v < TOL);
    }

    #[test]
    fn bce_gradient(x in vec_strategy(1..7), bits in prop::collection::vec(any::<bool>(), 7)) {
        let labels = Tensor::vector(bits[..x.len()].iter().map(|&b| f64::from(u8::from(b))).collect());
        below(check(&x, |t, v| { let p = t.sigmoid(v); t.bce(p, labels.clone()) }))?;
    }

    #[test]
    fn softmax_is_shift_invariant(x in vec_strategy(1..12), shift in -50.0f64..50.0) {
        let base = softmax_slice(&x);
        let moved: Vec<f64> = x.iter().map(|v| v + shift).collect();
        for (a, b) in base.iter().zip(softmax_slice(&moved)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradients_of_a_sum_are_sums_of_gradients(
        x1 in vec_strategy(3..4),
        x2 in vec_strategy(3..4),
        seed in any::<u64>(),
    ) {
        let mut r = hvc::rng::stream(seed, &[]);
        let mut store = ParamStore::new();
        let p = MoeParams::register(&mut store, "moe", 3, 4, 2, &mut Init::Glorot(&mut r)).unwrap();
        let labels = Tensor::vector(vec![1.0, 0.0, 0.0, 1.0]);
        let loss = |t: &mut Tape, x: &[f64]| {
            let v = t.leaf(Tensor::vector(x.to_vec()));
            let probs = hvc::heads::moe_forward(t, &p, v).unwrap();
            t.bce(probs, labels.clone()).unwrap()
        };
        let mut joint = Tape::new(&store);
        let (a, b) = (loss(&mut joint, &x1), loss(&mut joint, &x2));
        let total = joint.add(a, b).unwrap();
        let together = joint.backward(total).param_grads(&store);
        let mut separate = hvc::Gradients::zeros_like(&store);
        for x in [&x1, &x2] {
            let mut t = Tape::new(&store);
            let l = loss(&mut t, x);
            separate.accumulate(&t.backward(l).param_grads(&store)).unwrap();
        }
        for ((_, g1), (_, g2)) in together.iter().zip(separate.iter()) {
            for (u, v) in g1.data().iter().zip(g2.data()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}
