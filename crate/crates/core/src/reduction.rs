//! Frame-count reduction between recurrent stages, plus stream splitting.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recurrent::{bilstm_encode, BiEncoderParams};
use crate::rng::{self, Mode};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionKind {
    None,
    Maxpool,
    Random,
    Hierarchical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReductionConfig {
    pub kind: ReductionKind,
    pub window: usize,
    pub stride: usize,
    pub chunk: usize,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        ReductionConfig {
            kind: ReductionKind::None,
            window: 3,
            stride: 5,
            chunk: 3,
        }
    }
}

impl ReductionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = match self.kind {
            ReductionKind::None => None,
            ReductionKind::Maxpool => (self.window < 2).then_some("window"),
            ReductionKind::Random => (self.stride < 2).then_some("stride"),
            ReductionKind::Hierarchical => (self.chunk < 2).then_some("chunk"),
        };
        match bad {
            Some(field) => Err(Error::Config(format!("{:?} reduction needs {field} >= 2", self.kind))),
            None => Ok(()),
        }
    }
}

fn check_width(op: &'static str, n: usize, name: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Argument(format!("{op}: {name} must be positive")));
    }
    Ok(())
}

/// Component-wise max over consecutive windows; a trailing partial window
/// is pooled as-is. Output length is `ceil(T / window)`.
pub fn max_pool_frames(tape: &mut Tape, rows: &[Var], window: usize) -> Result<Vec<Var>> {
    if rows.is_empty() {
        return Err(Error::EmptySequence("max_pool_frames"));
    }
    check_width("max_pool_frames", window, "window")?;
    rows.chunks(window).map(|w| tape.max_rows(w)).collect()
}

/// Index chosen from each consecutive block of `stride` rows.
pub fn subsample_indices(len: usize, stride: usize, mode: Mode) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptySequence("random_subsample"));
    }
    check_width("random_subsample", stride, "stride")?;
    let blocks = len.div_ceil(stride);
    let mut picks = Vec::with_capacity(blocks);
    let mut r = match mode {
        Mode::Train { seed } => Some(rng::stream(seed, &[0x5375_6273])),
        Mode::Infer => None,
    };
    for b in 0..blocks {
        let start = b * stride;
        let block = stride.min(len - start);
        let offset = match &mut r {
            Some(r) => r.random_range(0..block),
            None => block / 2,
        };
        picks.push(start + offset);
    }
    Ok(picks)
}

/// Keeps one row per block of `stride`: uniformly random in training, the
/// middle row at inference.
pub fn random_subsample<T: Clone>(rows: &[T], stride: usize, mode: Mode) -> Result<Vec<T>> {
    Ok(subsample_indices(rows.len(), stride, mode)?
        .into_iter()
        .map(|i| rows[i].clone())
        .collect())
}

/// Encodes consecutive chunks with one shared bidirectional encoder and
/// keeps the final row of each chunk's encoding.
pub fn hierarchical_merge(tape: &mut Tape, rows: &[Var], p: &BiEncoderParams, chunk: usize) -> Result<Vec<Var>> {
    if rows.is_empty() {
        return Err(Error::EmptySequence("hierarchical_merge"));
    }
    check_width("hierarchical_merge", chunk, "chunk")?;
    rows.chunks(chunk)
        .map(|c| {
            let enc = bilstm_encode(tape, p, c)?;
            Ok(*enc.last().expect("non-empty chunk"))
        })
        .collect()
}

/// Encodes the visual and audio streams independently and concatenates the
/// two video-level vectors. A zero-width audio stream contributes nothing.
pub fn split_streams<V, A>(
    tape: &mut Tape,
    visual: &[Var],
    audio: &[Var],
    mut encode_visual: V,
    mut encode_audio: A,
) -> Result<Var>
where
    V: FnMut(&mut Tape, &[Var]) -> Result<Var>,
    A: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if visual.len() != audio.len() {
        return Err(Error::dim("split_streams", &[visual.len()], &[audio.len()]));
    }
    let xv = encode_visual(tape, visual)?;
    let audio_empty = audio.first().is_none_or(|a| tape.value(*a).is_empty());
    if audio_empty {
        return Ok(xv);
    }
    let xa = encode_audio(tape, audio)?;
    Ok(tape.concat(&[xv, xa]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{single_attention, AttentionParams};
    use crate::recurrent::{gru_step, Init};
    use crate::tape::ParamStore;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn scalars(tape: &mut Tape, xs: &[f64]) -> Vec<Var> {
        xs.iter().map(|&x| tape.leaf(Tensor::scalar(x))).collect()
    }

    #[test]
    fn max_pool_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let rows = scalars(&mut tape, &[1.0, 5.0, 2.0]);
        let out = max_pool_frames(&mut tape, &rows, 2).unwrap();
        let vals: Vec<f64> = out.iter().map(|v| tape.value(*v).data()[0]).collect();
        assert_eq!(vals, vec![5.0, 2.0]);

        let rows: Vec<Var> = [[1.0, 9.0], [4.0, 2.0], [3.0, 3.0]]
            .iter()
            .map(|r| tape.leaf(Tensor::vector(r.to_vec())))
            .collect();
        let out = max_pool_frames(&mut tape, &rows, 3).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(tape.value(out[0]).data(), &[4.0, 9.0]);

        let same = vec![rows[0]; 7];
        let out = max_pool_frames(&mut tape, &same, 3).unwrap();
        assert_eq!(out.len(), 3);
        for v in out {
            assert_eq!(tape.value(v).data(), &[1.0, 9.0]);
        }
        assert!(matches!(
            max_pool_frames(&mut tape, &[], 3),
            Err(Error::EmptySequence(_))
        ));
    }

    #[test]
    fn subsample_infer_takes_block_middle() {
        assert_eq!(subsample_indices(5, 5, Mode::Infer).unwrap(), vec![2]);
        assert_eq!(subsample_indices(12, 5, Mode::Infer).unwrap(), vec![2, 7, 11]);
        assert!(matches!(
            subsample_indices(0, 5, Mode::Infer),
            Err(Error::EmptySequence(_))
        ));
    }

    #[test]
    fn subsample_of_identical_rows_is_constant() {
        let rows = vec![[1.5, -2.0]; 11];
        for seed in 0..20 {
            let out = random_subsample(&rows, 5, Mode::Train { seed }).unwrap();
            assert_eq!(out.len(), 3);
            assert!(out.iter().all(|r| *r == [1.5, -2.0]));
        }
    }

    #[test]
    fn train_subsample_is_uniform_over_seeds() {
        let mut counts = [0usize; 4];
        let n = 10_000;
        for seed in 0..n {
            let picks = subsample_indices(4, 2, Mode::Train { seed }).unwrap();
            assert!(picks[0] < 2 && (2..4).contains(&picks[1]));
            counts[picks[0] * 2 + (picks[1] - 2)] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    fn scalar_bi(store: &mut ParamStore, wf: f64, wb: f64) -> BiEncoderParams {
        let p = BiEncoderParams::register(store, "h", 1, 1, &mut Init::Zeros);
        for id in p.forward.ids() {
            store.set(id, Tensor::matrix(1, 1, vec![wf]).unwrap()).unwrap();
        }
        for id in p.backward.ids() {
            store.set(id, Tensor::matrix(1, 1, vec![wb]).unwrap()).unwrap();
        }
        p
    }

    #[test]
    fn hierarchical_chunks_use_final_rows() {
        let mut store = ParamStore::new();
        let p = scalar_bi(&mut store, 0.7, -1.2);
        let xs = [0.4, -0.9, 1.3, 0.2];
        let mut tape = Tape::new(&store);
        let rows = scalars(&mut tape, &xs);
        let out = hierarchical_merge(&mut tape, &rows, &p, 2).unwrap();
        assert_eq!(out.len(), 2);
        for (k, rep) in out.iter().enumerate() {
            let chunk = &rows[2 * k..2 * k + 2];
            let enc = bilstm_encode(&mut tape, &p, chunk).unwrap();
            assert_eq!(tape.value(*rep), tape.value(enc[1]));
        }

        let whole = hierarchical_merge(&mut tape, &rows, &p, 10).unwrap();
        let enc = bilstm_encode(&mut tape, &p, &rows).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(tape.value(whole[0]), tape.value(enc[3]));
    }

    #[test]
    fn hierarchical_zero_params_give_zeros() {
        let mut store = ParamStore::new();
        let p = BiEncoderParams::register(&mut store, "h", 2, 3, &mut Init::Zeros);
        let mut tape = Tape::new(&store);
        let rows: Vec<Var> = (0..5).map(|i| tape.leaf(Tensor::vector(vec![i as f64, 1.0]))).collect();
        let out = hierarchical_merge(&mut tape, &rows, &p, 2).unwrap();
        assert_eq!(out.len(), 3);
        for v in out {
            assert_eq!(tape.value(v).data(), &[0.0; 3]);
        }
    }

    #[test]
    fn hierarchical_chunk_one_is_per_frame_step_sum() {
        let mut store = ParamStore::new();
        let p = scalar_bi(&mut store, 0.9, 0.4);
        let xs = [0.3, -1.1, 0.6];
        let mut tape = Tape::new(&store);
        let rows = scalars(&mut tape, &xs);
        let out = hierarchical_merge(&mut tape, &rows, &p, 1).unwrap();
        for (rep, row) in out.iter().zip(&rows) {
            let h0 = tape.leaf(Tensor::scalar(0.0));
            let f = gru_step(&mut tape, &p.forward, *row, h0).unwrap();
            let b = gru_step(&mut tape, &p.backward, *row, h0).unwrap();
            let expected = tape.value(f).data()[0] + tape.value(b).data()[0];
            assert_abs_diff_eq!(tape.value(*rep).data()[0], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn split_streams_concatenates_and_checks_lengths() {
        let mut store = ParamStore::new();
        let ev = BiEncoderParams::register(&mut store, "v", 2, 2, &mut Init::Zeros);
        let ea = BiEncoderParams::register(&mut store, "a", 1, 3, &mut Init::Zeros);
        let av = AttentionParams::register(&mut store, "va", 2, &mut Init::Zeros);
        let aa = AttentionParams::register(&mut store, "aa", 3, &mut Init::Zeros);
        let mut tape = Tape::new(&store);
        let visual: Vec<Var> = (0..4).map(|_| tape.leaf(Tensor::vector(vec![1.0, 2.0]))).collect();
        let audio: Vec<Var> = (0..4).map(|_| tape.leaf(Tensor::vector(vec![3.0]))).collect();
        let enc = |p: &BiEncoderParams, q: &AttentionParams| {
            let (p, q) = (p.clone(), q.clone());
            move |t: &mut Tape, rows: &[Var]| {
                let h = bilstm_encode(t, &p, rows)?;
                single_attention(t, &h, &q)
            }
        };
        let x = split_streams(&mut tape, &visual, &audio, enc(&ev, &av), enc(&ea, &aa)).unwrap();
        assert_eq!(tape.value(x).data(), &[0.0; 5]);

        let x = split_streams(&mut tape, &visual, &audio[..3], enc(&ev, &av), enc(&ea, &aa));
        assert!(matches!(x, Err(Error::Dimension { .. })));

        let silent: Vec<Var> = (0..4).map(|_| tape.leaf(Tensor::vector(vec![]))).collect();
        let x = split_streams(&mut tape, &visual, &silent, enc(&ev, &av), enc(&ea, &aa)).unwrap();
        assert_eq!(tape.value(x).len(), 2);
    }

    #[test]
    fn split_streams_scalar_oracle() {
        // Each stream: one frame, scalar GRU with unit weights, attention
        // with zero query. Pooled value = tanh(h_f + h_b) with h_f = h_b.
        let mut store = ParamStore::new();
        let p = scalar_bi(&mut store, 1.0, 1.0);
        let q = AttentionParams::register(&mut store, "q", 1, &mut Init::Zeros);
        let mut tape = Tape::new(&store);
        let v = scalars(&mut tape, &[1.0]);
        let a = scalars(&mut tape, &[-0.5]);
        let enc = |t: &mut Tape, rows: &[Var]| {
            let h = bilstm_encode(t, &p, rows)?;
            single_attention(t, &h, &q)
        };
        let x = split_streams(&mut tape, &v, &a, enc, enc).unwrap();
        let step = |x: f64| {
            let s = crate::tensor::sigmoid(x);
            (1.0 - s) * x.tanh()
        };
        let expected = [(2.0 * step(1.0)).tanh(), (2.0 * step(-0.5)).tanh()];
        for (got, e) in tape.value(x).data().iter().zip(expected) {
            assert_abs_diff_eq!(*got, e, epsilon = 1e-15);
        }
    }
}
