use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::VideoExample;
use crate::error::{Error, Result};
use crate::heads::Taxonomy;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const WORLD_STREAM: u64 = 0x574f_524c;
const VIDEO_STREAM: u64 = 0x5649_4445;

/// Everything that determines a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub coarse_classes: usize,
    /// Fine → coarse table; generated from `seed` when absent.
    pub taxonomy: Option<Vec<usize>>,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub mean_labels: f64,
    pub max_labels: usize,
    pub blank_fraction: f64,
    pub noise: f64,
    /// Class sampling weight of the class ranked `r` is `(r + 1)^-exponent`.
    pub frequency_exponent: f64,
    /// Share of each fine prototype drawn from its coarse class prototype.
    pub coarse_mix: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 48,
            coarse_classes: 6,
            taxonomy: None,
            visual_dim: 16,
            audio_dim: 4,
            min_frames: 10,
            max_frames: 60,
            mean_labels: 3.4,
            max_labels: 6,
            blank_fraction: 0.3,
            noise: 0.1,
            frequency_exponent: 0.6,
            coarse_mix: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Argument(m));
        if self.classes == 0 || self.classes > u16::MAX as usize {
            return fail(format!("classes must lie in [1, 65535], got {}", self.classes));
        }
        if self.coarse_classes == 0 || self.coarse_classes > self.classes {
            return fail(format!(
                "coarse_classes must lie in [1, classes], got {}",
                self.coarse_classes
            ));
        }
        if self.visual_dim == 0 {
            return fail("visual_dim must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return fail(format!(
                "need 1 <= min_frames <= max_frames, got {}..{}",
                self.min_frames, self.max_frames
            ));
        }
        if !(0.0..1.0).contains(&self.blank_fraction) {
            return fail(format!(
                "blank_fraction must lie in [0, 1), got {}",
                self.blank_fraction
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return fail(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.coarse_mix) {
            return fail(format!("coarse_mix must lie in [0, 1], got {}", self.coarse_mix));
        }
        if !(self.frequency_exponent >= 0.0) {
            return fail("frequency_exponent must be non-negative".into());
        }
        let top = self.label_cap();
        if self.max_labels == 0 || !(self.mean_labels >= 1.0 && self.mean_labels <= top as f64) {
            return fail(format!("mean_labels must lie in [1, {top}], got {}", self.mean_labels));
        }
        if let Some(t) = &self.taxonomy {
            if t.len() != self.classes {
                return fail(format!("taxonomy has {} entries for {} classes", t.len(), self.classes));
            }
            Taxonomy::new(t.clone(), self.coarse_classes)?;
        }
        Ok(())
    }

    fn label_cap(&self) -> usize {
        self.max_labels.min(self.classes)
    }
}

/// Mean of a Poisson(λ) restricted to `1..=cap`.
fn truncated_poisson_mean(lambda: f64, cap: usize) -> f64 {
    let mut p = (-lambda).exp();
    let (mut num, mut den) = (0.0, 0.0);
    for k in 1..=cap {
        p *= lambda / k as f64;
        num += k as f64 * p;
        den += p;
    }
    num / den
}

/// Rate whose truncated mean hits `target`.
fn solve_rate(target: f64, cap: usize) -> f64 {
    let (mut lo, mut hi) = (1e-9, 1.0);
    while truncated_poisson_mean(hi, cap) < target && hi < 1e6 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truncated_poisson_mean(mid, cap) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn unit_gaussian(dim: usize, r: &mut Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

/// Seed-determined quantities shared by every split of one dataset.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub taxonomy: Taxonomy,
    pub class_weights: Vec<f64>,
    pub visual_prototypes: Vec<Vec<f64>>,
    pub audio_prototypes: Vec<Vec<f64>>,
    rate: f64,
}

impl SyntheticWorld {
    pub fn new(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::stream(spec.seed, &[WORLD_STREAM]);
        let c = spec.classes;
        let v = spec.coarse_classes;

        let taxonomy = match &spec.taxonomy {
            Some(t) => Taxonomy::new(t.clone(), v)?,
            None => {
                let mut order: Vec<usize> = (0..c).collect();
                order.shuffle(&mut r);
                let mut table = vec![0; c];
                for (k, &fine) in order.iter().enumerate() {
                    table[fine] = if k < v { k } else { r.random_range(0..v) };
                }
                Taxonomy::new(table, v)?
            }
        };

        let mut ranks: Vec<usize> = (0..c).collect();
        ranks.shuffle(&mut r);
        let class_weights = ranks
            .iter()
            .map(|&rank| ((rank + 1) as f64).powf(-spec.frequency_exponent))
            .collect();

        let prototypes = |dim: usize, r: &mut Rng| -> Vec<Vec<f64>> {
            if dim == 0 {
                return vec![Vec::new(); c];
            }
            let coarse: Vec<Vec<f64>> = (0..v).map(|_| unit_gaussian(dim, r)).collect();
            (0..c)
                .map(|f| {
                    let own = unit_gaussian(dim, r);
                    let parent = &coarse[taxonomy.coarse_of(f).unwrap()];
                    normalized(
                        own.iter()
                            .zip(parent)
                            .map(|(a, b)| (1.0 - spec.coarse_mix) * a + spec.coarse_mix * b)
                            .collect(),
                    )
                })
                .collect()
        };
        let visual_prototypes = prototypes(spec.visual_dim, &mut r);
        let audio_prototypes = prototypes(spec.audio_dim, &mut r);

        Ok(SyntheticWorld {
            taxonomy,
            class_weights,
            visual_prototypes,
            audio_prototypes,
            rate: solve_rate(spec.mean_labels, spec.label_cap()),
        })
    }

    /// Poisson(rate) pmf restricted to `1..=cap`; sample + 1 is the count.
    fn label_count_dist(&self, cap: usize) -> WeightedIndex<f64> {
        let mut p = 1.0;
        let weights: Vec<f64> = (1..=cap)
            .map(|k| {
                p *= self.rate / k as f64;
                p
            })
            .collect();
        WeightedIndex::new(weights).expect("positive label-count weights")
    }

    /// The `index`-th video of the stream; independent of every other index.
    pub fn video(&self, spec: &DatasetSpec, index: u64) -> VideoExample {
        let mut r = rng::stream(spec.seed, &[VIDEO_STREAM, index]);
        let t = r.random_range(spec.min_frames..=spec.max_frames);
        let cap = spec.label_cap();
        let count = 1 + self.label_count_dist(cap).sample(&mut r);
        let labels: Vec<usize> = index::sample_weighted(&mut r, spec.classes, |i| self.class_weights[i], count)
            .expect("positive class weights")
            .into_iter()
            .collect();

        let blanks = ((spec.blank_fraction * t as f64).round() as usize).min(t - 1);
        let informative = t - blanks;
        let mut frame_labels: Vec<Option<usize>> = (0..informative)
            .map(|i| {
                if i < labels.len() {
                    Some(labels[i])
                } else {
                    Some(labels[r.random_range(0..labels.len())])
                }
            })
            .collect();
        frame_labels.extend(std::iter::repeat_n(None, blanks));
        frame_labels.shuffle(&mut r);

        let noise = Normal::new(0.0, 1.0).unwrap();
        let blank_scale = 0.1 * spec.noise;
        let frame = |proto: Option<&Vec<f64>>, dim: usize, r: &mut Rng| -> Vec<f64> {
            (0..dim)
                .map(|j| {
                    let x = match proto {
                        Some(p) => p[j] + spec.noise * noise.sample(r),
                        None => blank_scale * noise.sample(r),
                    };
                    x as f32 as f64
                })
                .collect()
        };
        let mut visual = Vec::with_capacity(t * spec.visual_dim);
        let mut audio = Vec::with_capacity(t * spec.audio_dim);
        for fl in &frame_labels {
            visual.extend(frame(fl.map(|l| &self.visual_prototypes[l]), spec.visual_dim, &mut r));
            audio.extend(frame(fl.map(|l| &self.audio_prototypes[l]), spec.audio_dim, &mut r));
        }

        VideoExample {
            id: format!("vid{index:07}"),
            visual: Tensor::new(vec![t, spec.visual_dim], visual).unwrap(),
            audio: Tensor::new(vec![t, spec.audio_dim], audio).unwrap(),
            fine_labels: labels.into_iter().collect::<BTreeSet<_>>(),
        }
    }
}

/// Videos `skip .. skip + n` of the stream defined by `spec`.
pub fn generate(spec: &DatasetSpec, skip: u64, n: usize) -> Result<(SyntheticWorld, Vec<VideoExample>)> {
    let world = SyntheticWorld::new(spec)?;
    let videos = (0..n as u64).map(|i| world.video(spec, skip + i)).collect();
    Ok((world, videos))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_hits_target_mean() {
        let rate = solve_rate(3.4, 6);
        assert!((truncated_poisson_mean(rate, 6) - 3.4).abs() < 1e-9);
        assert!(rate > 3.4);
    }

    #[test]
    fn noiseless_single_label_frames_are_prototypes() {
        let spec = DatasetSpec {
            classes: 5,
            coarse_classes: 2,
            mean_labels: 1.0,
            max_labels: 1,
            blank_fraction: 0.0,
            noise: 0.0,
            ..DatasetSpec::default()
        };
        let (world, videos) = generate(&spec, 0, 10).unwrap();
        for v in videos {
            assert_eq!(v.fine_labels.len(), 1);
            let l = *v.fine_labels.iter().next().unwrap();
            for t in 0..v.frames() {
                for (a, b) in v.visual.row(t).iter().zip(&world.visual_prototypes[l]) {
                    assert_eq!(*a, *b as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = DatasetSpec::default();
        let (_, a) = generate(&spec, 0, 20).unwrap();
        let (_, b) = generate(&spec, 0, 20).unwrap();
        assert_eq!(a, b);
        let (_, tail) = generate(&spec, 15, 5).unwrap();
        assert_eq!(&a[15..], &tail[..]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            DatasetSpec {
                min_frames: 0,
                ..DatasetSpec::default()
            },
            DatasetSpec {
                blank_fraction: 1.0,
                ..DatasetSpec::default()
            },
            DatasetSpec {
                coarse_classes: 60,
                ..DatasetSpec::default()
            },
            DatasetSpec {
                mean_labels: 9.0,
                ..DatasetSpec::default()
            },
            DatasetSpec {
                taxonomy: Some(vec![0; 48]),
                ..DatasetSpec::default()
            },
        ];
        for spec in bad {
            assert!(
                matches!(generate(&spec, 0, 1), Err(Error::Argument(_)) | Err(Error::Taxonomy(_))),
                "{spec:?}"
            );
        }
    }
}
