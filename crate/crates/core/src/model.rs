//! Model configuration and the assembled frame-to-probability network.

use serde::{Deserialize, Serialize};

use crate::attention::{dropout, multi_attention, single_attention, AttentionParams, MultiAttentionParams};
use crate::data::{indicator, VideoExample};
use crate::error::{Error, Result};
use crate::heads::{
    chain_forward, hmoe_forward, joint_loss, moe_forward, ChainParams, HmoeParams, MoeParams, Taxonomy,
};
use crate::recurrent::{bilstm_encode, BiEncoderParams, Init};
use crate::reduction::{hierarchical_merge, max_pool_frames, random_subsample, ReductionConfig, ReductionKind};
use crate::rng::{self, Mode};
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Recurrent stages. Max-pool and hierarchical reductions sit between
    /// the first and second stage and therefore need at least two.
    pub layers: usize,
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { layers: 1, hidden: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Single,
    Multi,
    /// Plain mean over frames.
    #[serde(alias = "mean")]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HeadConfig {
    Moe {
        mixtures: usize,
    },
    Hmoe {
        mixtures: usize,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Chain {
        mixtures: usize,
        groups: usize,
        bottleneck: usize,
    },
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every_examples: u64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Rescales the batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 64.0,
            decay_factor: 0.5,
            decay_every_examples: 4_000,
            batch_size: 16,
            epochs: 10,
            clip_norm: Some(0.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub reduction: ReductionConfig,
    pub attention: AttentionKind,
    pub split_streams: bool,
    pub dropout_keep: f64,
    pub head: HeadConfig,
    pub optimizer: OptimizerConfig,
    /// Longer sequences keep only their earliest frames.
    pub max_frames: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            reduction: ReductionConfig::default(),
            attention: AttentionKind::Single,
            split_streams: false,
            dropout_keep: 0.8,
            head: HeadConfig::Moe { mixtures: 4 },
            optimizer: OptimizerConfig::default(),
            max_frames: 60,
            top_k: 20,
            seed: 0,
        }
    }
}

pub const PRESETS: &[&str] = &[
    "att-bilstm",
    "mean-bilstm",
    "att-bilstm2",
    "maxpool3",
    "maxpool5",
    "random5",
    "random5-deep",
    "hierarchical3",
    "hmoe",
    "chain",
    "multi-att",
    "split-att",
];

impl ModelConfig {
    /// Named architecture presets at desk scale.
    pub fn preset(name: &str) -> Result<ModelConfig> {
        let base = ModelConfig::default();
        let maxpool = |window| ModelConfig {
            encoder: EncoderConfig {
                layers: 2,
                ..EncoderConfig::default()
            },
            reduction: ReductionConfig {
                kind: ReductionKind::Maxpool,
                window,
                ..ReductionConfig::default()
            },
            ..ModelConfig::default()
        };
        let random = |layers| ModelConfig {
            encoder: EncoderConfig {
                layers,
                ..EncoderConfig::default()
            },
            reduction: ReductionConfig {
                kind: ReductionKind::Random,
                stride: 5,
                ..ReductionConfig::default()
            },
            ..ModelConfig::default()
        };
        Ok(match name {
            "att-bilstm" => base,
            "mean-bilstm" => ModelConfig {
                attention: AttentionKind::None,
                ..base
            },
            "att-bilstm2" => ModelConfig {
                encoder: EncoderConfig {
                    layers: 2,
                    ..EncoderConfig::default()
                },
                ..base
            },
            "maxpool3" => maxpool(3),
            "maxpool5" => maxpool(5),
            "random5" => random(1),
            "random5-deep" => random(4),
            "hierarchical3" => ModelConfig {
                encoder: EncoderConfig {
                    layers: 2,
                    ..EncoderConfig::default()
                },
                reduction: ReductionConfig {
                    kind: ReductionKind::Hierarchical,
                    chunk: 3,
                    ..ReductionConfig::default()
                },
                ..base
            },
            // Per-class means make a coarse class weigh C/V times a fine
            // one; lambda = V/C (6/48) evens them out.
            "hmoe" => ModelConfig {
                head: HeadConfig::Hmoe {
                    mixtures: 4,
                    lambda: 0.125,
                },
                ..base
            },
            "chain" => ModelConfig {
                head: HeadConfig::Chain {
                    mixtures: 4,
                    groups: 4,
                    bottleneck: 16,
                },
                ..maxpool(3)
            },
            "multi-att" => ModelConfig {
                attention: AttentionKind::Multi,
                ..base
            },
            "split-att" => ModelConfig {
                split_streams: true,
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; known: {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.reduction.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.encoder.hidden == 0 || self.encoder.layers == 0 {
            return fail("encoder needs layers >= 1 and hidden >= 1".into());
        }
        if matches!(
            self.reduction.kind,
            ReductionKind::Maxpool | ReductionKind::Hierarchical
        ) && self.encoder.layers < 2
        {
            return fail(format!(
                "{:?} reduction sits between two recurrent stages; set layers >= 2",
                self.reduction.kind
            ));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return fail(format!("dropout_keep must lie in (0, 1], got {}", self.dropout_keep));
        }
        if self.attention == AttentionKind::Multi {
            if self.split_streams {
                return fail("multi attention does not combine with split streams".into());
            }
            if !matches!(self.head, HeadConfig::Moe { .. }) {
                return fail(
                    "multi attention routes each class to its own pooled vector and needs the moe head".into(),
                );
            }
        }
        if let HeadConfig::Hmoe { lambda, .. } = self.head {
            if !(lambda >= 0.0) {
                return fail(format!("hmoe lambda must be non-negative, got {lambda}"));
            }
        }
        let o = &self.optimizer;
        if !(o.base_lr > 0.0 && o.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", o.base_lr));
        }
        if o.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return fail("clip_norm must be positive".into());
        }
        if o.batch_size == 0 || o.decay_every_examples == 0 {
            return fail("batch_size and decay_every_examples must be positive".into());
        }
        if self.max_frames == 0 || self.top_k == 0 {
            return fail("max_frames and top_k must be positive".into());
        }
        Ok(())
    }
}

/// Data-side dimensions a model is built against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataDims {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub taxonomy: Taxonomy,
}

impl DataDims {
    pub fn classes(&self) -> usize {
        self.taxonomy.fine_count()
    }

    pub fn check(&self, e: &VideoExample) -> Result<()> {
        if e.visual.cols() != self.visual_dim || e.audio.cols() != self.audio_dim || e.audio.rows() != e.visual.rows() {
            return Err(Error::Checkpoint(format!(
                "video {} has shapes {:?}/{:?}, model expects widths {}/{}",
                e.id,
                e.visual.shape(),
                e.audio.shape(),
                self.visual_dim,
                self.audio_dim
            )));
        }
        if e.frames() == 0 {
            return Err(Error::EmptySequence("model input"));
        }
        if let Some(&l) = e.fine_labels.iter().find(|&&l| l >= self.classes()) {
            return Err(Error::Checkpoint(format!(
                "video {} has label {l} outside {} classes",
                e.id,
                self.classes()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Recurrent(BiEncoderParams),
    MaxPool(usize),
    Subsample(usize),
    Hierarchical(BiEncoderParams, usize),
}

#[derive(Clone, Debug)]
enum Pooling {
    Single(AttentionParams),
    Multi(MultiAttentionParams),
    Mean,
}

#[derive(Clone, Debug)]
struct StreamEncoder {
    stages: Vec<Stage>,
    pooling: Pooling,
}

#[derive(Clone, Debug)]
enum Head {
    Moe(MoeParams),
    Hmoe(HmoeParams, f64),
    Chain(ChainParams),
}

/// Probabilities produced for one video, as tape nodes.
pub struct Forward {
    pub fine: Var,
    pub coarse: Option<Var>,
    /// Number of rows entering each recurrent stage after the first
    /// reduction, for inspection.
    pub stage_lengths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: DataDims,
    pub chain_groups: Option<Vec<Vec<usize>>>,
    pub store: ParamStore,
    streams: Vec<StreamEncoder>,
    head: Head,
}

impl StreamEncoder {
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        cfg: &ModelConfig,
        verticals: usize,
        init: &mut Init,
    ) -> Self {
        let h = cfg.encoder.hidden;
        let layers = cfg.encoder.layers;
        let r = &cfg.reduction;
        let mut stages = Vec::new();
        let bi = |store: &mut ParamStore, k: usize, input: usize, init: &mut Init| {
            BiEncoderParams::register(store, &format!("{prefix}.layer{k}"), input, h, init)
        };
        match r.kind {
            ReductionKind::None => {
                for k in 0..layers {
                    stages.push(Stage::Recurrent(bi(store, k, if k == 0 { input } else { h }, init)));
                }
            }
            ReductionKind::Random => {
                stages.push(Stage::Subsample(r.stride));
                for k in 0..layers {
                    stages.push(Stage::Recurrent(bi(store, k, if k == 0 { input } else { h }, init)));
                }
            }
            ReductionKind::Maxpool => {
                stages.push(Stage::Recurrent(bi(store, 0, input, init)));
                stages.push(Stage::MaxPool(r.window));
                for k in 1..layers {
                    stages.push(Stage::Recurrent(bi(store, k, h, init)));
                }
            }
            ReductionKind::Hierarchical => {
                stages.push(Stage::Hierarchical(bi(store, 0, input, init), r.chunk));
                for k in 1..layers {
                    stages.push(Stage::Recurrent(bi(store, k, h, init)));
                }
            }
        }
        let pooling = match cfg.attention {
            AttentionKind::Single => {
                Pooling::Single(AttentionParams::register(store, &format!("{prefix}.att"), h, init))
            }
            AttentionKind::Multi => Pooling::Multi(MultiAttentionParams::register(
                store,
                &format!("{prefix}.multi_att"),
                h,
                verticals,
                init,
            )),
            AttentionKind::None => Pooling::Mean,
        };
        StreamEncoder { stages, pooling }
    }

    /// Encodes a frame sequence; returns one pooled vector, or one per
    /// vertical label under multi attention.
    fn encode(&self, tape: &mut Tape, frames: &[Var], mode: Mode, lengths: &mut Vec<usize>) -> Result<Vec<Var>> {
        let mut rows = frames.to_vec();
        for (k, stage) in self.stages.iter().enumerate() {
            rows = match stage {
                Stage::Recurrent(p) => {
                    lengths.push(rows.len());
                    bilstm_encode(tape, p, &rows)?
                }
                Stage::MaxPool(w) => max_pool_frames(tape, &rows, *w)?,
                Stage::Subsample(stride) => {
                    let mode = match mode {
                        Mode::Train { seed } => Mode::Train {
                            seed: rng::derive(seed, &[0x5355_4253, k as u64]),
                        },
                        Mode::Infer => Mode::Infer,
                    };
                    random_subsample(&rows, *stride, mode)?
                }
                Stage::Hierarchical(p, chunk) => {
                    lengths.push(rows.len());
                    hierarchical_merge(tape, &rows, p, *chunk)?
                }
            };
        }
        match &self.pooling {
            Pooling::Single(p) => Ok(vec![single_attention(tape, &rows, p)?]),
            Pooling::Mean => Ok(vec![tape.mean_rows(&rows)?]),
            Pooling::Multi(p) => (0..p.verticals).map(|i| multi_attention(tape, &rows, p, i)).collect(),
        }
    }
}

impl Model {
    /// Builds a freshly initialised model. `label_counts` (training split
    /// only) orders the classifier-chain groups.
    pub fn new(config: ModelConfig, dims: DataDims, label_counts: Option<&[u64]>) -> Result<Self> {
        config.validate()?;
        let chain_groups = match &config.head {
            HeadConfig::Chain { groups, .. } => {
                let counts = label_counts
                    .map(<[u64]>::to_vec)
                    .unwrap_or_else(|| vec![0; dims.classes()]);
                if counts.len() != dims.classes() {
                    return Err(Error::dim("Model::new", &[dims.classes()], &[counts.len()]));
                }
                Some(crate::heads::group_by_frequency(&counts, *groups)?)
            }
            _ => None,
        };
        let mut r = rng::stream(config.seed, &[0x494e_4954]);
        Model::assemble(config, dims, chain_groups, &mut Init::Glorot(&mut r))
    }

    /// Rebuilds the layout with zero weights, to be filled from a checkpoint.
    pub fn skeleton(config: ModelConfig, dims: DataDims, chain_groups: Option<Vec<Vec<usize>>>) -> Result<Self> {
        config.validate()?;
        Model::assemble(config, dims, chain_groups, &mut Init::Zeros)
    }

    fn assemble(
        config: ModelConfig,
        dims: DataDims,
        chain_groups: Option<Vec<Vec<usize>>>,
        init: &mut Init,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let v = dims.taxonomy.coarse_count();
        let streams = if config.split_streams {
            if dims.audio_dim == 0 {
                vec![StreamEncoder::build(
                    &mut store,
                    "visual",
                    dims.visual_dim,
                    &config,
                    v,
                    init,
                )]
            } else {
                vec![
                    StreamEncoder::build(&mut store, "visual", dims.visual_dim, &config, v, init),
                    StreamEncoder::build(&mut store, "audio", dims.audio_dim, &config, v, init),
                ]
            }
        } else {
            vec![StreamEncoder::build(
                &mut store,
                "frames",
                dims.visual_dim + dims.audio_dim,
                &config,
                v,
                init,
            )]
        };
        let width = config.encoder.hidden * streams.len();
        let head = match &config.head {
            HeadConfig::Moe { mixtures } => Head::Moe(MoeParams::register(
                &mut store,
                "moe",
                width,
                dims.classes(),
                *mixtures,
                init,
            )?),
            HeadConfig::Hmoe { mixtures, lambda } => Head::Hmoe(
                HmoeParams::register(&mut store, "hmoe", width, &dims.taxonomy, *mixtures, init)?,
                *lambda,
            ),
            HeadConfig::Chain {
                mixtures, bottleneck, ..
            } => {
                let groups = chain_groups
                    .clone()
                    .ok_or_else(|| Error::Config("chain head needs group order".into()))?;
                Head::Chain(ChainParams::register(
                    &mut store,
                    "chain",
                    width,
                    groups,
                    *mixtures,
                    *bottleneck,
                    init,
                )?)
            }
        };
        Ok(Model {
            config,
            dims,
            chain_groups,
            store,
            streams,
            head,
        })
    }

    pub fn uses_coarse_head(&self) -> bool {
        matches!(self.head, Head::Hmoe(..))
    }

    /// Forward pass for one video on a tape bound to `self.store` (or a
    /// perturbed copy with the same layout).
    pub fn forward(&self, tape: &mut Tape, example: &VideoExample, mode: Mode) -> Result<Forward> {
        self.dims.check(example)?;
        let t = example.frames().min(self.config.max_frames);
        let mut lengths = Vec::new();
        let pooled: Vec<Var> = if self.config.split_streams {
            let visual: Vec<Var> = (0..t)
                .map(|i| tape.leaf(Tensor::vector(example.visual.row(i).to_vec())))
                .collect();
            let audio: Vec<Var> = (0..t)
                .map(|i| tape.leaf(Tensor::vector(example.audio.row(i).to_vec())))
                .collect();
            let enc_v = &self.streams[0];
            let enc_a = self.streams.get(1);
            let mut lv = Vec::new();
            let x = crate::reduction::split_streams(
                tape,
                &visual,
                &audio,
                |tape, rows| Ok(enc_v.encode(tape, rows, mode, &mut lv)?[0]),
                |tape, rows| {
                    let enc = enc_a.expect("audio encoder exists for non-empty audio");
                    Ok(enc.encode(tape, rows, mode, &mut Vec::new())?[0])
                },
            )?;
            lengths = lv;
            vec![x]
        } else {
            let frames: Vec<Var> = (0..t)
                .map(|i| {
                    let mut row = example.visual.row(i).to_vec();
                    row.extend_from_slice(example.audio.row(i));
                    tape.leaf(Tensor::vector(row))
                })
                .collect();
            self.streams[0].encode(tape, &frames, mode, &mut lengths)?
        };

        let keep = self.config.dropout_keep;
        let pooled = pooled
            .into_iter()
            .enumerate()
            .map(|(i, x)| {
                let m = match mode {
                    Mode::Train { seed } => Mode::Train {
                        seed: rng::derive(seed, &[0x4452_4f50, i as u64]),
                    },
                    Mode::Infer => Mode::Infer,
                };
                dropout(tape, x, keep, m)
            })
            .collect::<Result<Vec<_>>>()?;

        let (fine, coarse) = match &self.head {
            Head::Moe(p) if pooled.len() > 1 => (self.routed_moe(tape, p, &pooled)?, None),
            Head::Moe(p) => (moe_forward(tape, p, pooled[0])?, None),
            Head::Hmoe(p, _) => {
                let out = hmoe_forward(tape, p, pooled[0])?;
                (out.fine, Some(out.coarse))
            }
            Head::Chain(p) => (chain_forward(tape, p, pooled[0])?, None),
        };
        Ok(Forward {
            fine,
            coarse,
            stage_lengths: lengths,
        })
    }

    /// Each fine class reads the pooled vector of its coarse parent.
    fn routed_moe(&self, tape: &mut Tape, p: &MoeParams, pooled: &[Var]) -> Result<Var> {
        let mut probs = tape.leaf(Tensor::zeros(&[self.dims.classes()]));
        for (j, &x) in pooled.iter().enumerate() {
            let members = self.dims.taxonomy.members(j);
            let all = moe_forward(tape, p, x)?;
            let mine = tape.gather(all, &members)?;
            probs = tape.overwrite(probs, &members, mine)?;
        }
        Ok(probs)
    }

    /// Training objective for one video.
    pub fn loss(&self, tape: &mut Tape, example: &VideoExample, mode: Mode) -> Result<Var> {
        let out = self.forward(tape, example, mode)?;
        let fine_labels = indicator(&example.fine_labels, self.dims.classes());
        match (&self.head, out.coarse) {
            (Head::Hmoe(_, lambda), Some(coarse)) => {
                let coarse_labels = indicator(
                    &example.coarse_labels(&self.dims.taxonomy)?,
                    self.dims.taxonomy.coarse_count(),
                );
                joint_loss(tape, coarse, out.fine, coarse_labels, fine_labels, *lambda)
            }
            _ => tape.bce(out.fine, fine_labels),
        }
    }

    /// Inference-mode fine probabilities (and coarse ones for HMoE).
    pub fn scores(&self, example: &VideoExample) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, example, Mode::Infer)?;
        let fine = tape.value(out.fine).data().to_vec();
        let coarse = out.coarse.map(|c| tape.value(c).data().to_vec());
        Ok((fine, coarse))
    }
}
