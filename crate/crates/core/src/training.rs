//! Loss, plain SGD, step-decay learning rate, and the train/predict loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate, ground_truth, label_counts, manifest_path, read_manifest, read_records, DatasetSpec, VideoExample,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check_params, sample_coords, CoordReport};
use crate::heads::Taxonomy;
use crate::metrics::{chance_hit_at_one, gap_at_k, hit_at_one};
use crate::model::{DataDims, HeadConfig, Model, ModelConfig};
use crate::predictions::PredictionFile;
use crate::rng::{self, Mode};
use crate::tape::{Gradients, ParamStore, Tape, PROB_EPS};
use crate::tensor::Tensor;

/// Mean binary cross-entropy over classes with probabilities clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn multilabel_loss(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    if probs.shape() != labels.shape() {
        return Err(Error::dim("multilabel_loss", probs.shape(), labels.shape()));
    }
    if probs.is_empty() {
        return Err(Error::EmptySequence("multilabel_loss"));
    }
    let total: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// `p ← p − lr·g` for every parameter. Nothing is modified when any
/// gradient is non-finite; an update that overflows a parameter is an
/// error and leaves the store partly updated.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Argument(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    if grads.len() != store.len() {
        return Err(Error::dim("sgd_step", &[store.len()], &[grads.len()]));
    }
    if let Some(id) = grads.first_non_finite() {
        return Err(Error::Training {
            step: 0,
            message: format!("non-finite gradient for parameter {:?}", store.name(id)),
        });
    }
    for (id, g) in grads.iter() {
        if store.get(id).shape() != g.shape() {
            return Err(Error::dim("sgd_step", store.get(id).shape(), g.shape()));
        }
    }
    for (id, g) in grads.iter() {
        store.get_mut(id).axpy(-lr, g)?;
        if store.get(id).data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Training {
                step: 0,
                message: format!("parameter {:?} overflowed", store.name(id)),
            });
        }
    }
    Ok(())
}

pub fn lr_schedule(base_lr: f64, decay_factor: f64, decay_every: u64, examples_seen: u64) -> f64 {
    let steps = examples_seen / decay_every.max(1);
    base_lr * decay_factor.powi(i32::try_from(steps).unwrap_or(i32::MAX))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_gap: f64,
    pub learning_rate: f64,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of the initial parameters, measured before any
    /// update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochReport>,
    pub examples_seen: u64,
    pub checkpoint_id: String,
}

impl TrainReport {
    pub fn final_gap(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.valid_gap)
    }
}

const SHUFFLE: u64 = 0x5348_5546;
const EXAMPLE: u64 = 0x4558_4d50;

/// Loss and parameter gradients for one example.
pub fn example_gradients(model: &Model, example: &VideoExample, mode: Mode) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(&model.store);
    let loss = model.loss(&mut tape, example, mode)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss).param_grads(&model.store)))
}

/// Inference-mode mean loss over a dataset.
pub fn mean_loss(model: &Model, examples: &[VideoExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for e in examples {
        let mut tape = Tape::new(&model.store);
        let loss = model.loss(&mut tape, e, Mode::Infer)?;
        total += tape.value(loss).data()[0];
    }
    Ok(total / examples.len() as f64)
}

/// Deterministic inference producing a top-`k` prediction file.
pub fn predict(model: &Model, examples: &[VideoExample], k: usize) -> Result<PredictionFile> {
    let scores = examples
        .iter()
        .map(|e| model.scores(e).map(|(fine, _)| fine))
        .collect::<Result<Vec<_>>>()?;
    PredictionFile::from_scores(
        k,
        model.dims.classes(),
        examples.iter().zip(&scores).map(|(e, s)| (e.id.as_str(), s.as_slice())),
    )
}

/// Validation GAP at the config's `top_k`.
pub fn evaluate(model: &Model, examples: &[VideoExample]) -> Result<f64> {
    let preds = predict(model, examples, model.config.top_k)?;
    gap_at_k(&preds.list, &ground_truth(examples), model.config.top_k)
}

/// Top-1 coarse accuracy of a model with a coarse head, with the
/// uniform-guess baseline. `None` when the head has no coarse output.
pub fn coarse_accuracy(model: &Model, examples: &[VideoExample]) -> Result<Option<(f64, f64)>> {
    if !model.uses_coarse_head() {
        return Ok(None);
    }
    let tax = &model.dims.taxonomy;
    let mut scores = Vec::with_capacity(examples.len());
    let mut truth = Vec::with_capacity(examples.len());
    for e in examples {
        let (_, coarse) = model.scores(e)?;
        scores.push(coarse.unwrap_or_default());
        truth.push(e.coarse_labels(tax)?);
    }
    let acc = hit_at_one(&scores, &truth)?;
    Ok(Some((acc, chance_hit_at_one(&truth, tax.coarse_count()))))
}

/// Mini-batch SGD over in-memory data. Each epoch visits a seeded
/// permutation of the training set; the batch gradient is the mean of the
/// per-example gradients, summed in batch order.
pub fn train_model(
    config: ModelConfig,
    dims: DataDims,
    train: &[VideoExample],
    valid: &[VideoExample],
) -> Result<(TrainReport, Model)> {
    train_model_with(config, dims, train, valid, |_| {})
}

/// As [`train_model`], calling `on_epoch` after every epoch.
pub fn train_model_with(
    config: ModelConfig,
    dims: DataDims,
    train: &[VideoExample],
    valid: &[VideoExample],
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<(TrainReport, Model)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for e in train.iter().chain(valid) {
        dims.check(e)?;
    }
    let counts = label_counts(train, dims.classes());
    let mut model = Model::new(config.clone(), dims, Some(&counts))?;
    let initial_train_loss = mean_loss(&model, train)?;
    let opt = &config.optimizer;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut seen = 0u64;
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng::stream(config.seed, &[SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut lr = lr_schedule(opt.base_lr, opt.decay_factor, opt.decay_every_examples, seen);
        for batch in order.chunks(opt.batch_size) {
            lr = lr_schedule(opt.base_lr, opt.decay_factor, opt.decay_every_examples, seen);
            let mut grads = Gradients::zeros_like(&model.store);
            for (pos, &i) in batch.iter().enumerate() {
                let seed = rng::derive(config.seed, &[EXAMPLE, step as u64, pos as u64]);
                let (loss, g) = example_gradients(&model, &train[i], Mode::Train { seed })?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        step,
                        message: format!("loss is {loss} on video {}", train[i].id),
                    });
                }
                loss_sum += loss;
                grads.accumulate(&g)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Some(max) = opt.clip_norm {
                let norm = grads.norm();
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            sgd_step(&mut model.store, &grads, lr).map_err(|e| match e {
                Error::Training { message, .. } => Error::Training { step, message },
                other => other,
            })?;
            seen += batch.len() as u64;
            step += 1;
        }
        let valid_gap = if valid.is_empty() {
            0.0
        } else {
            evaluate(&model, valid)?
        };
        let report = EpochReport {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            valid_gap,
            learning_rate: lr,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        epochs.push(report);
    }
    let report = TrainReport {
        initial_train_loss,
        epochs,
        examples_seen: seen,
        checkpoint_id: Checkpoint::from_model(&model).id()?,
    };
    Ok((report, model))
}

/// Reads the taxonomy recorded in a dataset's manifest, falling back to
/// one coarse class per fine class when the manifest is absent.
pub fn dataset_dims(path: impl AsRef<Path>, examples: &[VideoExample]) -> Result<DataDims> {
    let path = path.as_ref();
    let first = examples
        .first()
        .ok_or_else(|| Error::Input(format!("{} holds no examples", path.display())))?;
    let mpath = manifest_path(path);
    let taxonomy = if mpath.exists() {
        let m = read_manifest(&mpath)?;
        match (m.taxonomy, m.spec) {
            (Some(t), _) => t,
            (None, Some(spec)) => Taxonomy::identity(spec.classes)?,
            (None, None) => return Err(Error::Input(format!("{} names no taxonomy", mpath.display()))),
        }
    } else {
        let max = examples
            .iter()
            .flat_map(|e| e.fine_labels.iter().copied())
            .max()
            .unwrap_or(0);
        Taxonomy::identity(max + 1)?
    };
    Ok(DataDims {
        visual_dim: first.visual.cols(),
        audio_dim: first.audio.cols(),
        taxonomy,
    })
}

/// File-level training: reads both splits and returns the report and the
/// final checkpoint.
pub fn train(
    config: ModelConfig,
    train_path: impl AsRef<Path>,
    valid_path: impl AsRef<Path>,
) -> Result<(TrainReport, Checkpoint)> {
    let train_path = train_path.as_ref();
    let train = read_records(train_path)?;
    let valid = read_records(valid_path)?;
    let dims = dataset_dims(train_path, &train)?;
    let (report, model) = train_model(config, dims, &train, &valid)?;
    Ok((report, Checkpoint::from_model(&model)))
}

/// Whole-pipeline finite-difference check of the training loss on a tiny
/// instance (six frames, six classes, hidden width 4) built for `config`.
pub fn pipeline_gradcheck(config: &ModelConfig, trials: usize, eps: f64, seed: u64) -> Result<Vec<CoordReport>> {
    let mut cfg = config.clone();
    cfg.encoder.hidden = 4;
    cfg.max_frames = cfg.max_frames.max(6);
    let classes = 6;
    if let HeadConfig::Chain { groups, bottleneck, .. } = &mut cfg.head {
        *groups = (*groups).clamp(1, classes);
        *bottleneck = (*bottleneck).clamp(1, cfg.encoder.hidden + classes - 1);
    }
    let spec = DatasetSpec {
        classes,
        coarse_classes: 2,
        visual_dim: 3,
        audio_dim: 2,
        min_frames: 6,
        max_frames: 6,
        mean_labels: 2.0,
        max_labels: 3,
        seed,
        ..DatasetSpec::default()
    };
    let (world, data) = generate(&spec, 0, 1)?;
    let dims = DataDims {
        visual_dim: spec.visual_dim,
        audio_dim: spec.audio_dim,
        taxonomy: world.taxonomy,
    };
    let mut counts = vec![0u64; classes];
    for (c, n) in counts.iter_mut().enumerate() {
        *n = (classes - c) as u64;
    }
    let model = Model::new(cfg, dims, Some(&counts))?;
    let example = &data[0];
    let mode = Mode::Train {
        seed: rng::derive(seed, &[0x4743]),
    };
    let coords = sample_coords(&model.store, trials, seed);
    check_params(&model.store, &coords, eps, |tape| model.loss(tape, example, mode))
}
