//! Training loop, losses and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod schedule;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::corpus::Corpus;
use crate::encoder::{EncoderError, Vocab};
use crate::kb::StructuredKB;
use crate::model::{Instance, MentionFilter, Model, ModelError};
use crate::numerics::{adam_step, grad_check, AdamState, GradCheckReport, Graph, NumericsError};
use crate::rng;
use crate::scalar::Scalar;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::{ConfigError, TrainConfig, CONFIG_KEYS};
pub use schedule::{mask_plan, reg_prob, RegScheme};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite value at step {step}: {source}")]
    NonFinite {
        step: usize,
        #[source]
        source: NumericsError,
    },
    #[error("no training sentence has a usable mention")]
    NoData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub dis_loss: f64,
    pub type_loss: f64,
    /// Share of candidate slots whose entity embedding was zeroed.
    pub masked_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub skipped_sentences: usize,
    pub instances: usize,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Per-epoch and final checkpoints go here when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<usize>,
}

/// Sentences converted with the training filter; over-long sentences and
/// sentences without a usable mention are counted and skipped.
pub fn prepare_training<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    kb: &StructuredKB,
) -> Result<(Vec<Instance>, usize), ModelError> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for s in &corpus.sentences {
        match model.prepare(s, kb, MentionFilter::Train) {
            Ok(Some(inst)) => out.push(inst),
            Ok(None) | Err(ModelError::Encoder(EncoderError::TooLong { .. })) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, skipped))
}

fn non_finite(step: usize) -> impl Fn(ModelError) -> TrainError {
    move |e| match e {
        ModelError::Numerics(n @ NumericsError::NonFinite { .. }) => TrainError::NonFinite { step, source: n },
        other => TrainError::Model(other),
    }
}

/// Builds a model from `config` (vocabulary from `corpus`) and trains it.
pub fn train(
    corpus: &Corpus,
    kb: &StructuredKB,
    config: TrainConfig,
    opts: &TrainOptions,
) -> Result<(Model<f64>, TrainLog), TrainError> {
    let mut model = Model::new(config, Vocab::build(corpus), kb)?;
    let log = train_model(&mut model, corpus, kb, opts)?;
    Ok((model, log))
}

/// Adam over shuffled mini-batches. Each step averages the per-sentence
/// losses of its batch.
pub fn train_model<T: Scalar>(
    model: &mut Model<T>,
    corpus: &Corpus,
    kb: &StructuredKB,
    opts: &TrainOptions,
) -> Result<TrainLog, TrainError> {
    let cfg = model.config.clone();
    let (data, skipped) = prepare_training(model, corpus, kb)?;
    if data.is_empty() {
        return Err(TrainError::NoData);
    }
    let max_count = kb.popularity_counts().iter().copied().max().unwrap_or(1);
    let mut order_rng = rng::stream(cfg.seed, rng::ORDER);
    let mut mask_rng = rng::stream(cfg.seed, rng::MASKING);
    let mut adam = AdamState::new(&model.params, T::lit(cfg.lr));
    let mut log = TrainLog {
        skipped_sentences: skipped,
        instances: data.len(),
        ..TrainLog::default()
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut g = Graph::training(rng::substream(cfg.seed, rng::DROPOUT, step as u64));
            let b = model.params.bind(&mut g);
            let mut totals = Vec::with_capacity(batch.len());
            let (mut dis, mut typ) = (0.0, 0.0);
            let (mut masked, mut slots) = (0usize, 0usize);
            for &i in batch {
                let inst = &data[i];
                let counts = model.slot_counts(inst, kb);
                let plan = mask_plan(&counts, cfg.reg, max_count, &mut mask_rng);
                masked += plan.iter().filter(|&&m| m).count();
                slots += plan.len();
                let out = model.forward(&mut g, &b, inst, Some(&plan)).map_err(non_finite(step))?;
                let l = model.loss(&mut g, inst, &out).map_err(non_finite(step))?;
                dis += g.value(l.dis).item().as_f64();
                typ += l.type_loss.map_or(0.0, |t| g.value(t).item().as_f64());
                totals.push(l.total);
            }
            let n = totals.len() as f64;
            let wrap = |e: NumericsError| non_finite(step)(e.into());
            let stacked = g.concat_rows(&totals).map_err(wrap)?;
            let loss = g.mean(stacked).map_err(wrap)?;
            g.backward(loss).map_err(wrap)?;
            let grads = b.take_grads(&mut g);
            adam_step(&mut model.params, &grads, &mut adam).map_err(wrap)?;
            log.steps.push(StepLog {
                step,
                epoch,
                loss: g.value(loss).item().as_f64(),
                dis_loss: dis / n,
                type_loss: typ / n,
                masked_fraction: if slots == 0 { 0.0 } else { masked as f64 / slots as f64 },
            });
            step += 1;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            save_checkpoint(model, &dir.join(format!("epoch{epoch}.ckpt")))?;
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(model, &dir.join("model.ckpt"))?;
    }
    Ok(log)
}

/// Finite-difference check of the training loss of one instance with
/// respect to every trainable parameter. Runs in evaluation mode, so
/// dropout is off; `entity_mask` still applies.
pub fn model_grad_check(
    model: &mut Model<f64>,
    inst: &Instance,
    entity_mask: Option<&[bool]>,
    eps: f64,
) -> Result<GradCheckReport<f64>, ModelError> {
    let mut params = std::mem::take(&mut model.params);
    let m = &*model;
    let report = grad_check(&mut params, eps, |g, b| {
        let out = m.forward(g, b, inst, entity_mask)?;
        Ok::<_, ModelError>(m.loss(g, inst, &out)?.total)
    });
    model.params = params;
    report
}
