use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::datapipe::{Dataset, Split, TrainingExample};
use crate::model::{GraphContext, Model, ModelConfig, Sampling};
use crate::simkit::derive_seed;

use super::metrics::split_msle;
use super::optim::{clip_global_norm, Adam};
use super::{HarnessError, TrainConfig};

const STREAM_SHUFFLE: u64 = 21;
const STREAM_SAMPLING: u64 = 22;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total objective over the epoch's examples.
    pub train_loss: f64,
    /// Mean main-target MSLE term.
    pub train_main: f64,
    /// Validation MSLE of the mode's target; `None` without a validation split.
    pub val_msle: Option<f64>,
    /// Best selection score so far.
    pub best: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best-scoring epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop: StopReason,
    pub seconds: f64,
}

struct BatchStep {
    totals: Vec<(f64, f64)>,
    grads: BTreeMap<String, Tensor>,
}

fn batch_step(
    model: &Model,
    batch: &[&TrainingExample],
    ctx: &GraphContext,
    sampling: &[Sampling],
) -> Result<BatchStep, HarnessError> {
    let mut tape = Tape::new();
    let bound = model.params.attach(&mut tape);
    let (mean, totals) = model.batch_loss(&mut tape, &bound, batch, ctx, sampling)?;
    if totals.iter().any(|t| !t.0.is_finite()) {
        return Ok(BatchStep { totals, grads: BTreeMap::new() });
    }
    let mut grads = tape.backward(mean).map_err(crate::model::ModelError::from)?;
    Ok(BatchStep { totals, grads: bound.gradients(&model.params, &mut grads) })
}

/// Fits a fresh model of `cfg.variant()` on the training split with Adam,
/// one tape per minibatch, resampling descendants and gate noise every step, and keeps the parameters
/// with the best validation MSLE. Without a validation split the mean
/// training MSLE term selects instead.
pub fn train(
    ds: &Dataset,
    ctx: &GraphContext,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let train_set = ds.examples(Split::Train);
    if train_set.is_empty() {
        return Err(HarnessError::EmptySplit(Split::Train.name()));
    }
    let val_set = ds.examples(Split::Val);
    let mut model = Model::new(model_cfg.clone(), cfg.variant(), ctx.n_promoters, ctx.n_items)?;
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps).with_weight_decay(cfg.weight_decay);
    let started = Instant::now();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut since_best = 0usize;
    let mut stop = StopReason::Completed;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64])));
        let (mut total, mut main, mut norm_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let examples: Vec<&TrainingExample> = batch.iter().map(|&i| train_set[i]).collect();
            let sampling: Vec<Sampling> = examples
                .iter()
                .map(|ex| {
                    let seed =
                        derive_seed(cfg.seed, &[STREAM_SAMPLING, epoch as u64, ex.item.0 as u64, ex.start as u64]);
                    Sampling::train(seed)
                })
                .collect();
            let BatchStep { totals, grads: mut sum } = batch_step(&model, &examples, ctx, &sampling)?;
            for (ex, &(t, m)) in examples.iter().zip(&totals) {
                if !t.is_finite() {
                    return Err(HarnessError::Diverged { epoch, item: ex.item.0, start: ex.start });
                }
                total += t;
                main += m;
            }
            norm_sum += clip_global_norm(&mut sum, cfg.clip_norm);
            batches += 1;
            opt.update(&mut model.params, &sum);
        }
        let n = train_set.len() as f64;
        let val_msle = if val_set.is_empty() { None } else { Some(split_msle(&model, &val_set, ctx)?) };
        let score = val_msle.unwrap_or(main / n);
        if !score.is_finite() {
            return Err(HarnessError::Diverged { epoch, item: u32::MAX, start: 0 });
        }
        if score < best.0 {
            best = (score, epoch, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / n,
            train_main: main / n,
            val_msle,
            best: best.0,
            grad_norm: norm_sum / batches as f64,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} main {:.4} val {:?} ({:.1}s)",
            record.train_loss,
            record.train_main,
            record.val_msle,
            record.seconds
        );
        history.push(record);
        if cfg.patience > 0 && since_best >= cfg.patience {
            stop = StopReason::EarlyStopped;
            break;
        }
    }
    Ok(TrainOutcome { model: best.2, history, best_epoch: best.1, stop, seconds: started.elapsed().as_secs_f64() })
}

/// `epoch,train_loss,train_main,val_msle,best,grad_norm,seconds` with an empty
/// `val_msle` cell when there is no validation split.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), HarnessError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,train_loss,train_main,val_msle,best,grad_norm,seconds")?;
    for r in history {
        let val = r.val_msle.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{:.3}",
            r.epoch, r.train_loss, r.train_main, val, r.best, r.grad_norm, r.seconds
        )?;
    }
    w.flush()?;
    Ok(())
}
