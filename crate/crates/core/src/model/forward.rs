use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::layers::logistic_noise;
use crate::autodiff::{checkpoint, Bound, ParamStore, Tape, Tensor, Var};
use crate::datapipe::{sample_descendants, DescendantSets, TrainingExample};
use crate::simkit::derive_seed;

use super::decoder::{
    activation_filter, decode_coefficients, membership_history, reachability_history, synthesize, Coefficients,
    DecoderVars, Filtered, History,
};
use super::losses::{loss_aux, loss_main, loss_total, AuxStep, LossVars};
use super::spatial::{fuse, global_day, global_encode, global_keys, local_encode, GlobalVars, LocalVars};
use super::temporal::{apply_link, temporal_pre, TemporalVars};
use super::{init_params, param_shapes, GraphContext, Mode, ModelConfig, ModelError, StructureTarget, Variant};

const STREAM_DESCENDANTS: u64 = 11;
const STREAM_NOISE: u64 = 12;
const EVAL_SEED: u64 = 0x5eed;

/// Randomness of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sampling {
    /// Base seed of the descendant subsamples and gate noise.
    pub seed: u64,
    /// Draw logistic gate noise; otherwise gates take their expected value.
    pub noise: bool,
}

impl Sampling {
    pub fn train(seed: u64) -> Self {
        Self { seed, noise: true }
    }

    /// Fixed descendant subsamples and expected gates.
    pub fn eval() -> Self {
        Self { seed: EVAL_SEED, noise: false }
    }
}

/// Decoder nodes of one horizon step.
#[derive(Clone, Debug)]
pub struct StepVars {
    pub coefficients: Coefficients,
    pub filtered: Filtered,
    /// `n × 1` propagation-scale column.
    pub y_hat: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `n × Δt` prediction of the mode's target.
    pub output: Var,
    /// Predicted self-sales in the two-stage mode.
    pub x_hat: Option<Var>,
    /// Fused promoter representation `Ĥ`.
    pub h_hat: Var,
    pub steps: Vec<StepVars>,
}

/// Plain values of an evaluation forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub output: Tensor,
    pub x_hat: Option<Tensor>,
    /// Per horizon step, `l̂_m ≥ δ`.
    pub kept: Vec<Vec<bool>>,
    /// Per horizon step, the filtered coefficients `Ŝ_f`.
    pub filtered: Vec<Tensor>,
}

/// Whole-graph global-encoder outputs already placed on one tape, by day.
/// They carry no randomness, so every example on the tape can share them.
#[derive(Debug, Default)]
pub struct GlobalCache {
    keys: Option<Var>,
    days: BTreeMap<usize, Var>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    variant: Variant,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, variant: Variant, n_promoters: usize, n_items: usize) -> Result<Self, ModelError> {
        let params = init_params(&cfg, variant, n_promoters, n_items)?;
        Ok(Self { cfg, variant, params })
    }

    /// Wraps trained parameters, checking them against the architecture.
    pub fn from_parts(cfg: ModelConfig, variant: Variant, params: ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        let n_p = params.get("embed.promoter").map(|t| t.rows()).unwrap_or(0);
        let n_i = params.get("embed.item").map(|t| t.rows()).unwrap_or(0);
        let expected = param_shapes(&cfg, variant, n_p, n_i);
        if expected.len() != params.len() {
            return Err(ModelError::Config(format!(
                "{} parameters, architecture needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Config(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(ModelError::Config(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self { cfg, variant, params })
    }

    pub fn n_promoters(&self) -> usize {
        self.params.get("embed.promoter").map(|t| t.rows()).unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let meta = serde_json::to_value(Meta { config: self.cfg.clone(), variant: self.variant })
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(checkpoint::save(path, &self.params, &meta)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (params, meta) = checkpoint::load(path)?;
        let meta: Meta =
            serde_json::from_value(meta).map_err(|e| ModelError::Config(format!("checkpoint meta: {e}")))?;
        Self::from_parts(meta.config, meta.variant, params)
    }

    fn member_rows<'a>(&self, ex: &'a TrainingExample) -> Result<&'a [usize], ModelError> {
        let rows = &ex.series.global_rows;
        let n_p = self.n_promoters();
        if let Some(&r) = rows.iter().find(|&&r| r >= n_p) {
            return Err(ModelError::Shape(format!("promoter row {r} outside the {n_p}-row embedding table")));
        }
        Ok(rows)
    }

    fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ex: &TrainingExample,
        ctx: &GraphContext,
        sampling: &Sampling,
        cache: &mut GlobalCache,
    ) -> Result<Var, ModelError> {
        let rows = self.member_rows(ex)?;
        let promoters = bound.var("embed.promoter")?;
        let h = tape.gather_rows(promoters, rows)?;
        if !self.variant.gcn {
            return Ok(h);
        }
        let col =
            ctx.item_col(ex.item).ok_or_else(|| ModelError::Shape(format!("item {} has no column", ex.item.0)))?;
        let items = bound.var("embed.item")?;
        let r = tape.gather_rows(items, &[col])?;
        let n = ex.n();
        let days = ex.input_days();
        let sampled: Vec<Vec<Vec<u32>>> = days
            .iter()
            .enumerate()
            .map(|(k, day)| {
                let seed =
                    derive_seed(sampling.seed, &[STREAM_DESCENDANTS, ex.item.0 as u64, ex.start as u64, k as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|m| sample_descendants(day.descendants.get(m), self.cfg.descendant_samples, &mut rng))
                    .collect()
            })
            .collect();
        let local = local_encode(tape, &LocalVars::bind(bound)?, h, r, &sampled)?;
        let gv = GlobalVars::bind(bound)?;
        let keys = match cache.keys {
            Some(k) => k,
            None => *cache.keys.insert(global_keys(tape, &gv, promoters)?),
        };
        let mut daily = Vec::with_capacity(days.len());
        for d in days.iter().map(|d| d.day as usize) {
            if d >= ctx.n_days() {
                return Err(ModelError::Shape(format!("day {d} outside the incidence range")));
            }
            let v = match cache.days.get(&d) {
                Some(&v) => v,
                None => {
                    let v = global_day(tape, &gv, promoters, keys, items, ctx.hyperedges(d))?;
                    cache.days.insert(d, v);
                    v
                }
            };
            daily.push(v);
        }
        let global = global_encode(tape, &gv, &daily, rows)?;
        fuse(tape, local, global)
    }

    /// Builds the forward graph of one example on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ex: &TrainingExample,
        ctx: &GraphContext,
        sampling: &Sampling,
    ) -> Result<ForwardVars, ModelError> {
        self.forward_cached(tape, bound, ex, ctx, sampling, &mut GlobalCache::default())
    }

    /// [`Model::forward`] reusing the global-encoder days already on `tape`.
    pub fn forward_cached(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ex: &TrainingExample,
        ctx: &GraphContext,
        sampling: &Sampling,
        cache: &mut GlobalCache,
    ) -> Result<ForwardVars, ModelError> {
        if ex.window != self.cfg.window || ex.horizon != self.cfg.horizon {
            return Err(ModelError::Shape(format!(
                "example is T={} Δt={}, model is T={} Δt={}",
                ex.window, ex.horizon, self.cfg.window, self.cfg.horizon
            )));
        }
        let h_hat = self.encode(tape, bound, ex, ctx, sampling, cache)?;
        let tv = TemporalVars::bind(bound, &self.cfg)?;
        match self.variant.mode {
            Mode::P2P | Mode::S2S => {
                let input = if self.variant.mode == Mode::P2P { &ex.y_hist } else { &ex.x };
                let x = tape.constant(input.clone());
                let z = temporal_pre(tape, &tv, x, &self.cfg)?;
                let head = tape.matmul(h_hat, bound.var("head.w")?)?;
                let z = tape.add(z, head)?;
                let output = apply_link(tape, z, self.cfg.link);
                Ok(ForwardVars { output, x_hat: None, h_hat, steps: Vec::new() })
            }
            Mode::S2P => {
                let x = tape.constant(ex.x.clone());
                let z = temporal_pre(tape, &tv, x, &self.cfg)?;
                let x_hat = apply_link(tape, z, self.cfg.link);
                let h_t = tape.transpose(h_hat)?;
                let n = ex.n();
                let history = if self.cfg.structure_prior {
                    let reach: Vec<&DescendantSets> = ex.input_days().iter().map(|d| &d.descendants).collect();
                    let member: Vec<&[bool]> = ex.input_days().iter().map(|d| d.active.as_slice()).collect();
                    Some(History {
                        pairs: reachability_history(&reach, n)?.map(|f| tape.constant(f)),
                        rows: membership_history(&member, n)?.map(|f| tape.constant(f)),
                    })
                } else {
                    None
                };
                let mut steps = Vec::with_capacity(self.cfg.horizon);
                for t in 0..self.cfg.horizon {
                    let noise = sampling.noise.then(|| {
                        let seed =
                            derive_seed(sampling.seed, &[STREAM_NOISE, ex.item.0 as u64, ex.start as u64, t as u64]);
                        logistic_noise(&[n, n], &mut ChaCha8Rng::seed_from_u64(seed))
                    });
                    let dv = DecoderVars::bind(bound, t)?;
                    let coefficients =
                        decode_coefficients(tape, &dv, h_hat, h_t, noise.as_ref(), history.as_ref(), &self.cfg)?;
                    let filtered =
                        activation_filter(tape, coefficients.coefficients, coefficients.active, self.cfg.delta)?;
                    let col = tape.slice(x_hat, 1, t, 1)?;
                    let y_hat = synthesize(tape, filtered.coefficients, col)?;
                    steps.push(StepVars { coefficients, filtered, y_hat });
                }
                let cols: Vec<Var> = steps.iter().map(|s| s.y_hat).collect();
                let output = tape.concat(&cols, 1)?;
                Ok(ForwardVars { output, x_hat: Some(x_hat), h_hat, steps })
            }
        }
    }

    /// The mode's training objective for `fv`.
    pub fn loss(&self, tape: &mut Tape, fv: &ForwardVars, ex: &TrainingExample) -> Result<LossVars, ModelError> {
        match self.variant.mode {
            Mode::S2S => {
                let main = loss_main(tape, &ex.x_true, fv.output)?;
                loss_total(tape, main, None)
            }
            Mode::P2P => {
                let main = loss_main(tape, &ex.y, fv.output)?;
                loss_total(tape, main, None)
            }
            Mode::S2P => {
                let main = loss_main(tape, &ex.y, fv.output)?;
                let x_hat = fv.x_hat.ok_or_else(|| ModelError::Shape("two-stage pass without X̂".into()))?;
                let n = ex.n();
                let steps: Vec<AuxStep> = fv
                    .steps
                    .iter()
                    .enumerate()
                    .map(|(t, s)| {
                        let active = Tensor::new(vec![n, 1], ex.active.column(t))?;
                        let structure_pred = match self.cfg.structure_target {
                            StructureTarget::Gate => s.coefficients.gate_logits,
                            StructureTarget::Product => s.coefficients.coefficients,
                        };
                        Ok(AuxStep {
                            active,
                            active_logits: s.coefficients.active_logits,
                            structure: ex.s_true_dense(t),
                            structure_pred,
                        })
                    })
                    .collect::<Result<_, ModelError>>()?;
                let aux = loss_aux(tape, &ex.x_true, x_hat, &steps, &self.cfg)?;
                loss_total(tape, main, Some(aux))
            }
        }
    }

    /// Mean objective of `examples` on one tape, sharing the global encoder.
    /// Returns the mean total and each example's `(total, main)` values.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        examples: &[&TrainingExample],
        ctx: &GraphContext,
        sampling: &[Sampling],
    ) -> Result<(Var, Vec<(f64, f64)>), ModelError> {
        if examples.is_empty() || examples.len() != sampling.len() {
            return Err(ModelError::Shape(format!("{} examples with {} samplings", examples.len(), sampling.len())));
        }
        let mut cache = GlobalCache::default();
        let mut totals = Vec::with_capacity(examples.len());
        let mut values = Vec::with_capacity(examples.len());
        for (ex, s) in examples.iter().zip(sampling) {
            let fv = self.forward_cached(tape, bound, ex, ctx, s, &mut cache)?;
            let loss = self.loss(tape, &fv, ex)?;
            values.push((tape.value(loss.total).data()[0], tape.value(loss.main).data()[0]));
            totals.push(loss.total);
        }
        let stacked = tape.concat(&totals, 0)?;
        let sum = tape.sum_all(stacked);
        Ok((tape.scale(sum, 1.0 / examples.len() as f64), values))
    }

    /// Evaluation pass with fixed descendant samples and expected gates.
    pub fn predict(&self, ex: &TrainingExample, ctx: &GraphContext) -> Result<Prediction, ModelError> {
        Ok(self.predict_batch(&[ex], ctx)?.remove(0))
    }

    /// [`Model::predict`] for several examples on one shared tape.
    pub fn predict_batch(
        &self,
        examples: &[&TrainingExample],
        ctx: &GraphContext,
    ) -> Result<Vec<Prediction>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.attach(&mut tape);
        let mut cache = GlobalCache::default();
        examples
            .iter()
            .map(|ex| {
                let fv = self.forward_cached(&mut tape, &bound, ex, ctx, &Sampling::eval(), &mut cache)?;
                Ok(Prediction {
                    output: tape.value(fv.output).clone(),
                    x_hat: fv.x_hat.map(|v| tape.value(v).clone()),
                    kept: fv.steps.iter().map(|s| s.filtered.kept.clone()).collect(),
                    filtered: fv.steps.iter().map(|s| tape.value(s.filtered.coefficients).clone()).collect(),
                })
            })
            .collect()
    }
}
