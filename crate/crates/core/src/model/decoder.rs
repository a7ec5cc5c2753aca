use crate::autodiff::{Bound, Tape, Tensor, Var};
use crate::datapipe::DescendantSets;

use super::{ModelConfig, ModelError};

/// Decoder parameters for one horizon step.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub gate_w: Var,
    pub gate_b: Var,
    pub ratio_w: Var,
    pub ratio_b: Var,
    pub active_w: Var,
    pub active_b: Var,
    /// Weights of the window history on the gate, ratio and activation logits.
    pub gate_prior: Option<[Var; 2]>,
    pub ratio_prior: Option<[Var; 2]>,
    pub active_prior: Option<[Var; 2]>,
}

impl DecoderVars {
    pub fn bind(bound: &Bound, step: usize) -> Result<Self, ModelError> {
        let v = |p: &str| bound.var(&format!("decoder.{p}"));
        Ok(Self {
            gate_w: v(&format!("gate{step}.w"))?,
            gate_b: v(&format!("gate{step}.b"))?,
            ratio_w: v(&format!("ratio{step}.w"))?,
            ratio_b: v(&format!("ratio{step}.b"))?,
            active_w: v(&format!("active{step}.w"))?,
            active_b: v(&format!("active{step}.b"))?,
            gate_prior: prior(bound, &format!("decoder.gate{step}"))?,
            ratio_prior: prior(bound, &format!("decoder.ratio{step}"))?,
            active_prior: prior(bound, &format!("decoder.active{step}"))?,
        })
    }
}

fn prior(bound: &Bound, head: &str) -> Result<Option<[Var; 2]>, ModelError> {
    if !bound.has(&format!("{head}.hist")) {
        return Ok(None);
    }
    Ok(Some([bound.var(&format!("{head}.hist"))?, bound.var(&format!("{head}.last"))?]))
}

/// Pairwise reachability over the input window: the share of days with
/// `d ∈ D(m)` and the indicator for the last day, both `n × n`.
pub fn reachability_history(days: &[&DescendantSets], n: usize) -> Result<[Tensor; 2], ModelError> {
    let mut share = Tensor::zeros(&[n, n]);
    let mut last = Tensor::zeros(&[n, n]);
    let w = 1.0 / days.len().max(1) as f64;
    for (k, d) in days.iter().enumerate() {
        for (m, c) in d.pairs() {
            let (m, c) = (m as usize, c as usize);
            if m >= n || c >= n {
                return Err(ModelError::Shape(format!("pair ({m}, {c}) outside {n} promoters")));
            }
            share.set(m, c, share.get(m, c) + w);
            if k + 1 == days.len() {
                last.set(m, c, 1.0);
            }
        }
    }
    Ok([share, last])
}

/// Network membership over the input window: the share of days each promoter
/// was in the snapshot and the indicator for the last day, both `n × 1`.
pub fn membership_history(days: &[&[bool]], n: usize) -> Result<[Tensor; 2], ModelError> {
    let mut share = Tensor::zeros(&[n, 1]);
    let mut last = Tensor::zeros(&[n, 1]);
    let w = 1.0 / days.len().max(1) as f64;
    for (k, day) in days.iter().enumerate() {
        if day.len() != n {
            return Err(ModelError::Shape(format!("membership of {} promoters, expected {n}", day.len())));
        }
        for (m, _) in day.iter().enumerate().filter(|(_, &a)| a) {
            share.set(m, 0, share.get(m, 0) + w);
            if k + 1 == days.len() {
                last.set(m, 0, 1.0);
            }
        }
    }
    Ok([share, last])
}

/// Window features the decoder heads read when they carry history weights.
#[derive(Clone, Copy, Debug)]
pub struct History {
    /// [`reachability_history`], `n × n`.
    pub pairs: [Var; 2],
    /// [`membership_history`], `n × 1`.
    pub rows: [Var; 2],
}

fn add_prior(
    tape: &mut Tape,
    mut s: Var,
    weights: Option<[Var; 2]>,
    features: Option<&[Var; 2]>,
) -> Result<Var, ModelError> {
    if let (Some(weights), Some(features)) = (weights, features) {
        for (w, f) in weights.iter().zip(features) {
            let term = tape.mul(*f, *w)?;
            s = tape.add(s, term)?;
        }
    }
    Ok(s)
}

/// Decoded coefficients for one horizon step.
#[derive(Clone, Copy, Debug)]
pub struct Coefficients {
    /// `Ĥ W₃ Ĥᵀ + b₃`, `n × n`.
    pub gate_logits: Var,
    /// Binary (straight-through) or relaxed gate `S^g`.
    pub gate: Var,
    /// `S^f = σ(Ĥ W₄ Ĥᵀ + b₄)`.
    pub ratio: Var,
    /// `Ŝ = S^g ⊙ S^f`, diagonal zeroed when configured.
    pub coefficients: Var,
    /// `Ĥ w + b`, `n × 1`.
    pub active_logits: Var,
    /// `l̂ = σ(active_logits)`.
    pub active: Var,
}

/// `Ŝ` and `l̂` from the fused embeddings `h` (`n × w`) and its transpose.
/// `noise` is the logistic noise of the Gumbel gate. Without it the gate takes
/// its expectation over the noise, `σ(logits / τ)`. `history` holds the
/// window features as constants when the heads use them.
pub fn decode_coefficients(
    tape: &mut Tape,
    dv: &DecoderVars,
    h: Var,
    h_t: Var,
    noise: Option<&Tensor>,
    history: Option<&History>,
    cfg: &ModelConfig,
) -> Result<Coefficients, ModelError> {
    let n = tape.value(h).rows();
    let pairs = history.map(|h| &h.pairs);
    let bilinear = |tape: &mut Tape, w: Var, b: Var, prior: Option<[Var; 2]>| -> Result<Var, ModelError> {
        let p = tape.matmul(h, w)?;
        let s = tape.matmul(p, h_t)?;
        let s = add_prior(tape, s, prior, pairs)?;
        Ok(tape.add(s, b)?)
    };
    let gate_logits = bilinear(tape, dv.gate_w, dv.gate_b, dv.gate_prior)?;
    let gate = match noise {
        Some(noise) => tape.gumbel_binary(gate_logits, noise, cfg.tau, cfg.hard_gumbel)?,
        None => {
            let z = tape.scale(gate_logits, 1.0 / cfg.tau);
            tape.sigmoid(z)
        }
    };
    let ratio_logits = bilinear(tape, dv.ratio_w, dv.ratio_b, dv.ratio_prior)?;
    let ratio = tape.sigmoid(ratio_logits);
    let mut coefficients = tape.mul(gate, ratio)?;
    if cfg.mask_diagonal {
        let mut off = Tensor::full(&[n, n], 1.0);
        for i in 0..n {
            off.set(i, i, 0.0);
        }
        let off = tape.constant(off);
        coefficients = tape.mul(coefficients, off)?;
    }
    let a = tape.matmul(h, dv.active_w)?;
    let a = add_prior(tape, a, dv.active_prior, history.map(|h| &h.rows))?;
    let active_logits = tape.add(a, dv.active_b)?;
    let active = tape.sigmoid(active_logits);
    Ok(Coefficients { gate_logits, gate, ratio, coefficients, active_logits, active })
}

/// `Ŝ` with rows of predicted-inactive promoters removed.
#[derive(Clone, Debug)]
pub struct Filtered {
    /// `Ŝ ⊙ (l̂ ⊙ 1[l̂ ≥ δ])`, row-broadcast.
    pub coefficients: Var,
    /// `1[l̂_m ≥ δ]`.
    pub kept: Vec<bool>,
}

/// Scales row `m` of `Ŝ` by `l̂_m` when `l̂_m ≥ δ` and zeroes it otherwise. The
/// threshold mask is a constant, so no gradient flows through it.
pub fn activation_filter(tape: &mut Tape, coefficients: Var, active: Var, delta: f64) -> Result<Filtered, ModelError> {
    let l = tape.value(active);
    if l.cols() != 1 || l.rows() != tape.value(coefficients).rows() {
        return Err(ModelError::Shape(format!(
            "activation {:?} does not match coefficients {:?}",
            l.shape(),
            tape.value(coefficients).shape()
        )));
    }
    let kept: Vec<bool> = l.data().iter().map(|&p| p >= delta).collect();
    let mask = Tensor::new(vec![kept.len(), 1], kept.iter().map(|&k| k as u8 as f64).collect())?;
    let mask = tape.constant(mask);
    let scale = tape.mul(active, mask)?;
    Ok(Filtered { coefficients: tape.mul(coefficients, scale)?, kept })
}

/// `ŷ_t = Ŝ_f · X̂[:, t]`, an `n × 1` column.
pub fn synthesize(tape: &mut Tape, filtered: Var, x_col: Var) -> Result<Var, ModelError> {
    Ok(tape.matmul(filtered, x_col)?)
}

/// Reference `ŷ = S · x` on plain values.
pub fn synthesize_dense(s: &Tensor, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    if s.rank() != 2 || s.cols() != x.len() {
        return Err(ModelError::Shape(format!("{:?} cannot multiply a vector of {}", s.shape(), x.len())));
    }
    Ok((0..s.rows()).map(|r| s.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect())
}
