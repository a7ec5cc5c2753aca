use crate::autodiff::layers::{conv1d_bank, ConvKernel, Padding};
use crate::autodiff::{Bound, Tape, Var};

use super::{Link, ModelConfig, ModelError};

/// Gated inception convolution parameters.
#[derive(Clone, Debug)]
pub struct TemporalVars {
    filter: Vec<ConvKernel>,
    gate: Vec<ConvKernel>,
    mix: Vec<ConvKernel>,
    out: ConvKernel,
    time_w: Var,
    time_b: Var,
}

impl TemporalVars {
    pub fn bind(bound: &Bound, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let kernel = |name: &str| -> Result<ConvKernel, ModelError> {
            Ok(ConvKernel { weight: bound.var(&format!("{name}.w"))?, bias: bound.var(&format!("{name}.b"))? })
        };
        let branch = |b: &str| -> Result<Vec<ConvKernel>, ModelError> {
            cfg.kernel_sizes.iter().map(|k| kernel(&format!("temporal.{b}{k}"))).collect()
        };
        Ok(Self {
            filter: branch("f")?,
            gate: branch("g")?,
            mix: (0..cfg.mix_channels.len()).map(|j| kernel(&format!("temporal.mix{j}"))).collect::<Result<_, _>>()?,
            out: kernel("temporal.out")?,
            time_w: bound.var("temporal.time.w")?,
            time_b: bound.var("temporal.time.b")?,
        })
    }
}

/// Pre-activation `z` (`n × Δt`) of the gated convolution over an `n × T` signal:
/// `Relu(tanh(bank_f(x)) ⊙ σ(bank_g(x)))`, a 1×1 convolution stack, then a
/// linear map from `T` steps to `Δt`.
pub fn temporal_pre(tape: &mut Tape, tv: &TemporalVars, signal: Var, cfg: &ModelConfig) -> Result<Var, ModelError> {
    let shape = tape.value(signal).shape().to_vec();
    if shape.len() != 2 {
        return Err(ModelError::Shape(format!("temporal input must be n×T, got {shape:?}")));
    }
    let (n, t) = (shape[0], shape[1]);
    let kmax = cfg.kernel_sizes.iter().copied().max().unwrap_or(0);
    if t < kmax || t != cfg.window {
        return Err(ModelError::Shape(format!(
            "window {t} does not fit kernels up to {kmax} and configured T {}",
            cfg.window
        )));
    }
    if tape.value(signal).data().iter().any(|&v| v < 0.0) {
        return Err(ModelError::Negative { op: "temporal_forward" });
    }
    let x = if cfg.log_inputs { tape.log1p(signal)? } else { signal };
    let x = tape.reshape(x, &[n, 1, t])?;
    let f = conv1d_bank(tape, x, &tv.filter, Padding::Causal)?;
    let f = tape.tanh(f);
    let g = conv1d_bank(tape, x, &tv.gate, Padding::Causal)?;
    let g = tape.sigmoid(g);
    let fg = tape.mul(f, g)?;
    let mut h = tape.relu(fg);
    for k in &tv.mix {
        let c = tape.conv1d(h, k.weight, k.bias, 0)?;
        h = tape.relu(c);
    }
    let o = tape.conv1d(h, tv.out.weight, tv.out.bias, 0)?;
    let o = tape.reshape(o, &[n, t])?;
    let z = tape.matmul(o, tv.time_w)?;
    Ok(tape.add(z, tv.time_b)?)
}

pub(crate) fn apply_link(tape: &mut Tape, z: Var, link: Link) -> Var {
    let s = tape.softplus(z);
    match link {
        Link::Softplus => s,
        Link::LogSoftplus => tape.expm1(s),
    }
}

/// Predicted self-sales `X̂` (`n × Δt`), non-negative through the link.
pub fn temporal_forward(tape: &mut Tape, tv: &TemporalVars, x: Var, cfg: &ModelConfig) -> Result<Var, ModelError> {
    let z = temporal_pre(tape, tv, x, cfg)?;
    Ok(apply_link(tape, z, cfg.link))
}
