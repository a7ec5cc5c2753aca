//! The two-stage forecaster: a gated temporal convolution predicts self-sales,
//! local and global graph encoders embed promoters, and a coefficient decoder
//! turns both into propagation scale.

mod context;
mod decoder;
mod forward;
mod init;
pub mod losses;
mod spatial;
mod temporal;

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;

pub use context::GraphContext;
pub use decoder::{
    activation_filter, decode_coefficients, membership_history, reachability_history, synthesize, synthesize_dense,
    Coefficients, DecoderVars, Filtered, History,
};
pub use forward::{ForwardVars, GlobalCache, Model, Prediction, Sampling, StepVars};
pub use init::{init_params, param_shapes};
pub use losses::{focal_scalar, loss_aux, loss_main, loss_total, mape, msle, AuxStep, LossVars};
pub use spatial::{
    fuse, global_day, global_encode, global_keys, hyperedge_aggregate, local_conv_step, local_encode,
    promoter_aggregate, DayHyperedges, GlobalVars, LocalVars,
};
pub use temporal::{temporal_forward, temporal_pre, TemporalVars};

/// What the network reads and predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Propagation-scale history in, propagation scale out, through a regression head.
    #[serde(rename = "p2p")]
    P2P,
    /// Self-sales in, self-sales out.
    #[serde(rename = "s2s")]
    S2S,
    /// Self-sales in, propagation scale out through the coefficient decoder.
    #[serde(rename = "s2p")]
    S2P,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::P2P, Mode::S2S, Mode::S2P];

    pub fn name(self) -> &'static str {
        match self {
            Mode::P2P => "p2p",
            Mode::S2S => "s2s",
            Mode::S2P => "s2p",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "p2p" => Ok(Mode::P2P),
            "s2s" => Ok(Mode::S2S),
            "s2p" => Ok(Mode::S2P),
            _ => Err(ModelError::Config(format!("unknown mode `{s}` (expected p2p, s2s or s2p)"))),
        }
    }
}

/// Architecture switch pair fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub mode: Mode,
    /// Without it, the fused representation is the base promoter embedding.
    pub gcn: bool,
}

/// Map from the pre-activation `z` to a non-negative sales value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// `softplus(z)`.
    Softplus,
    /// `expm1(softplus(z))`, so that `log1p` of the output is `softplus(z)`.
    LogSoftplus,
}

/// Which matrix the structural focal term supervises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureTarget {
    /// The gate probabilities `σ(Ĥ W₃ Ĥᵀ)`.
    Gate,
    /// The coefficient matrix `S^g ⊙ S^f`.
    Product,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Promoter embedding width `d_m`.
    pub d_m: usize,
    /// Item embedding width `d_r`.
    pub d_r: usize,
    pub kernel_sizes: Vec<usize>,
    /// Channels per kernel in each inception branch.
    pub temporal_channels: usize,
    /// Hidden widths of the 1×1 convolution stack; a final 1-channel layer follows.
    pub mix_channels: Vec<usize>,
    pub gru_hidden: usize,
    pub attention_hidden: usize,
    /// Activation threshold `δ`.
    pub delta: f64,
    /// Gumbel temperature `τ`.
    pub tau: f64,
    pub hard_gumbel: bool,
    /// Descendants sampled per promoter and day.
    pub descendant_samples: usize,
    /// Input days `T`.
    pub window: usize,
    /// Forecast days `Δt`.
    pub horizon: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub link: Link,
    /// Feed `log1p` of the sales signal to the temporal convolution.
    pub log_inputs: bool,
    pub structure_target: StructureTarget,
    /// Keep `Ŝ[m, m]` at zero; snapshots are acyclic.
    pub mask_diagonal: bool,
    /// Initial bias of the gate logits.
    pub gate_bias_init: f64,
    /// Add learned multiples of the window's pairwise reachability to the gate
    /// and ratio logits and of the window's membership to the activation logits.
    pub structure_prior: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_m: 8,
            d_r: 8,
            kernel_sizes: vec![2, 3],
            temporal_channels: 4,
            mix_channels: vec![8],
            gru_hidden: 8,
            attention_hidden: 8,
            delta: 0.5,
            tau: 1.0,
            hard_gumbel: true,
            descendant_samples: 20,
            window: 7,
            horizon: 1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            link: Link::LogSoftplus,
            log_inputs: true,
            structure_target: StructureTarget::Gate,
            mask_diagonal: true,
            gate_bias_init: -3.0,
            structure_prior: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let dims = [
            ("d_m", self.d_m),
            ("d_r", self.d_r),
            ("temporal_channels", self.temporal_channels),
            ("gru_hidden", self.gru_hidden),
            ("attention_hidden", self.attention_hidden),
            ("descendant_samples", self.descendant_samples),
            ("window", self.window),
            ("horizon", self.horizon),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return bad("kernel_sizes must be a non-empty set of positive sizes".into());
        }
        if self.mix_channels.contains(&0) {
            return bad("mix_channels must be positive".into());
        }
        if let Some(&k) = self.kernel_sizes.iter().max().filter(|&&k| k > self.window) {
            return bad(format!("kernel size {k} exceeds window {}", self.window));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta {} must lie in (0, 1)", self.delta));
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive".into());
        }
        if !(self.focal_alpha > 0.0 && self.focal_gamma >= 0.0) {
            return bad("focal alpha must be positive and gamma non-negative".into());
        }
        Ok(())
    }

    /// Width of the fused representation `Ĥ`.
    pub fn fused_width(&self, gcn: bool) -> usize {
        if gcn {
            2 * self.gru_hidden
        } else {
            self.d_m
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
    #[error("{op}: negative input")]
    Negative { op: &'static str },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}
