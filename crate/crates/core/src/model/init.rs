use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::layers::{AttentionVars, GruVars};
use crate::autodiff::{ParamStore, Tensor};

use super::{Mode, ModelConfig, ModelError, Variant};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Uniform(f64),
    Const(f64),
}

fn glorot(fan_in: usize, fan_out: usize) -> Init {
    Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
}

const PRIOR_GATE: f64 = 3.0;
const PRIOR_ACTIVE: f64 = 2.0;

/// Every parameter of the variant with its shape and initializer.
fn layout(cfg: &ModelConfig, variant: Variant, n_promoters: usize, n_items: usize) -> Vec<(String, Vec<usize>, Init)> {
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let (dm, dr, h, a) = (cfg.d_m, cfg.d_r, cfg.gru_hidden, cfg.attention_hidden);

    let c = cfg.temporal_channels;
    for &k in &cfg.kernel_sizes {
        for branch in ["f", "g"] {
            push(format!("temporal.{branch}{k}.w"), vec![c, 1, k], Init::Uniform(1.0 / (k as f64).sqrt()));
            push(format!("temporal.{branch}{k}.b"), vec![c], Init::Uniform(1.0 / (k as f64).sqrt()));
        }
    }
    let mut width = c * cfg.kernel_sizes.len();
    for (j, &next) in cfg.mix_channels.iter().enumerate() {
        push(format!("temporal.mix{j}.w"), vec![next, width, 1], glorot(width, next));
        push(format!("temporal.mix{j}.b"), vec![next], Init::Uniform(1.0 / (width as f64).sqrt()));
        width = next;
    }
    push("temporal.out.w".into(), vec![1, width, 1], glorot(width, 1));
    push("temporal.out.b".into(), vec![1], Init::Const(0.0));
    push("temporal.time.w".into(), vec![cfg.window, cfg.horizon], glorot(cfg.window, cfg.horizon));
    push("temporal.time.b".into(), vec![1, cfg.horizon], Init::Const(0.0));

    push("embed.promoter".into(), vec![n_promoters, dm], Init::Uniform(0.5));
    if variant.gcn {
        push("embed.item".into(), vec![n_items, dr], Init::Uniform(0.1));
        for site in ["local", "global"] {
            push(format!("{site}.w1"), vec![dr, dr], glorot(dr, dr));
            push(format!("{site}.w2"), vec![dm + dr, dm], glorot(dm + dr, dm));
            let query = if site == "local" { dm } else { dr };
            for (name, shape) in AttentionVars::shapes(&format!("{site}.att"), query, dm, a) {
                let init = glorot(shape[0], shape[1]);
                push(name, shape, init);
            }
            for (name, shape) in GruVars::shapes(&format!("{site}.gru"), dm, h) {
                let init = if name.contains(".b_") { Init::Const(0.0) } else { Init::Uniform(1.0 / (h as f64).sqrt()) };
                push(name, shape, init);
            }
        }
    }

    let w = cfg.fused_width(variant.gcn);
    match variant.mode {
        Mode::S2P => {
            for t in 0..cfg.horizon {
                // With the history prior the bilinear terms start silent and only
                // learn what the window statistics miss.
                let bilinear = if cfg.structure_prior { Init::Const(0.0) } else { Init::Uniform(1.0 / w as f64) };
                push(format!("decoder.gate{t}.w"), vec![w, w], bilinear);
                push(format!("decoder.gate{t}.b"), vec![1, 1], Init::Const(cfg.gate_bias_init));
                push(format!("decoder.ratio{t}.w"), vec![w, w], bilinear);
                push(format!("decoder.ratio{t}.b"), vec![1, 1], Init::Const(0.0));
                push(format!("decoder.active{t}.w"), vec![w, 1], glorot(w, 1));
                // The prior starts close to "last day's reachability, current members".
                let active_b = if cfg.structure_prior { -PRIOR_ACTIVE } else { 0.0 };
                push(format!("decoder.active{t}.b"), vec![1, 1], Init::Const(active_b));
                if cfg.structure_prior {
                    for (head, v) in [("gate", PRIOR_GATE), ("ratio", 0.0), ("active", PRIOR_ACTIVE)] {
                        push(format!("decoder.{head}{t}.hist"), vec![1, 1], Init::Const(v));
                        push(format!("decoder.{head}{t}.last"), vec![1, 1], Init::Const(v));
                    }
                }
            }
        }
        Mode::P2P | Mode::S2S => push("head.w".into(), vec![w, cfg.horizon], Init::Uniform(1.0 / (w as f64).sqrt())),
    }
    out
}

/// Names and shapes of every parameter of the variant.
pub fn param_shapes(
    cfg: &ModelConfig,
    variant: Variant,
    n_promoters: usize,
    n_items: usize,
) -> Vec<(String, Vec<usize>)> {
    layout(cfg, variant, n_promoters, n_items).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Freshly initialized parameters, reproducible from `cfg.init_seed`.
pub fn init_params(
    cfg: &ModelConfig,
    variant: Variant,
    n_promoters: usize,
    n_items: usize,
) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    if n_promoters == 0 {
        return Err(ModelError::Config("the dataset has no promoters".into()));
    }
    let mut entries = layout(cfg, variant, n_promoters, n_items);
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in entries {
        let t = match init {
            Init::Uniform(b) => Tensor::uniform(&shape, b, &mut rng),
            Init::Const(v) => Tensor::full(&shape, v),
        };
        store.insert(name, t);
    }
    Ok(store)
}
