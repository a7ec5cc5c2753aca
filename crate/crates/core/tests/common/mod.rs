//! Fixtures shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use propscale::autodiff::gradcheck::{grad_check, GradCheckReport};
use propscale::autodiff::layers::{
    attention_aggregate, conv1d_bank, gru_sequence, AttentionVars, ConvKernel, GruVars, Padding,
};
use propscale::autodiff::{AutodiffError, Bound, Csr, Segments, Tape, Tensor, Var};
use propscale::datapipe::{Dataset, DatasetConfig, TrainingExample};
use propscale::model::{GraphContext, Link, Mode, Model, ModelConfig, Sampling, StructureTarget, Variant};
use propscale::simkit::{generate_orders, generate_trace, SimConfig};

pub const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-5;

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    t
}

/// Values bounded away from zero so kinks stay outside the difference stencil.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = rand_tensor(shape, 0.2, 1.5, seed);
    t.data_mut().iter_mut().skip(1).step_by(2).for_each(|v| *v = -*v);
    t
}

/// Contracts `out` with a fixed random tensor so every output entry matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, AutodiffError> {
    let w = rand_tensor(tape.value(out).shape(), -1.0, 1.0, seed ^ 0x5eed);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum_all(p))
}

type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Case)> {
    let r = |shape: &[usize], seed| rand_tensor(shape, -1.0, 1.0, seed);
    let pos = |shape: &[usize], seed| rand_tensor(shape, 0.1, 2.0, seed);
    let seg = Rc::new(Segments::new(vec![0, 0, 1, 2, 2, 2], 4).unwrap());
    let csr = Rc::new(Csr::from_triplets(3, 4, &[(0, 1, 0.5), (0, 3, -1.0), (2, 0, 2.0), (2, 2, 0.25)]).unwrap());
    let mask = Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]]).unwrap();
    let targets = Tensor::from_rows(&[vec![1.0, 0.0, 0.3], vec![0.0, 1.0, 0.7]]).unwrap();
    let noise = r(&[2, 3], 91);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Case)> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {
            cases.push(($name, $inputs, Box::new($f)))
        };
    }
    case!("matmul", vec![r(&[3, 4], 1), r(&[4, 2], 2)], |t, v| {
        let o = t.matmul(v[0], v[1])?;
        project(t, o, 1)
    });
    case!("matmul_row", vec![r(&[1, 5], 3), r(&[5, 3], 4)], |t, v| {
        let o = t.matmul(v[0], v[1])?;
        project(t, o, 2)
    });
    case!("transpose", vec![r(&[2, 3], 5)], |t, v| {
        let o = t.transpose(v[0])?;
        project(t, o, 3)
    });
    case!("add_broadcast", vec![r(&[3, 4], 6), r(&[1, 4], 7)], |t, v| {
        let o = t.add(v[0], v[1])?;
        project(t, o, 4)
    });
    case!("sub_broadcast", vec![r(&[3, 4], 8), r(&[3, 1], 9)], |t, v| {
        let o = t.sub(v[0], v[1])?;
        project(t, o, 5)
    });
    case!("mul_broadcast", vec![r(&[2, 3, 4], 10), r(&[1, 3, 1], 11)], |t, v| {
        let o = t.mul(v[0], v[1])?;
        project(t, o, 6)
    });
    case!("scale_shift", vec![r(&[2, 2], 12)], |t, v| {
        let s = t.scale(v[0], -2.5);
        let o = t.add_scalar(s, 0.7);
        project(t, o, 7)
    });
    case!("tanh", vec![r(&[3, 3], 13)], |t, v| {
        let o = t.tanh(v[0]);
        project(t, o, 8)
    });
    case!("sigmoid", vec![r(&[3, 3], 14)], |t, v| {
        let o = t.sigmoid(v[0]);
        project(t, o, 9)
    });
    case!("relu", vec![off_zero(&[3, 3], 15)], |t, v| {
        let o = t.relu(v[0]);
        project(t, o, 10)
    });
    case!("softplus", vec![r(&[3, 3], 16)], |t, v| {
        let o = t.softplus(v[0]);
        project(t, o, 11)
    });
    case!("log1p", vec![pos(&[2, 3], 17)], |t, v| {
        let o = t.log1p(v[0])?;
        project(t, o, 12)
    });
    case!("expm1", vec![r(&[2, 3], 18)], |t, v| {
        let o = t.expm1(v[0]);
        project(t, o, 13)
    });
    case!("square", vec![r(&[2, 3], 19)], |t, v| {
        let o = t.square(v[0]);
        project(t, o, 14)
    });
    case!("softmax_rows", vec![r(&[3, 4], 20)], |t, v| {
        let o = t.softmax(v[0], 1)?;
        project(t, o, 15)
    });
    case!("softmax_cols", vec![r(&[3, 4], 21)], |t, v| {
        let o = t.softmax(v[0], 0)?;
        project(t, o, 16)
    });
    let m = mask.clone();
    case!("masked_softmax", vec![r(&[3, 3], 22)], move |t, v| {
        let o = t.masked_softmax(v[0], &m)?;
        project(t, o, 17)
    });
    let m = mask.clone();
    case!("masked_sum_mean", vec![r(&[3, 3], 23)], move |t, v| {
        let s = t.masked_sum(v[0], &m)?;
        let sq = t.square(v[0]);
        let mm = t.masked_mean(sq, &m)?;
        let o = t.add(s, mm)?;
        project(t, o, 18)
    });
    case!("sum_mean", vec![r(&[3, 4], 24)], |t, v| {
        let sq = t.square(v[0]);
        let a = t.sum_all(sq);
        let b = t.mean_all(v[0])?;
        let o = t.mul(a, b)?;
        project(t, o, 19)
    });
    case!("sum_axis", vec![r(&[2, 3, 4], 25)], |t, v| {
        let a = t.sum_axis(v[0], 1)?;
        project(t, a, 20)
    });
    case!("slice_concat", vec![r(&[3, 5], 26), r(&[3, 2], 27)], |t, v| {
        let a = t.slice(v[0], 1, 1, 3)?;
        let b = t.slice(v[0], 0, 0, 3)?;
        let b = t.slice(b, 1, 4, 1)?;
        let o = t.concat(&[a, v[1], b], 1)?;
        project(t, o, 21)
    });
    case!("concat_rows_reshape", vec![r(&[2, 3], 28), r(&[1, 3], 29)], |t, v| {
        let c = t.concat(&[v[0], v[1]], 0)?;
        let o = t.reshape(c, &[1, 9])?;
        project(t, o, 22)
    });
    case!("gather_rows", vec![r(&[4, 3], 30)], |t, v| {
        let o = t.gather_rows(v[0], &[3, 0, 3, 1, 1])?;
        project(t, o, 23)
    });
    let s = Rc::clone(&seg);
    case!("segment_softmax", vec![r(&[6, 1], 31)], move |t, v| {
        let o = t.segment_softmax(v[0], &s)?;
        project(t, o, 24)
    });
    let s = Rc::clone(&seg);
    case!("segment_weighted_sum", vec![r(&[6, 1], 32), r(&[6, 3], 33)], move |t, v| {
        let o = t.segment_weighted_sum(v[0], v[1], &s)?;
        project(t, o, 25)
    });
    let c = Rc::clone(&csr);
    case!("sparse_matmul", vec![r(&[4, 2], 34)], move |t, v| {
        let o = t.sparse_matmul(&c, v[0])?;
        project(t, o, 26)
    });
    case!("conv1d_causal", vec![r(&[2, 3, 6], 35), r(&[4, 3, 3], 36), r(&[4], 37)], |t, v| {
        let o = t.conv1d(v[0], v[1], v[2], 2)?;
        project(t, o, 27)
    });
    case!("conv1d_same", vec![r(&[1, 2, 5], 38), r(&[2, 2, 3], 39), r(&[2], 40)], |t, v| {
        let o = t.conv1d(v[0], v[1], v[2], 1)?;
        project(t, o, 28)
    });
    let n = noise.clone();
    case!("gumbel_soft", vec![r(&[2, 3], 41)], move |t, v| {
        let o = t.gumbel_binary(v[0], &n, 0.7, false)?;
        project(t, o, 29)
    });
    let y = targets.clone();
    case!("focal_logits", vec![rand_tensor(&[2, 3], -2.0, 2.0, 42)], move |t, v| t.focal_logits(v[0], &y, 0.25, 2.0));
    let y = targets.clone();
    case!("focal_logits_fractional_gamma", vec![rand_tensor(&[2, 3], -2.0, 2.0, 43)], move |t, v| {
        t.focal_logits(v[0], &y, 0.5, 1.5)
    });
    let y = targets.clone();
    case!("focal_probs", vec![rand_tensor(&[2, 3], 0.05, 0.95, 44)], move |t, v| {
        t.focal_probs(v[0], &y, 0.25, 2.0, 1e-9)
    });
    let y = targets;
    case!("focal_probs_gamma_zero", vec![rand_tensor(&[2, 3], 0.05, 0.95, 45)], move |t, v| {
        t.focal_probs(v[0], &y, 0.75, 0.0, 1e-9)
    });
    cases
}

fn layer_cases() -> Vec<(&'static str, Vec<Tensor>, Case)> {
    let r = |shape: &[usize], seed| rand_tensor(shape, -0.8, 0.8, seed);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Case)> = Vec::new();

    let gru = GruVars::shapes("gru", 3, 2);
    let mut inputs: Vec<Tensor> = gru.iter().enumerate().map(|(i, (_, s))| r(s, 100 + i as u64)).collect();
    inputs.push(r(&[4, 2], 120));
    inputs.extend((0..3).map(|i| r(&[4, 3], 121 + i)));
    let names: Vec<String> = gru.iter().map(|(n, _)| n.clone()).collect();
    cases.push((
        "gru_sequence",
        inputs,
        Box::new(move |t, v| {
            let k = names.len();
            let bound = Bound::from_vars(names.iter().cloned().zip(v[..k].iter().copied()));
            let p = GruVars::bind(&bound, "gru")?;
            let h = gru_sequence(t, &p, v[k], &v[k + 1..])?;
            project(t, h, 30)
        }),
    ));

    let att = AttentionVars::shapes("att", 3, 2, 4);
    let mut inputs: Vec<Tensor> = att.iter().enumerate().map(|(i, (_, s))| r(s, 130 + i as u64)).collect();
    inputs.extend([r(&[3, 3], 140), r(&[5, 2], 141), r(&[5, 2], 142)]);
    let names: Vec<String> = att.iter().map(|(n, _)| n.clone()).collect();
    let seg = Rc::new(Segments::new(vec![0, 2, 2, 0, 2], 3).unwrap());
    cases.push((
        "attention_aggregate",
        inputs,
        Box::new(move |t, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v[..3].iter().copied()));
            let a = AttentionVars::bind(&bound, "att")?;
            let out = attention_aggregate(t, &a, v[3], v[4], v[5], &seg)?;
            let o = project(t, out.output, 31)?;
            let w = project(t, out.weights, 32)?;
            t.add(o, w)
        }),
    ));

    cases.push((
        "conv1d_bank",
        vec![r(&[2, 2, 5], 150), r(&[3, 2, 2], 151), r(&[3], 152), r(&[2, 2, 4], 153), r(&[2], 154)],
        Box::new(|t, v| {
            let ks = [ConvKernel { weight: v[1], bias: v[2] }, ConvKernel { weight: v[3], bias: v[4] }];
            let o = conv1d_bank(t, v[0], &ks, Padding::Causal)?;
            let o = t.tanh(o);
            project(t, o, 33)
        }),
    ));
    cases
}

/// Small benchmark used by model-level checks and quick end-to-end tests.
pub fn tiny_dataset() -> Dataset {
    let sim = SimConfig {
        n_items: 4,
        n_days: 6,
        promoter_pool: 14,
        promoters_per_item_range: (5, 6),
        edge_budget: 5,
        base_activity: 0.6,
        order_rate: 1.2,
        ..SimConfig::default()
    };
    let trace = generate_trace(&sim).unwrap();
    let orders = generate_orders(&trace, &sim);
    let cfg = DatasetConfig { window: 3, horizon: 2, ratios: [0.5, 0.25, 0.25], ..DatasetConfig::default() };
    Dataset::build(trace, orders, &cfg).unwrap()
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_m: 3,
        d_r: 2,
        kernel_sizes: vec![2],
        temporal_channels: 2,
        mix_channels: vec![],
        gru_hidden: 2,
        attention_hidden: 2,
        window: 3,
        horizon: 2,
        descendant_samples: 2,
        hard_gumbel: false,
        delta: 0.3,
        ..ModelConfig::default()
    }
}

fn richest(ds: &Dataset) -> &TrainingExample {
    ds.examples
        .values()
        .flatten()
        .filter(|e| e.x.sum() > 0.0)
        .max_by(|a, b| a.y.sum().partial_cmp(&b.y.sum()).unwrap().then(b.start.cmp(&a.start)))
        .unwrap()
}

fn model_check(ds: &Dataset, ctx: &GraphContext, v: Variant, cfg: ModelConfig) -> GradCheckReport {
    let ex = richest(ds);
    let model = Model::new(cfg, v, ds.index.promoters.len(), ds.index.items.len()).unwrap();
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
    // Perturb the zero-initialised weights so every path carries gradient.
    let inputs: Vec<Tensor> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let jitter = rand_tensor(t.shape(), -0.05, 0.05, 900 + i as u64);
            Tensor::new(t.shape().to_vec(), t.data().iter().zip(jitter.data()).map(|(a, b)| a + b).collect()).unwrap()
        })
        .collect();
    grad_check(&inputs, EPS, FLOOR, |tape, vars| {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let fv = model.forward(tape, &bound, ex, ctx, &Sampling::train(5)).expect("forward");
        Ok(model.loss(tape, &fv, ex).expect("loss").total)
    })
    .unwrap()
}

/// Every primitive, composite layer and full model variant, with its report.
pub fn gradient_suite() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases().into_iter().chain(layer_cases()) {
        let report = grad_check(&inputs, EPS, FLOOR, |t, v| f(t, v)).unwrap();
        out.push((name.to_string(), report));
    }
    let ds = tiny_dataset();
    let ctx = GraphContext::from_dataset(&ds).unwrap();
    let base = tiny_model_config();
    let mut models = Vec::new();
    for mode in Mode::ALL {
        for gcn in [true, false] {
            models.push((
                format!("model {mode}{}", if gcn { "+gcn" } else { "-gcn" }),
                Variant { mode, gcn },
                base.clone(),
            ));
        }
    }
    models.push((
        "model s2p product-target softplus".into(),
        Variant { mode: Mode::S2P, gcn: true },
        ModelConfig { structure_target: StructureTarget::Product, link: Link::Softplus, ..base.clone() },
    ));
    models.push((
        "model s2p without prior".into(),
        Variant { mode: Mode::S2P, gcn: true },
        ModelConfig { structure_prior: false, ..base },
    ));
    for (name, v, cfg) in models {
        out.push((name, model_check(&ds, &ctx, v, cfg)));
    }
    out
}

/// Random DAG on `n` nodes: edges only go from lower to higher rank of a
/// random permutation.
pub fn random_dag(n: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                edges.push((order[i], order[j]));
            }
        }
    }
    edges
}

/// Transitive closure as `A ∨ A² ∨ … ∨ Aⁿ` with boolean matrix products.
pub fn closure_by_powers(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut a = vec![vec![false; n]; n];
    for &(s, d) in edges {
        a[s][d] = true;
    }
    let mut reach = a.clone();
    let mut power = a.clone();
    for _ in 1..n {
        let mut next = vec![vec![false; n]; n];
        for i in 0..n {
            for k in 0..n {
                if power[i][k] {
                    for j in 0..n {
                        next[i][j] |= a[k][j];
                    }
                }
            }
        }
        if next.iter().flatten().all(|&b| !b) {
            break;
        }
        for i in 0..n {
            for j in 0..n {
                reach[i][j] |= next[i][j];
            }
        }
        power = next;
    }
    reach.iter().map(|row| (0..n).filter(|&j| row[j]).collect()).collect()
}

/// Five items with two windows each, all in the training split.
pub fn overfit_config() -> propscale::harness::RunConfig {
    let mut cfg = propscale::harness::RunConfig::default();
    cfg.sim = SimConfig {
        n_items: 5,
        n_days: 6,
        promoter_pool: 60,
        promoters_per_item_range: (8, 16),
        edge_budget: 12,
        rng_seed: 11,
        ..SimConfig::default()
    };
    cfg.data = DatasetConfig { window: 4, horizon: 1, split_seed: 11, ratios: [1.0, 0.0, 0.0], subtable_cap: None };
    cfg.model.window = 4;
    cfg.model.horizon = 1;
    cfg.train.epochs = 500;
    cfg.train.patience = 0;
    cfg.train.batch_size = 4;
    cfg
}

/// Trains the overfit configuration and returns the evaluation-mode train MSLE.
pub fn overfit_train_msle(epochs: usize) -> f64 {
    use propscale::datapipe::Split;
    let mut cfg = overfit_config();
    cfg.train.epochs = epochs;
    let ds = propscale::harness::build_benchmark(&cfg).unwrap();
    assert_eq!(ds.items(Split::Train).len(), 5);
    let ctx = GraphContext::from_dataset(&ds).unwrap();
    let run = propscale::harness::run_mode(Mode::S2P, &ds, &ctx, &cfg).unwrap();
    run.report.split(Split::Train).unwrap().msle
}

/// Items whose promoters sell the same amount every day along a fixed chain
/// `p0 → p1 → …`; each order is attributed up the chain to `p0`. Every item
/// reuses the same promoter ids with its own levels, so a forecaster has to
/// read the history instead of memorizing embeddings.
pub fn constant_sales_logs(
    n_items: u32,
    n_days: u32,
    per_item: u32,
    seed: u64,
) -> (Vec<propscale::simkit::PromotionSnapshot>, Vec<propscale::simkit::OrderRecord>) {
    use propscale::simkit::{ItemId, OrderRecord, PromoterId, PromotionSnapshot};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut trace, mut orders) = (Vec::new(), Vec::new());
    for i in 0..n_items {
        let promoters: Vec<PromoterId> = (0..per_item).map(PromoterId).collect();
        let level: Vec<f64> = promoters.iter().map(|_| rng.random_range(0..6) as f64).collect();
        let edges: Vec<(PromoterId, PromoterId)> = promoters.windows(2).map(|w| (w[0], w[1])).collect();
        for day in 0..n_days {
            let self_sales = promoters.iter().copied().zip(level.iter().copied()).collect();
            trace.push(PromotionSnapshot {
                item: ItemId(i),
                day,
                promoters: promoters.clone(),
                edges: edges.clone(),
                self_sales,
            });
            for (k, &v) in level.iter().enumerate() {
                if v > 0.0 {
                    let chain = promoters[..=k].iter().rev().copied().collect();
                    orders.push(OrderRecord { order_id: orders.len() as u64, item: ItemId(i), day, sales: v, chain });
                }
            }
        }
    }
    (trace, orders)
}
