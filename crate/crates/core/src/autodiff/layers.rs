//! Composite building blocks expressed with tape primitives.

use std::rc::Rc;

use rand::Rng;

use super::{AutodiffError, Bound, Segments, Tape, Tensor, Var};

/// How a convolution is padded so that output length equals input length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `k - 1` zeros on the left; step `t` only sees steps `<= t`.
    Causal,
    /// Centred kernel.
    Same,
}

impl Padding {
    pub fn left(self, kernel: usize) -> usize {
        match self {
            Padding::Causal => kernel.saturating_sub(1),
            Padding::Same => kernel.saturating_sub(1) / 2,
        }
    }
}

/// Kernel and bias of one branch of a convolution bank.
#[derive(Clone, Copy, Debug)]
pub struct ConvKernel {
    pub weight: Var,
    pub bias: Var,
}

/// Runs every kernel over `x` (`[batch, channels, time]`) and concatenates the
/// feature maps on the channel axis.
pub fn conv1d_bank(tape: &mut Tape, x: Var, kernels: &[ConvKernel], padding: Padding) -> Result<Var, AutodiffError> {
    if kernels.is_empty() {
        return Err(AutodiffError::Empty { op: "conv1d_bank" });
    }
    let time = tape.value(x).shape().get(2).copied().unwrap_or(0);
    let mut maps = Vec::with_capacity(kernels.len());
    for k in kernels {
        let size = tape.value(k.weight).shape()[2];
        if size > time {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d_bank",
                lhs: tape.value(x).shape().to_vec(),
                rhs: tape.value(k.weight).shape().to_vec(),
            });
        }
        maps.push(tape.conv1d(x, k.weight, k.bias, padding.left(size))?);
    }
    if maps.len() == 1 {
        return Ok(maps[0]);
    }
    tape.concat(&maps, 1)
}

/// Gated recurrent unit weights: `w_*` map inputs, `u_*` map the previous state.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_n: Var,
    pub u_n: Var,
    pub b_n: Var,
}

impl GruVars {
    /// Looks up `{prefix}.w_z` and friends.
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self, AutodiffError> {
        let v = |s: &str| bound.var(&format!("{prefix}.{s}"));
        Ok(Self {
            w_z: v("w_z")?,
            u_z: v("u_z")?,
            b_z: v("b_z")?,
            w_r: v("w_r")?,
            u_r: v("u_r")?,
            b_r: v("b_r")?,
            w_n: v("w_n")?,
            u_n: v("u_n")?,
            b_n: v("b_n")?,
        })
    }

    /// Parameter names and shapes for an `input → hidden` cell.
    pub fn shapes(prefix: &str, input: usize, hidden: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for gate in ["z", "r", "n"] {
            out.push((format!("{prefix}.w_{gate}"), vec![input, hidden]));
            out.push((format!("{prefix}.u_{gate}"), vec![hidden, hidden]));
            out.push((format!("{prefix}.b_{gate}"), vec![1, hidden]));
        }
        out
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, h: Var, u: Var, b: Var) -> Result<Var, AutodiffError> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    tape.add(s, b)
}

/// `h' = (1 - z) ⊙ h + z ⊙ n` with update `z`, reset `r` and candidate
/// `n = tanh(x W_n + (r ⊙ h) U_n + b_n)`.
pub fn gru_cell(tape: &mut Tape, p: &GruVars, h_prev: Var, x: Var) -> Result<Var, AutodiffError> {
    let z_pre = affine(tape, x, p.w_z, h_prev, p.u_z, p.b_z)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = affine(tape, x, p.w_r, h_prev, p.u_r, p.b_r)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h_prev)?;
    let n_pre = affine(tape, x, p.w_n, rh, p.u_n, p.b_n)?;
    let n = tape.tanh(n_pre);
    // (1 - z) ⊙ h + z ⊙ n  ==  h + z ⊙ (n - h)
    let diff = tape.sub(n, h_prev)?;
    let step = tape.mul(z, diff)?;
    tape.add(h_prev, step)
}

/// Folds the cell over `xs` from `h0`; returns the final state.
pub fn gru_sequence(tape: &mut Tape, p: &GruVars, h0: Var, xs: &[Var]) -> Result<Var, AutodiffError> {
    xs.iter().try_fold(h0, |h, &x| gru_cell(tape, p, h, x))
}

/// Additive attention scorer `vᵀ tanh(W_q q + W_k k)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_query: Var,
    pub w_key: Var,
    pub score: Var,
}

impl AttentionVars {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self, AutodiffError> {
        Ok(Self {
            w_query: bound.var(&format!("{prefix}.w_query"))?,
            w_key: bound.var(&format!("{prefix}.w_key"))?,
            score: bound.var(&format!("{prefix}.score"))?,
        })
    }

    pub fn shapes(prefix: &str, query: usize, key: usize, hidden: usize) -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("{prefix}.w_query"), vec![query, hidden]),
            (format!("{prefix}.w_key"), vec![key, hidden]),
            (format!("{prefix}.score"), vec![hidden, 1]),
        ]
    }
}

/// Output of [`attention_aggregate`].
#[derive(Clone, Copy, Debug)]
pub struct Aggregated {
    /// One row per segment.
    pub output: Var,
    /// One weight per element, summing to 1 within each non-empty segment.
    pub weights: Var,
}

/// Attention pooling of ragged groups. Element `j` (row `j` of `keys` and
/// `values`) belongs to the query row `seg.ids()[j]`. Segments without
/// elements produce zero rows.
pub fn attention_aggregate(
    tape: &mut Tape,
    att: &AttentionVars,
    queries: Var,
    keys: Var,
    values: Var,
    seg: &Rc<Segments>,
) -> Result<Aggregated, AutodiffError> {
    let q = tape.matmul(queries, att.w_query)?;
    let q = tape.gather_rows(q, seg.ids())?;
    let k = tape.matmul(keys, att.w_key)?;
    let hidden = tape.add(q, k)?;
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul(hidden, att.score)?;
    let weights = tape.segment_softmax(scores, seg)?;
    let output = tape.segment_weighted_sum(weights, values, seg)?;
    Ok(Aggregated { output, weights })
}

/// Standard logistic draws `ln u - ln(1 - u)`.
pub fn logistic_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        *v = u.ln() - (-u).ln_1p();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_pair_kernel_by_hand() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = conv1d_bank(&mut tape, x, &[ConvKernel { weight: w, bias: b }], Padding::Causal).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn centred_unit_kernel_is_identity() {
        let mut tape = Tape::new();
        let data = vec![0.5, -1.0, 2.0, 4.0];
        let x = tape.constant(Tensor::new(vec![1, 1, 4], data.clone()).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = conv1d_bank(&mut tape, x, &[ConvKernel { weight: w, bias: b }], Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn empty_bank_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3]));
        assert!(conv1d_bank(&mut tape, x, &[], Padding::Causal).is_err());
    }

    #[test]
    fn bank_concatenates_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 5]));
        let mut ks = Vec::new();
        for k in [2, 3] {
            let weight = tape.constant(Tensor::zeros(&[4, 1, k]));
            let bias = tape.constant(Tensor::zeros(&[4]));
            ks.push(ConvKernel { weight, bias });
        }
        let y = conv1d_bank(&mut tape, x, &ks, Padding::Causal).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 5]);
    }

    fn zero_gru(input: usize, hidden: usize) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, shape) in GruVars::shapes("gru", input, hidden) {
            store.insert(name, Tensor::zeros(&shape));
        }
        store
    }

    #[test]
    fn zero_gru_halves_the_state() {
        let store = zero_gru(3, 2);
        let mut tape = Tape::new();
        let bound = store.attach(&mut tape);
        let gru = GruVars::bind(&bound, "gru").unwrap();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.4, 8.0]]).unwrap());
        let x = tape.constant(Tensor::full(&[2, 3], 0.7));
        let out = gru_cell(&mut tape, &gru, h, x).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 0.2, 4.0]);
    }

    #[test]
    fn single_step_sequence_is_one_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        for (name, shape) in GruVars::shapes("gru", 2, 3) {
            store.insert(name, Tensor::uniform(&shape, 0.5, &mut rng));
        }
        let mut tape = Tape::new();
        let bound = store.attach(&mut tape);
        let gru = GruVars::bind(&bound, "gru").unwrap();
        let h = tape.constant(Tensor::uniform(&[4, 3], 1.0, &mut rng));
        let x = tape.constant(Tensor::uniform(&[4, 2], 1.0, &mut rng));
        let a = gru_cell(&mut tape, &gru, h, x).unwrap();
        let b = gru_sequence(&mut tape, &gru, h, &[x]).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    fn attention_store(rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, shape) in AttentionVars::shapes("att", 3, 3, 4) {
            store.insert(name, Tensor::uniform(&shape, 1.0, rng));
        }
        store
    }

    #[test]
    fn single_item_attention_returns_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = attention_store(&mut rng);
        let mut tape = Tape::new();
        let bound = store.attach(&mut tape);
        let att = AttentionVars::bind(&bound, "att").unwrap();
        let q = tape.constant(Tensor::uniform(&[1, 3], 1.0, &mut rng));
        let item = Tensor::uniform(&[1, 3], 1.0, &mut rng);
        let v = tape.constant(item.clone());
        let seg = Rc::new(Segments::new(vec![0], 1).unwrap());
        let agg = attention_aggregate(&mut tape, &att, q, v, v, &seg).unwrap();
        assert_eq!(tape.value(agg.output), &item);
    }

    #[test]
    fn identical_items_and_empty_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let store = attention_store(&mut rng);
        let mut tape = Tape::new();
        let bound = store.attach(&mut tape);
        let att = AttentionVars::bind(&bound, "att").unwrap();
        let q = tape.constant(Tensor::uniform(&[2, 3], 1.0, &mut rng));
        let row = vec![0.3, -0.2, 0.9];
        let v = tape.constant(Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap());
        let seg = Rc::new(Segments::new(vec![1, 1, 1], 2).unwrap());
        let agg = attention_aggregate(&mut tape, &att, q, v, v, &seg).unwrap();
        let out = tape.value(agg.output);
        assert_eq!(out.row(0), &[0.0, 0.0, 0.0]);
        for (a, b) in out.row(1).iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = tape.value(agg.weights);
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logistic_noise_is_seed_stable() {
        let a = logistic_noise(&[3, 3], &mut ChaCha8Rng::seed_from_u64(9));
        let b = logistic_noise(&[3, 3], &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.is_finite()));
    }
}
