use std::collections::BTreeMap;

use crate::autodiff::{ParamStore, Tensor};

/// Adaptive-moment optimizer with bias correction and optional decoupled
/// weight decay on weight matrices, embeddings and kernels.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, weight_decay: 0.0, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            // Biases and scalar weights are exempt.
            let shrink = if p.rank() >= 2 && p.len() > 1 { 1.0 - self.lr * self.weight_decay } else { 1.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p = shrink * *p - self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_shrinks_matrices_only() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::full(&[2, 2], 1.0));
        params.insert("b", Tensor::full(&[2], 1.0));
        let grads: BTreeMap<String, Tensor> =
            [("w".to_string(), Tensor::zeros(&[2, 2])), ("b".to_string(), Tensor::zeros(&[2]))].into();
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8).with_weight_decay(0.5);
        opt.update(&mut params, &grads);
        assert!((params.get("w").unwrap().data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(params.get("b").unwrap().data()[0], 1.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let g = BTreeMap::from([("w".to_string(), Tensor::from_rows(&[vec![0.5, -3.0]]).unwrap())]);
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-12);
        opt.update(&mut p, &g);
        let w = p.get("w").unwrap();
        assert!((w.get(0, 0) - 0.9).abs() < 1e-9);
        assert!((w.get(0, 1) + 1.9).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(4.0));
        let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let w = p.get("w").unwrap().data()[0];
            let g = BTreeMap::from([("w".to_string(), Tensor::scalar(2.0 * (w - 1.0)))]);
            opt.update(&mut p, &g);
        }
        assert!((p.get("w").unwrap().data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::from_rows(&[vec![3.0]]).unwrap()),
            ("b".to_string(), Tensor::from_rows(&[vec![4.0]]).unwrap()),
        ]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 10.0), 1.0);
    }
}
