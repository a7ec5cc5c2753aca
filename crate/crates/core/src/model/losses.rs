//! Training objectives and their plain-value counterparts for evaluation.

use crate::autodiff::{Tape, Tensor, Var};

use super::{ModelConfig, ModelError, StructureTarget};

/// Clamp for focal terms evaluated on probabilities.
pub const FOCAL_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub main: Var,
    pub aux: Option<Var>,
    pub total: Var,
}

/// `mean((log1p(ŷ) - log1p(y))²)` over every entry.
pub fn loss_main(tape: &mut Tape, y: &Tensor, y_hat: Var) -> Result<Var, ModelError> {
    let pred = tape.value(y_hat);
    if pred.shape() != y.shape() {
        return Err(ModelError::Shape(format!("target {:?} vs prediction {:?}", y.shape(), pred.shape())));
    }
    if y.data().iter().chain(pred.data()).any(|&v| v < 0.0) {
        return Err(ModelError::Negative { op: "msle" });
    }
    let lp = tape.log1p(y_hat)?;
    let lt = tape.constant(y.map(f64::ln_1p));
    let d = tape.sub(lp, lt)?;
    let sq = tape.square(d);
    Ok(tape.mean_all(sq)?)
}

/// Supervision for one horizon step of the decoder.
#[derive(Clone, Debug)]
pub struct AuxStep {
    /// `n × 1` activity labels.
    pub active: Tensor,
    pub active_logits: Var,
    /// `n × n` descendant-and-activity structure labels.
    pub structure: Tensor,
    /// Gate logits or coefficient probabilities, per `structure_target`.
    pub structure_pred: Var,
}

/// `MSLE(x, X̂) + Σ_t FL(l_t, l̂_t) + Σ_t FL(S_t, Ŝ_t)`.
pub fn loss_aux(
    tape: &mut Tape,
    x_true: &Tensor,
    x_hat: Var,
    steps: &[AuxStep],
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    let mut total = loss_main(tape, x_true, x_hat)?;
    for s in steps {
        let fl = tape.focal_logits(s.active_logits, &s.active, cfg.focal_alpha, cfg.focal_gamma)?;
        total = tape.add(total, fl)?;
        let fs = match cfg.structure_target {
            StructureTarget::Gate => {
                tape.focal_logits(s.structure_pred, &s.structure, cfg.focal_alpha, cfg.focal_gamma)?
            }
            StructureTarget::Product => {
                tape.focal_probs(s.structure_pred, &s.structure, cfg.focal_alpha, cfg.focal_gamma, FOCAL_EPS)?
            }
        };
        total = tape.add(total, fs)?;
    }
    Ok(total)
}

pub fn loss_total(tape: &mut Tape, main: Var, aux: Option<Var>) -> Result<LossVars, ModelError> {
    let total = match aux {
        Some(a) => tape.add(main, a)?,
        None => main,
    };
    Ok(LossVars { main, aux, total })
}

/// Mean squared log error on plain values.
pub fn msle(y: &[f64], y_hat: &[f64]) -> Result<f64, ModelError> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(ModelError::Shape(format!("msle over {} targets and {} predictions", y.len(), y_hat.len())));
    }
    if y.iter().chain(y_hat).any(|&v| v < 0.0) {
        return Err(ModelError::Negative { op: "msle" });
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (b.ln_1p() - a.ln_1p()).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Mean absolute percentage error over entries with `y > 0`; `None` if there are none.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Option<f64> {
    let (sum, count) = y
        .iter()
        .zip(y_hat)
        .filter(|(a, _)| **a > 0.0)
        .fold((0.0, 0usize), |(s, c), (a, b)| (s + (b - a).abs() / a, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Focal loss of a single probability `p` against target `y ∈ [0, 1]`.
pub fn focal_scalar(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let q = 1.0 - p;
    -alpha * (y * q.powf(gamma) * p.ln() + (1.0 - y) * p.powf(gamma) * q.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msle_values() {
        assert_eq!(msle(&[0.0, 3.0], &[0.0, 3.0]).unwrap(), 0.0);
        let v = msle(&[0.0], &[std::f64::consts::E - 1.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(matches!(msle(&[1.0], &[-0.5]), Err(ModelError::Negative { .. })));
    }

    #[test]
    fn tape_msle_matches_scalar() {
        let y = Tensor::from_rows(&[vec![0.0, 2.0], vec![5.0, 1.0]]).unwrap();
        let p = Tensor::from_rows(&[vec![0.5, 1.0], vec![4.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let pv = tape.param(p.clone());
        let l = loss_main(&mut tape, &y, pv).unwrap();
        assert!((tape.value(l).data()[0] - msle(y.data(), p.data()).unwrap()).abs() < 1e-12);
        let neg = tape.constant(Tensor::full(&[2, 2], -1.0));
        assert!(loss_main(&mut tape, &y, neg).is_err());
    }

    #[test]
    fn mape_skips_zero_targets() {
        assert_eq!(mape(&[0.0, 2.0], &[5.0, 3.0]), Some(0.5));
        assert_eq!(mape(&[0.0], &[1.0]), None);
    }

    #[test]
    fn focal_matches_tape() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap());
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let f = tape.focal_logits(z, &t, 0.25, 2.0).unwrap();
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let expect = (focal_scalar(s(0.3), 1.0, 0.25, 2.0) + focal_scalar(s(-1.2), 0.0, 0.25, 2.0)) / 2.0;
        assert!((tape.value(f).data()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn total_adds_aux() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1.5));
        let b = tape.constant(Tensor::scalar(2.0));
        let l = loss_total(&mut tape, a, Some(b)).unwrap();
        assert_eq!(tape.value(l.total).data()[0], 3.5);
        let only = loss_total(&mut tape, a, None).unwrap();
        assert_eq!(only.total, a);
    }
}
