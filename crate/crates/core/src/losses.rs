//! Scalar losses: capped feature discrepancy, feature similarity and softmax
//! cross-entropy, each with its exact gradient.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Vectors with an L2 norm below this are treated as collapsed.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

/// Upper bound on the discrepancy loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CapM(f64);

impl CapM {
    pub fn new(m: f64) -> Result<Self> {
        if m > 0.0 && m.is_finite() {
            Ok(CapM(m))
        } else {
            Err(Error::InvalidArgument(format!("cap m must be > 0, got {m}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for CapM {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        CapM::new(v)
    }
}

impl From<CapM> for f64 {
    fn from(c: CapM) -> f64 {
        c.0
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = l2(v);
    if n.is_nan() || n < MIN_FEATURE_NORM {
        return Err(Error::DegenerateFeature { norm: n });
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// `|| f/||f|| - g/||g|| ||^2`, in `[0, 4]`.
pub fn normalized_sq_dist(f: &[f64], f_hat: &[f64]) -> Result<f64> {
    check_dim("normalized_sq_dist", f.len(), f_hat.len())?;
    let (u, _) = unit(f)?;
    let (v, _) = unit(f_hat)?;
    Ok(u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Value of [`normalized_sq_dist`] and its gradient with respect to each argument.
#[derive(Clone, Debug)]
pub struct DistGrad {
    pub value: f64,
    pub d_f: Vec<f64>,
    pub d_f_hat: Vec<f64>,
}

pub fn normalized_sq_dist_grad(f: &[f64], f_hat: &[f64]) -> Result<DistGrad> {
    check_dim("normalized_sq_dist", f.len(), f_hat.len())?;
    let (u, nf) = unit(f)?;
    let (v, ng) = unit(f_hat)?;
    let diff: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
    let value = diff.iter().map(|d| d * d).sum();
    // d/dv ||u - v||^2 = -2 (u - v); pull back through v = g/||g||:
    // J^T w = (w - v (v.w)) / ||g||.
    let project = |w: &[f64], dir: &[f64], norm: f64| -> Vec<f64> {
        let dot: f64 = w.iter().zip(dir).map(|(a, b)| a * b).sum();
        w.iter().zip(dir).map(|(wi, di)| (wi - di * dot) / norm).collect()
    };
    let w_hat: Vec<f64> = diff.iter().map(|d| -2.0 * d).collect();
    let w_f: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
    Ok(DistGrad {
        value,
        d_f: project(&w_f, &u, nf),
        d_f_hat: project(&w_hat, &v, ng),
    })
}

/// `min(normalized_sq_dist, m)`.
pub fn loss_dis(f: &[f64], f_hat: &[f64], cap: CapM) -> Result<f64> {
    Ok(normalized_sq_dist(f, f_hat)?.min(cap.get()))
}

/// Capped discrepancy with gradient. On the capped branch (raw >= m) the
/// gradient is exactly zero.
pub fn loss_dis_grad(f: &[f64], f_hat: &[f64], cap: CapM) -> Result<DistGrad> {
    let mut g = normalized_sq_dist_grad(f, f_hat)?;
    if g.value >= cap.get() {
        g.value = cap.get();
        g.d_f.iter_mut().for_each(|v| *v = 0.0);
        g.d_f_hat.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(g)
}

pub fn loss_sim(f: &[f64], f_hat: &[f64]) -> Result<f64> {
    normalized_sq_dist(f, f_hat)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy in nats.
pub fn loss_cls(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let value = if logits[y] == max {
        // ln(1 + sum_{j != y} e^{l_j - l_y}) keeps precision for confident predictions.
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, l)| (l - max).exp())
            .sum();
        rest.ln_1p()
    } else {
        log_sum_exp(logits) - logits[y]
    };
    Ok(value.max(0.0))
}

/// Cross-entropy and its gradient with respect to the logits (`softmax - onehot`).
pub fn loss_cls_grad(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    let value = loss_cls(logits, y)?;
    let mut g = softmax(logits);
    g[y] -= 1.0;
    Ok((value, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_distance_zero() {
        assert_eq!(normalized_sq_dist(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert_eq!(loss_sim(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn antipodal_is_four() {
        assert_eq!(normalized_sq_dist(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 4.0);
        assert_eq!(loss_sim(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 4.0);
    }

    #[test]
    fn forty_five_degrees() {
        let expected = 2.0 - 2f64.sqrt();
        assert!((normalized_sq_dist(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - expected).abs() < 1e-12);
        let uncapped = loss_dis(&[1.0, 0.0], &[1.0, 1.0], CapM::new(4.0).unwrap()).unwrap();
        assert!((uncapped - expected).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_capped() {
        let cap = CapM::new(0.1).unwrap();
        assert_eq!(loss_dis(&[1.0, 0.0], &[0.0, 1.0], cap).unwrap(), 0.1);
        let g = loss_dis_grad(&[1.0, 0.0], &[0.0, 1.0], cap).unwrap();
        assert!(g.d_f.iter().chain(&g.d_f_hat).all(|&v| v == 0.0));
        assert_eq!(loss_dis(&[2.0, 1.0], &[2.0, 1.0], cap).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_features_rejected() {
        assert!(matches!(
            normalized_sq_dist(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateFeature { .. })
        ));
        assert!(normalized_sq_dist(&[1.0, 0.0], &[1e-13, 0.0]).is_err());
        assert!(CapM::new(0.0).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        assert!((loss_cls(&[0.5, 0.5, 0.5], 1).unwrap() - 3f64.ln()).abs() < 1e-15);
        assert!((loss_cls(&[0.0, 0.0], 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        // ln(1 + e^-10) = 4.539889921686465e-05
        let v = loss_cls(&[10.0, 0.0], 0).unwrap();
        assert!((v - 4.539_889_921_686_465e-5).abs() < 1e-18);
        assert!(loss_cls(&[0.0], 1).is_err());
    }

    #[test]
    fn cross_entropy_margin_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let v = loss_cls(&[margin, 0.0, 0.0], 0).unwrap();
            assert!(v >= 0.0 && v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cls_gradient_is_softmax_minus_onehot() {
        let (_, g) = loss_cls_grad(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        assert!(g[2] < 0.0 && g[0] > 0.0);
    }
}
