//! Flat parameter vectors and the handful of algebraic operations the
//! protocol needs: axpy, scaling, (weighted) averaging and momentum SGD.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Flat real-valued parameter vector. Models, gradients, perturbations and
/// aggregates are all carried as one of these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        ParamVector(vec![value; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        check_dim("max_abs_diff", self.dim(), other.dim())?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Order-sensitive bit checksum; equal checksums mean bit-identical values
    /// with overwhelming probability.
    pub fn checksum(&self) -> u64 {
        self.0.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
        })
    }

    /// `a * x + self`, in place.
    pub fn axpy_in_place(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        check_dim("axpy", self.dim(), x.dim())?;
        for (y, xv) in self.0.iter_mut().zip(&x.0) {
            *y += a * xv;
        }
        Ok(())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Elementwise `a * x + y`.
pub fn param_axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    let mut out = y.clone();
    out.axpy_in_place(a, x)?;
    Ok(out)
}

pub fn param_scale(a: f64, x: &ParamVector) -> ParamVector {
    ParamVector(x.0.iter().map(|v| a * v).collect())
}

/// Elementwise arithmetic mean: the sum is accumulated in list order and then
/// divided by the count.
pub fn param_mean<'a, I>(vectors: I) -> Result<ParamVector>
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    let mut iter = vectors.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("param_mean of an empty list".into()))?;
    let mut acc = first.clone();
    let mut count = 1usize;
    for v in iter {
        check_dim("param_mean", acc.dim(), v.dim())?;
        for (a, b) in acc.0.iter_mut().zip(&v.0) {
            *a += b;
        }
        count += 1;
    }
    let n = count as f64;
    for a in acc.0.iter_mut() {
        *a /= n;
    }
    Ok(acc)
}

/// `sum_i weights[i] * vectors[i]`.
pub fn param_weighted_sum(vectors: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if vectors.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} vectors but {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidArgument("weighted sum of an empty list".into()))?;
    let mut acc = ParamVector::zeros(first.dim());
    for (v, &w) in vectors.iter().zip(weights) {
        acc.axpy_in_place(w, v)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffer. Empty until the first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: Option<Vec<f64>>,
}

impl SgdState {
    pub fn reset(&mut self) {
        self.velocity = None;
    }
}

/// Heavy-ball SGD: `g += wd * p; v = mu * v + g; p -= lr * v`.
pub fn sgd_step(params: &mut ParamVector, grads: &ParamVector, cfg: &SgdConfig, state: &mut SgdState) -> Result<()> {
    check_dim("sgd_step", params.dim(), grads.dim())?;
    if !grads.is_finite() {
        return Err(Error::Divergence("non-finite gradient entry".into()));
    }
    let velocity = state.velocity.get_or_insert_with(|| vec![0.0; params.dim()]);
    check_dim("sgd_step momentum buffer", params.dim(), velocity.len())?;
    for ((p, &g), v) in params.0.iter_mut().zip(&grads.0).zip(velocity.iter_mut()) {
        let g = g + cfg.weight_decay * *p;
        *v = cfg.momentum * *v + g;
        *p -= cfg.lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn mean_of_one_is_identity() {
        let v = pv(&[1.5, -2.0, 3.25]);
        assert_eq!(param_mean([&v]).unwrap(), v);
    }

    #[test]
    fn mean_of_zero_and_two() {
        let m = param_mean([&ParamVector::zeros(3), &ParamVector::filled(3, 2.0)]).unwrap();
        assert_eq!(m, ParamVector::filled(3, 1.0));
    }

    #[test]
    fn axpy_example() {
        assert_eq!(
            param_axpy(2.0, &pv(&[1.0, 2.0]), &pv(&[3.0, 4.0])).unwrap(),
            pv(&[5.0, 8.0])
        );
    }

    #[test]
    fn mismatched_dims_rejected() {
        assert!(param_axpy(1.0, &pv(&[1.0]), &pv(&[1.0, 2.0])).is_err());
        assert!(param_mean([&pv(&[1.0]), &pv(&[1.0, 2.0])]).is_err());
        assert!(param_mean(std::iter::empty()).is_err());
        assert!(param_weighted_sum(&[&pv(&[1.0])], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn scale_doubles() {
        assert_eq!(param_scale(2.0, &pv(&[1.0, -3.0])), pv(&[2.0, -6.0]));
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = pv(&[1.0, 2.0]);
        let mut st = SgdState::default();
        sgd_step(&mut p, &ParamVector::zeros(2), &cfg, &mut st).unwrap();
        assert_eq!(p, pv(&[1.0, 2.0]));
    }

    #[test]
    fn sgd_plain_step() {
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = pv(&[1.0, 2.0]);
        let mut st = SgdState::default();
        sgd_step(&mut p, &pv(&[2.0, -4.0]), &cfg, &mut st).unwrap();
        assert_eq!(p, pv(&[0.0, 4.0]));
    }

    #[test]
    fn sgd_two_momentum_steps_unrolled() {
        // v1 = g, v2 = 0.9 g + g: displacement lr * g * (1 + 1.9)
        let (lr, g) = (0.01, 3.0);
        let cfg = SgdConfig {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = pv(&[0.0]);
        let mut st = SgdState::default();
        for _ in 0..2 {
            sgd_step(&mut p, &pv(&[g]), &cfg, &mut st).unwrap();
        }
        assert!((p.as_slice()[0] + lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_adds_to_gradient() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
        };
        let mut p = pv(&[2.0]);
        let mut st = SgdState::default();
        sgd_step(&mut p, &pv(&[0.0]), &cfg, &mut st).unwrap();
        assert!((p.as_slice()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = pv(&[0.0]);
        let err = sgd_step(&mut p, &pv(&[f64::NAN]), &cfg, &mut SgdState::default()).unwrap_err();
        assert!(err.is_divergence());
    }

    #[test]
    fn sgd_config_validation() {
        assert!(SgdConfig {
            lr: 0.0,
            momentum: 0.0,
            weight_decay: 0.0
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            lr: 0.1,
            momentum: 1.0,
            weight_decay: 0.0
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4
        }
        .validate()
        .is_ok());
    }
}
