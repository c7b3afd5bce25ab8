//! Analytic teacher distributions.
//!
//! The teacher's score is closed-form: diffusing `N(m, diag(s^2))` to time
//! `t` gives `N(alpha m, alpha^2 s^2 + sigma^2)` per dimension, so the score
//! is `-(x - alpha m) / (alpha^2 s^2 + sigma^2)`. A two-component diagonal
//! mixture blends the component scores with posterior responsibilities. No
//! data distribution is ever sampled during distillation; the teacher exists
//! only through these functions.

use crate::error::{Error, Result};
use crate::tdm::schedule::Schedule;

#[derive(Clone, Debug)]
pub enum TeacherDist {
    Gaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Mixture2 {
        weight1: f64,
        mean1: Vec<f64>,
        std1: Vec<f64>,
        mean2: Vec<f64>,
        std2: Vec<f64>,
    },
}

impl TeacherDist {
    pub fn gaussian(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::InvalidArgument(
                "mean and std must be non-empty and equal length".into(),
            ));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("std must be positive".into()));
        }
        Ok(Self::Gaussian { mean, std })
    }

    pub fn mixture2(
        weight1: f64,
        mean1: Vec<f64>,
        std1: Vec<f64>,
        mean2: Vec<f64>,
        std2: Vec<f64>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight1) {
            return Err(Error::InvalidArgument("mixture weight must be in [0,1]".into()));
        }
        let d = mean1.len();
        if d == 0 || std1.len() != d || mean2.len() != d || std2.len() != d {
            return Err(Error::InvalidArgument("component dims must agree".into()));
        }
        if std1.iter().chain(&std2).any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("std must be positive".into()));
        }
        Ok(Self::Mixture2 {
            weight1,
            mean1,
            std1,
            mean2,
            std2,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { mean, .. } => mean.len(),
            Self::Mixture2 { mean1, .. } => mean1.len(),
        }
    }

    /// Mean and standard deviation of the clean distribution, per dimension.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::Gaussian { mean, std } => (mean.clone(), std.clone()),
            Self::Mixture2 {
                weight1,
                mean1,
                std1,
                mean2,
                std2,
            } => {
                let w1 = *weight1;
                let w2 = 1.0 - w1;
                let mean: Vec<f64> = mean1
                    .iter()
                    .zip(mean2)
                    .map(|(a, b)| w1 * a + w2 * b)
                    .collect();
                let std = (0..mean.len())
                    .map(|d| {
                        let second = w1 * (std1[d] * std1[d] + mean1[d] * mean1[d])
                            + w2 * (std2[d] * std2[d] + mean2[d] * mean2[d]);
                        (second - mean[d] * mean[d]).sqrt()
                    })
                    .collect();
                (mean, std)
            }
        }
    }

    /// Marginal score of the diffused teacher at time `t`.
    pub fn score(&self, x: &[f64], t: f64, sched: &Schedule) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "sample has {} dims, teacher has {}",
                x.len(),
                self.dim()
            )));
        }
        let a = sched.alpha(t);
        let sg2 = sched.sigma(t) * sched.sigma(t);
        match self {
            Self::Gaussian { mean, std } => Ok(x
                .iter()
                .enumerate()
                .map(|(d, &xd)| {
                    let v = a * a * std[d] * std[d] + sg2;
                    -(xd - a * mean[d]) / v
                })
                .collect()),
            Self::Mixture2 {
                weight1,
                mean1,
                std1,
                mean2,
                std2,
            } => {
                // responsibilities from the joint diffused densities
                let log_comp = |mean: &[f64], std: &[f64]| -> f64 {
                    x.iter()
                        .enumerate()
                        .map(|(d, &xd)| {
                            let v = a * a * std[d] * std[d] + sg2;
                            let r = xd - a * mean[d];
                            -0.5 * (r * r / v + v.ln())
                        })
                        .sum()
                };
                let l1 = weight1.ln() + log_comp(mean1, std1);
                let l2 = (1.0 - weight1).ln() + log_comp(mean2, std2);
                let mx = l1.max(l2);
                let e1 = (l1 - mx).exp();
                let e2 = (l2 - mx).exp();
                let g1 = e1 / (e1 + e2);
                let g2 = 1.0 - g1;
                Ok((0..x.len())
                    .map(|d| {
                        let v1 = a * a * std1[d] * std1[d] + sg2;
                        let v2 = a * a * std2[d] * std2[d] + sg2;
                        g1 * (-(x[d] - a * mean1[d]) / v1) + g2 * (-(x[d] - a * mean2[d]) / v2)
                    })
                    .collect())
            }
        }
    }

    /// Posterior-mean denoiser of a Gaussian teacher:
    /// `E[x0 | x_t] = m + (alpha s^2 / (alpha^2 s^2 + sigma^2)) (x_t - alpha m)`.
    pub fn posterior_mean(&self, xt: &[f64], t: f64, sched: &Schedule) -> Result<Vec<f64>> {
        match self {
            Self::Gaussian { mean, std } => {
                let a = sched.alpha(t);
                let sg2 = sched.sigma(t) * sched.sigma(t);
                Ok(xt
                    .iter()
                    .enumerate()
                    .map(|(d, &x)| {
                        let s2 = std[d] * std[d];
                        let gain = a * s2 / (a * a * s2 + sg2);
                        mean[d] + gain * (x - a * mean[d])
                    })
                    .collect())
            }
            Self::Mixture2 { .. } => Err(Error::InvalidArgument(
                "closed-form posterior mean is provided for the Gaussian teacher only".into(),
            )),
        }
    }

    /// Per-dimension affine coefficients `(gain, offset)` of the Gaussian
    /// posterior-mean denoiser at time `t`.
    pub fn posterior_mean_coeffs(&self, t: f64, sched: &Schedule) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Self::Gaussian { mean, std } => {
                let a = sched.alpha(t);
                let sg2 = sched.sigma(t) * sched.sigma(t);
                let gains: Vec<f64> = std
                    .iter()
                    .map(|&s| a * s * s / (a * a * s * s + sg2))
                    .collect();
                let offsets = mean
                    .iter()
                    .zip(&gains)
                    .map(|(m, g)| m * (1.0 - g * a))
                    .collect();
                Ok((gains, offsets))
            }
            Self::Mixture2 { .. } => Err(Error::InvalidArgument(
                "affine posterior coefficients exist for the Gaussian teacher only".into(),
            )),
        }
    }
}
