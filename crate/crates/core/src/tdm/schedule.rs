//! Diffusion noise schedules and stage partitions.
//!
//! A corrupted sample is `x_t = alpha(t)·x_0 + sigma(t)·eps`. Stages are
//! non-overlapping intervals `[t_i, t_{i+1})` covering the schedule's time
//! range; one fake score model serves all stages because the timestep
//! separates their sample distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha = 1 - t`, `sigma = t`.
    #[default]
    RectifiedFlow,
    /// `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
    VpCosine,
}

#[derive(Clone, Debug)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// `K + 1` strictly increasing boundaries in `[0, 1]`.
    boundaries: Vec<f64>,
    /// Per-stage weights `lambda_i`.
    weights: Vec<f64>,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, boundaries: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least one stage (two boundaries)".into(),
            ));
        }
        if weights.len() + 1 != boundaries.len() {
            return Err(Error::InvalidArgument(format!(
                "{} boundaries need {} weights, got {}",
                boundaries.len(),
                boundaries.len() - 1,
                weights.len()
            )));
        }
        for w in boundaries.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "stage boundaries must be strictly increasing; {} !< {}",
                    w[0], w[1]
                )));
            }
        }
        let first = boundaries[0];
        let last = *boundaries.last().unwrap();
        if !(0.0..=1.0).contains(&first) || !(0.0..=1.0).contains(&last) {
            return Err(Error::InvalidArgument(
                "stage boundaries must lie in [0, 1]".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("stage weights must be positive".into()));
        }
        Ok(Self {
            kind,
            boundaries,
            weights,
        })
    }

    /// `k` equal stages on `[0, 1]` with unit weights.
    pub fn uniform(kind: ScheduleKind, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("need at least one stage".into()));
        }
        let boundaries = (0..=k).map(|i| i as f64 / k as f64).collect();
        Self::new(kind, boundaries, vec![1.0; k])
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedFlow => 1.0 - t,
            ScheduleKind::VpCosine => (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedFlow => t,
            ScheduleKind::VpCosine => (std::f64::consts::FRAC_PI_2 * t).sin(),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.weights.len()
    }

    /// `[t_i, t_{i+1})` of stage `i`.
    pub fn stage_bounds(&self, i: usize) -> (f64, f64) {
        (self.boundaries[i], self.boundaries[i + 1])
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }
}

/// `alpha_t · x0 + sigma_t · eps`.
pub fn forward_corrupt(x0: &[f64], t: f64, eps: &[f64], sched: &Schedule) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t must be in [0, 1], got {t}")));
    }
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch(format!(
            "x0 has {} entries, eps has {}",
            x0.len(),
            eps.len()
        )));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Score implied by a clean-sample estimate:
/// `-(x_t - alpha_t · x0_hat) / sigma_t^2`.
pub fn denoiser_to_score(xt: &[f64], t: f64, x0_hat: &[f64], sched: &Schedule) -> Result<Vec<f64>> {
    let s = sched.sigma(t);
    if s == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "score is undefined where sigma(t) = 0 (t = {t})"
        )));
    }
    if xt.len() != x0_hat.len() {
        return Err(Error::ShapeMismatch(format!(
            "xt has {} entries, x0_hat has {}",
            xt.len(),
            x0_hat.len()
        )));
    }
    let a = sched.alpha(t);
    let s2 = s * s;
    Ok(xt
        .iter()
        .zip(x0_hat)
        .map(|(x, x0)| -(x - a * x0) / s2)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rf() -> Schedule {
        Schedule::uniform(ScheduleKind::RectifiedFlow, 4).unwrap()
    }

    #[test]
    fn rectified_flow_endpoints() {
        let sched = rf();
        let x0 = [2.0, -1.0];
        let eps = [0.5, 0.25];
        assert_eq!(forward_corrupt(&x0, 0.0, &eps, &sched).unwrap(), x0.to_vec());
        assert_eq!(forward_corrupt(&x0, 1.0, &eps, &sched).unwrap(), eps.to_vec());
        let mid = forward_corrupt(&[2.0], 0.5, &[0.0], &sched).unwrap();
        assert_eq!(mid, vec![1.0]);
        assert!(forward_corrupt(&x0, 1.5, &eps, &sched).is_err());
    }

    #[test]
    fn score_is_zero_on_manifold() {
        let sched = rf();
        let t = 0.3;
        let x0_hat = [1.5, -0.5];
        let xt: Vec<f64> = x0_hat.iter().map(|&x| sched.alpha(t) * x).collect();
        let score = denoiser_to_score(&xt, t, &x0_hat, &sched).unwrap();
        assert!(score.iter().all(|&s| s.abs() < 1e-12));
        assert!(denoiser_to_score(&xt, 0.0, &x0_hat, &sched).is_err());
    }

    #[test]
    fn score_scales_inverse_quadratically_with_sigma() {
        // fixed residual r = x_t - alpha x0_hat: score = -r / sigma^2
        let sched = rf();
        let r = 0.8;
        let t1 = 0.2;
        let t2 = 0.4; // sigma doubles under rectified flow
        let s1 = denoiser_to_score(&[sched.alpha(t1) * 1.0 + r], t1, &[1.0], &sched).unwrap();
        let s2 = denoiser_to_score(&[sched.alpha(t2) * 1.0 + r], t2, &[1.0], &sched).unwrap();
        assert!((s2[0] - s1[0] / 4.0).abs() < 1e-12);
    }

    #[test]
    fn stage_validation() {
        assert!(Schedule::new(
            ScheduleKind::RectifiedFlow,
            vec![0.0, 0.5, 0.4, 1.0],
            vec![1.0; 3]
        )
        .is_err());
        assert!(Schedule::new(
            ScheduleKind::RectifiedFlow,
            vec![0.0, 0.5, 0.5, 1.0],
            vec![1.0; 3]
        )
        .is_err());
        assert!(Schedule::new(ScheduleKind::RectifiedFlow, vec![0.0, 1.2], vec![1.0]).is_err());
        let s = Schedule::uniform(ScheduleKind::VpCosine, 3).unwrap();
        assert_eq!(s.num_stages(), 3);
        assert_eq!(s.stage_bounds(2), (2.0 / 3.0, 1.0));
    }

    #[test]
    fn vp_cosine_is_a_valid_schedule() {
        let s = Schedule::uniform(ScheduleKind::VpCosine, 2).unwrap();
        for i in 1..10 {
            let t = i as f64 / 10.0;
            assert!(s.alpha(t) > 0.0 && s.sigma(t) > 0.0);
        }
        assert!((s.alpha(0.0) - 1.0).abs() < 1e-12);
        assert!((s.sigma(1.0) - 1.0).abs() < 1e-12);
    }
}
