//! Fake score model: per-bucket affine denoisers fit by least squares.
//!
//! Each stage is covered by a few timestep buckets. A bucket at time `j`
//! holds an affine denoiser `x0_hat = A x + c` fit on re-corrupted pairs
//! `(x_j, x_hat)` where `x_j = alpha_j x_hat + sigma_j eps`. The objective
//! is exactly linear least squares, so the fit is the closed-form normal
//! equation solution and no optimizer noise enters the score approximation.
//! A rank-deficient design falls back to ridge with fixed damping 1e-6 and
//! is flagged.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tdm::schedule::{denoiser_to_score, forward_corrupt, Schedule};

const RIDGE_DAMPING: f64 = 1e-6;

/// Affine clean-sample predictor `x0_hat = A x + c`.
#[derive(Clone, Debug)]
pub struct AffineDenoiser {
    dim: usize,
    /// Row-major `dim × dim`.
    a: Vec<f64>,
    c: Vec<f64>,
    /// Mean per-dimension squared residual of the fit.
    pub residual: f64,
    /// True when the normal equations needed ridge damping.
    pub ridge_flagged: bool,
}

impl AffineDenoiser {
    pub fn from_coeffs(a: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let dim = c.len();
        if a.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!(
                "A has {} entries for dim {dim}",
                a.len()
            )));
        }
        Ok(Self {
            dim,
            a,
            c,
            residual: 0.0,
            ridge_flagged: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gain(&self) -> &[f64] {
        &self.a
    }

    pub fn offset(&self) -> &[f64] {
        &self.c
    }

    pub fn denoise(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|r| {
                let mut acc = self.c[r];
                for (j, &xj) in x.iter().enumerate() {
                    acc += self.a[r * d + j] * xj;
                }
                acc
            })
            .collect()
    }
}

/// Closed-form least-squares fit of `target ≈ A·input + c`.
pub fn fit_affine_denoiser(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<AffineDenoiser> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty pair sets, got {} inputs, {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let dim = inputs[0].len();
    if dim == 0 || targets[0].len() != dim {
        return Err(Error::ShapeMismatch("pair dimensions must agree".into()));
    }
    let n = inputs.len();
    let aug = dim + 1;

    // normal equations on the augmented design [x; 1]
    let mut gram = DMatrix::<f64>::zeros(aug, aug);
    let mut xty = DMatrix::<f64>::zeros(aug, dim);
    for (x, y) in inputs.iter().zip(targets) {
        for r in 0..dim {
            for c in r..dim {
                gram[(r, c)] += x[r] * x[c];
            }
            gram[(r, dim)] += x[r];
            for c in 0..dim {
                xty[(r, c)] += x[r] * y[c];
            }
        }
        for c in 0..dim {
            xty[(dim, c)] += y[c];
        }
    }
    gram[(dim, dim)] = n as f64;
    for r in 0..aug {
        for c in 0..r {
            gram[(r, c)] = gram[(c, r)];
        }
    }

    let mut ridge_flagged = n < aug;
    let solution = if ridge_flagged {
        None
    } else {
        gram.clone().lu().solve(&xty).filter(|w| w.iter().all(|v| v.is_finite()))
    };
    let w = match solution {
        Some(w) => w,
        None => {
            ridge_flagged = true;
            let damped = gram + DMatrix::<f64>::identity(aug, aug) * RIDGE_DAMPING;
            damped.lu().solve(&xty).ok_or_else(|| {
                Error::Divergence("ridge-damped normal equations are singular".into())
            })?
        }
    };

    // w is (dim+1) x dim mapping [x; 1] -> target
    let mut a = vec![0.0f64; dim * dim];
    let mut c = vec![0.0f64; dim];
    for out in 0..dim {
        for inp in 0..dim {
            a[out * dim + inp] = w[(inp, out)];
        }
        c[out] = w[(dim, out)];
    }
    let mut den = AffineDenoiser {
        dim,
        a,
        c,
        residual: 0.0,
        ridge_flagged,
    };
    let mut res = 0.0f64;
    for (x, y) in inputs.iter().zip(targets) {
        let pred = den.denoise(x);
        res += pred
            .iter()
            .zip(y)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
    }
    den.residual = res / (n * dim) as f64;
    Ok(den)
}

/// One timestep bucket of the fake score model.
#[derive(Clone, Debug)]
pub struct FakeBucket {
    pub stage: usize,
    /// Representative timestep of the bucket.
    pub j: f64,
    pub denoiser: AffineDenoiser,
}

/// The single fake score model shared by all stages.
#[derive(Clone, Debug)]
pub struct FakeScore {
    buckets: Vec<FakeBucket>,
    per_stage: usize,
}

impl FakeScore {
    pub fn from_buckets(buckets: Vec<FakeBucket>, per_stage: usize) -> Self {
        Self { buckets, per_stage }
    }

    /// Bucket timestep centers for `stage`: midpoints of `per_stage` equal
    /// sub-intervals of `[t_i, t_{i+1})`.
    pub fn bucket_times(sched: &Schedule, stage: usize, per_stage: usize) -> Vec<f64> {
        let (lo, hi) = sched.stage_bounds(stage);
        let step = (hi - lo) / per_stage as f64;
        (0..per_stage)
            .map(|s| lo + (s as f64 + 0.5) * step)
            .collect()
    }

    pub fn buckets_for_stage(&self, stage: usize) -> &[FakeBucket] {
        &self.buckets[stage * self.per_stage..(stage + 1) * self.per_stage]
    }

    pub fn mean_residual(&self) -> f64 {
        if self.buckets.is_empty() {
            return 0.0;
        }
        self.buckets.iter().map(|b| b.denoiser.residual).sum::<f64>() / self.buckets.len() as f64
    }

    pub fn any_ridge_flagged(&self) -> bool {
        self.buckets.iter().any(|b| b.denoiser.ridge_flagged)
    }

    /// Fake score at a bucket's timestep via the score relation.
    pub fn score(&self, bucket: &FakeBucket, x: &[f64], sched: &Schedule) -> Result<Vec<f64>> {
        let x0_hat = bucket.denoiser.denoise(x);
        denoiser_to_score(x, bucket.j, &x0_hat, sched)
    }
}

/// Fit the fake score model on per-stage clean student outputs.
///
/// For every bucket, each clean sample is re-corrupted at the bucket's
/// timestep with a fresh draw and the affine denoiser is fit to predict the
/// clean sample back.
pub fn train_fake_score(
    samples_per_stage: &[&[Vec<f64>]],
    sched: &Schedule,
    buckets_per_stage: usize,
    rng: &mut RngStream,
) -> Result<FakeScore> {
    if samples_per_stage.len() != sched.num_stages() {
        return Err(Error::InvalidArgument(format!(
            "{} sample sets for {} stages",
            samples_per_stage.len(),
            sched.num_stages()
        )));
    }
    if buckets_per_stage == 0 {
        return Err(Error::InvalidArgument("need at least one bucket per stage".into()));
    }
    let mut buckets = Vec::with_capacity(sched.num_stages() * buckets_per_stage);
    for (stage, samples) in samples_per_stage.iter().enumerate() {
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} has no samples"
            )));
        }
        for j in FakeScore::bucket_times(sched, stage, buckets_per_stage) {
            let mut inputs = Vec::with_capacity(samples.len());
            for clean in samples.iter() {
                let eps: Vec<f64> = (0..clean.len()).map(|_| rng.normal()).collect();
                inputs.push(forward_corrupt(clean, j, &eps, sched)?);
            }
            let targets: Vec<Vec<f64>> = samples.to_vec();
            let denoiser = fit_affine_denoiser(&inputs, &targets)?;
            buckets.push(FakeBucket { stage, j, denoiser });
        }
    }
    Ok(FakeScore::from_buckets(buckets, buckets_per_stage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tdm::schedule::ScheduleKind;
    use crate::tdm::teacher::TeacherDist;

    fn rf(k: usize) -> Schedule {
        Schedule::uniform(ScheduleKind::RectifiedFlow, k).unwrap()
    }

    #[test]
    fn constant_targets_fit_a_constant() {
        let mut rng = RngStream::new(1);
        let inputs: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let targets = vec![vec![2.5, -1.0]; 200];
        let den = fit_affine_denoiser(&inputs, &targets).unwrap();
        for &g in den.gain() {
            assert!(g.abs() < 1e-9, "gain {g}");
        }
        assert!((den.offset()[0] - 2.5).abs() < 1e-9);
        assert!((den.offset()[1] + 1.0).abs() < 1e-9);
        assert!(den.residual < 1e-18);
        assert!(!den.ridge_flagged);
    }

    #[test]
    fn gaussian_pairs_recover_the_posterior_mean_coefficients() {
        let sched = rf(4);
        let teacher = TeacherDist::gaussian(vec![1.0], vec![0.8]).unwrap();
        let j = 0.45;
        let mut rng = RngStream::new(2);
        let n = 10_000;
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let x0 = vec![1.0 + 0.8 * rng.normal()];
            let eps = vec![rng.normal()];
            inputs.push(forward_corrupt(&x0, j, &eps, &sched).unwrap());
            targets.push(x0);
        }
        let den = fit_affine_denoiser(&inputs, &targets).unwrap();
        let (gains, offsets) = teacher.posterior_mean_coeffs(j, &sched).unwrap();
        assert!(
            (den.gain()[0] - gains[0]).abs() / gains[0] < 0.05,
            "gain {} vs {}",
            den.gain()[0],
            gains[0]
        );
        assert!(
            (den.offset()[0] - offsets[0]).abs() / offsets[0].abs().max(0.1) < 0.05,
            "offset {} vs {}",
            den.offset()[0],
            offsets[0]
        );
    }

    #[test]
    fn near_zero_noise_bucket_inverts_alpha() {
        // sigma = 1e-3 under rectified flow means j = 1e-3, alpha ~ 0.999
        let sched = rf(4);
        let j = 1e-3;
        let mut rng = RngStream::new(3);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..5_000 {
            let x0 = vec![2.0 + rng.normal()];
            let eps = vec![rng.normal()];
            inputs.push(forward_corrupt(&x0, j, &eps, &sched).unwrap());
            targets.push(x0);
        }
        let den = fit_affine_denoiser(&inputs, &targets).unwrap();
        let inv_alpha = 1.0 / sched.alpha(j);
        assert!((den.gain()[0] - inv_alpha).abs() < 0.01, "gain {}", den.gain()[0]);
        assert!(den.offset()[0].abs() < 0.02, "offset {}", den.offset()[0]);
    }

    #[test]
    fn rank_deficient_design_falls_back_to_ridge_and_flags() {
        // 2 samples cannot determine a 3-dimensional affine map
        let inputs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let targets = vec![vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 0.0]];
        let den = fit_affine_denoiser(&inputs, &targets).unwrap();
        assert!(den.ridge_flagged);
        // damped solution still reproduces the two fitted points closely
        assert!(den.residual < 1e-3);
    }

    #[test]
    fn fit_error_shrinks_with_four_times_the_samples() {
        let sched = rf(4);
        let teacher = TeacherDist::gaussian(vec![0.5], vec![1.0]).unwrap();
        let j = 0.6;
        let (true_gain, _) = teacher.posterior_mean_coeffs(j, &sched).unwrap();
        let err_at = |n: usize, seed: u64| -> f64 {
            let mut total = 0.0;
            for rep in 0..24 {
                let mut rng = RngStream::new(seed + rep);
                let mut inputs = Vec::with_capacity(n);
                let mut targets = Vec::with_capacity(n);
                for _ in 0..n {
                    let x0 = vec![0.5 + rng.normal()];
                    let eps = vec![rng.normal()];
                    inputs.push(forward_corrupt(&x0, j, &eps, &sched).unwrap());
                    targets.push(x0);
                }
                let den = fit_affine_denoiser(&inputs, &targets).unwrap();
                total += (den.gain()[0] - true_gain[0]).abs();
            }
            total / 24.0
        };
        let coarse = err_at(250, 100);
        let fine = err_at(1_000, 200);
        // Monte Carlo error halves when the sample count quadruples
        assert!(
            fine < coarse * 0.75,
            "coarse {coarse} vs fine {fine} (expected ~0.5x)"
        );
    }

    #[test]
    fn trained_fake_score_matches_the_teacher_score_on_teacher_samples() {
        // When the "student outputs" actually come from the teacher, the
        // fitted fake score converges to the teacher's marginal score.
        let sched = rf(2);
        let teacher = TeacherDist::gaussian(vec![1.5], vec![0.5]).unwrap();
        let mut rng = RngStream::new(4);
        let samples: Vec<Vec<f64>> = (0..20_000).map(|_| vec![1.5 + 0.5 * rng.normal()]).collect();
        let fake = train_fake_score(
            &[samples.as_slice(), samples.as_slice()],
            &sched,
            2,
            &mut rng,
        )
        .unwrap();
        assert!(!fake.any_ridge_flagged());
        for stage in 0..2 {
            for bucket in fake.buckets_for_stage(stage) {
                for &x in &[0.2, 1.0, 2.2] {
                    let got = fake.score(bucket, &[x], &sched).unwrap();
                    let want = teacher.score(&[x], bucket.j, &sched).unwrap();
                    assert!(
                        (got[0] - want[0]).abs() < 0.05 * (1.0 + want[0].abs()),
                        "stage {stage} j {} x {x}: {} vs {}",
                        bucket.j,
                        got[0],
                        want[0]
                    );
                }
            }
        }
    }
}
