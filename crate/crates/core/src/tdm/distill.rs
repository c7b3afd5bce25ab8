//! Data-free distillation loop.
//!
//! Per iteration: the student maps a latent batch to clean samples; the fake
//! score model is refit on those samples (closed form, per bucket); then for
//! every stage one bucket timestep is drawn, each sample is re-corrupted to
//! it, and the fake-vs-teacher score gap, contracted through the corruption
//! factor `alpha_j` and the generator's VJP, updates the student by plain
//! gradient descent. No teacher data is ever sampled; the teacher enters
//! only through its score function.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tdm::fake::{train_fake_score, FakeScore};
use crate::tdm::schedule::{forward_corrupt, Schedule, ScheduleKind};
use crate::tdm::student::StudentGenerator;
use crate::tdm::teacher::TeacherDist;

#[derive(Clone, Debug)]
pub struct DistillConfig {
    pub stages: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub schedule: ScheduleKind,
    /// Timestep buckets per stage for the fake score model.
    pub buckets_per_stage: usize,
    /// Abort when the combined moment error exceeds this multiple of the
    /// initial error.
    pub divergence_factor: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            iters: 2000,
            batch: 256,
            lr: 1e-2,
            seed: 0,
            schedule: ScheduleKind::RectifiedFlow,
            buckets_per_stage: 2,
            divergence_factor: 10.0,
        }
    }
}

impl DistillConfig {
    /// Spec'd default step size for the attention student.
    pub fn attn_lr() -> f64 {
        1e-3
    }
}

/// One row of the convergence trace.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Largest per-dimension absolute mean error of the sample batch.
    pub mean_err: f64,
    /// Largest per-dimension absolute standard-deviation error.
    pub cov_err: f64,
    /// Mean fit residual of the fake score model.
    pub fake_residual: f64,
    pub grad_norm: f64,
}

/// Result of a distillation run.
#[derive(Clone, Debug)]
pub struct DistillRun {
    pub student: StudentGenerator,
    pub trace: Vec<TraceRow>,
    /// Set when the run aborted on a moment-error blowup.
    pub diverged_at: Option<usize>,
}

fn batch_latents(dim: usize, batch: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..batch)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect()
}

fn batch_moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0f64; dim];
    for s in samples {
        for (d, &v) in s.iter().enumerate() {
            var[d] += (v - mean[d]) * (v - mean[d]);
        }
    }
    let std = var.iter().map(|&v| (v / n).sqrt()).collect();
    (mean, std)
}

/// TDM gradient estimate for one stage over a latent batch.
///
/// The student produces clean samples, each is re-corrupted to a bucket
/// timestep `j` of the stage, the fake-minus-teacher score gap is evaluated
/// there, and the gap is contracted through `d x_j / d theta = alpha_j ·
/// d x_hat / d theta`. Backpropagation spans exactly the one generator step.
pub fn tdm_gradient(
    student: &StudentGenerator,
    stage: usize,
    latents: &[Vec<f64>],
    fake: &FakeScore,
    teacher: &TeacherDist,
    sched: &Schedule,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if stage >= sched.num_stages() {
        return Err(Error::InvalidArgument(format!(
            "stage {stage} out of range 0..{}",
            sched.num_stages()
        )));
    }
    if latents.is_empty() {
        return Err(Error::InvalidArgument("empty latent batch".into()));
    }
    let buckets = fake.buckets_for_stage(stage);
    let bucket = &buckets[rng.gen_range(buckets.len())];
    let j = bucket.j;
    let alpha_j = sched.alpha(j);
    let weight = sched.weight(stage);
    let scale = weight * alpha_j / latents.len() as f64;

    let mut grad = vec![0.0f64; student.param_vector().len()];
    for z in latents {
        let x_hat = student.forward(z)?;
        let eps: Vec<f64> = (0..x_hat.len()).map(|_| rng.normal()).collect();
        let x_j = forward_corrupt(&x_hat, j, &eps, sched)?;
        let s_fake = fake.score(bucket, &x_j, sched)?;
        let s_real = teacher.score(&x_j, j, sched)?;
        let cot: Vec<f64> = s_fake
            .iter()
            .zip(&s_real)
            .map(|(f, r)| scale * (f - r))
            .collect();
        let g = student.vjp(z, &cot)?;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    Ok(grad)
}

/// Run the alternating fake-score / student-update loop.
pub fn distill(
    teacher: &TeacherDist,
    student: StudentGenerator,
    cfg: &DistillConfig,
) -> Result<DistillRun> {
    if student.dim() != teacher.dim() {
        return Err(Error::ShapeMismatch(format!(
            "student dim {} vs teacher dim {}",
            student.dim(),
            teacher.dim()
        )));
    }
    if cfg.iters == 0 || cfg.batch == 0 {
        return Err(Error::InvalidArgument("iters and batch must be >= 1".into()));
    }
    let sched = Schedule::uniform(cfg.schedule, cfg.stages)?;
    let root = RngStream::new(cfg.seed);
    let (t_mean, t_std) = teacher.moments();
    let mut student = student;
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut diverged_at = None;
    let mut initial_err: Option<f64> = None;

    for iter in 0..cfg.iters {
        let iter_rng = root.split(iter as u64);
        let mut latent_rng = iter_rng.split(0);
        let mut fit_rng = iter_rng.split(1);
        let mut grad_rng = iter_rng.split(2);

        let latents = batch_latents(student.dim(), cfg.batch, &mut latent_rng);
        let samples: Vec<Vec<f64>> = latents
            .iter()
            .map(|z| student.forward(z))
            .collect::<Result<_>>()?;

        let per_stage: Vec<&[Vec<f64>]> = vec![samples.as_slice(); cfg.stages];
        let fake = train_fake_score(&per_stage, &sched, cfg.buckets_per_stage, &mut fit_rng)?;

        let mut grad = vec![0.0f64; student.param_vector().len()];
        for stage in 0..cfg.stages {
            let g = tdm_gradient(
                &student,
                stage,
                &latents,
                &fake,
                teacher,
                &sched,
                &mut grad_rng,
            )?;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        student.apply_update(&grad, cfg.lr)?;

        let (mean, std) = batch_moments(&samples);
        let mean_err = mean
            .iter()
            .zip(&t_mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let cov_err = std
            .iter()
            .zip(&t_std)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        trace.push(TraceRow {
            iter,
            mean_err,
            cov_err,
            fake_residual: fake.mean_residual(),
            grad_norm,
        });

        let err = mean_err + cov_err;
        let scale_ref = t_std.iter().map(|s| s.abs()).sum::<f64>() / t_std.len() as f64;
        let baseline = *initial_err.get_or_insert(err.max(0.1 * scale_ref));
        if !err.is_finite() || err > cfg.divergence_factor * baseline {
            diverged_at = Some(iter);
            break;
        }
    }

    Ok(DistillRun {
        student,
        trace,
        diverged_at,
    })
}

/// Draw `count` samples from the trained student.
pub fn sample_student(
    student: &StudentGenerator,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    batch_latents(student.dim(), count, rng)
        .iter()
        .map(|z| student.forward(z))
        .collect()
}
