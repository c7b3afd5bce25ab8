//! Synthetic workloads and end-to-end pipeline runs.
//!
//! Workloads stand in for video latents: a smooth field gives nearby tokens
//! similar keys (so masks pick up local structure), a block motif gives
//! hard segment boundaries, uniform collapses every logit to the same value
//! and the adversarial spike plants a few dominating keys. Runs execute
//! reorder → probe → mask → attend → inverse reorder and score each variant
//! against the dense reference.

use serde::{Deserialize, Serialize};

use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::gilbert::{
    apply_permutation, gilbert_order_with, undo_permutation, CurveMode, Permutation, TokenGrid,
};
use crate::maskgen::{
    mask_overlap, mask_for_target_sparsity, static_window_mask, threshold_mask, BlockMask,
};
use crate::metrics::{psnr, ssim};
use crate::par;
use crate::prober::{block_sample, dense_importance_map, max_pooled_attn_map};
use crate::rng::RngStream;
use crate::sparse::{sparse_attention, sparse_attention_gt};
use crate::flops::FlopCounter;
use crate::tensor::{relative_error, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    #[default]
    SmoothField,
    BlockMotif,
    Uniform,
    AdversarialSpike,
}

impl std::str::FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth_field" => Ok(Self::SmoothField),
            "block_motif" => Ok(Self::BlockMotif),
            "uniform" => Ok(Self::Uniform),
            "adversarial_spike" => Ok(Self::AdversarialSpike),
            other => Err(Error::InvalidArgument(format!(
                "unknown structure '{other}'"
            ))),
        }
    }
}

/// Synthetic workload description; fully determined by its fields.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub grid: TokenGrid,
    /// Head dimension.
    pub d: usize,
    pub structure: Structure,
    /// Spatial correlation length in tokens; `inf` degenerates to rank one.
    pub corr_len: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("head dim must be >= 1".into()));
        }
        if !(self.corr_len > 0.0) {
            return Err(Error::InvalidArgument("corr_len must be positive".into()));
        }
        Ok(())
    }
}

const FIELD_COMPONENTS: usize = 6;
const FIELD_AMPLITUDE: f64 = 1.6;

/// Low-pass random field over the grid: a small sum of random-direction
/// cosines with frequencies bounded by `1/corr_len` cycles per token.
fn field_channel(grid: &TokenGrid, corr_len: f64, rng: &mut RngStream, out: &mut [f32]) {
    let max_freq = if corr_len.is_finite() { 1.0 / corr_len } else { 0.0 };
    let amp = FIELD_AMPLITUDE * (2.0 / FIELD_COMPONENTS as f64).sqrt();
    let comps: Vec<(f64, f64, f64, f64, f64)> = (0..FIELD_COMPONENTS)
        .map(|_| {
            let f = max_freq * rng.next_f64();
            let theta = std::f64::consts::TAU * rng.next_f64();
            let zphi = std::f64::consts::PI * rng.next_f64();
            // random 3-direction scaled by the drawn frequency
            let fx = f * zphi.sin() * theta.cos();
            let fy = f * zphi.sin() * theta.sin();
            let ft = f * zphi.cos();
            let phase = std::f64::consts::TAU * rng.next_f64();
            (fx, fy, ft, phase, amp * rng.normal())
        })
        .collect();
    for (idx, slot) in out.iter_mut().enumerate() {
        let (t, y, x) = grid.coord_of(idx);
        let mut acc = 0.0f64;
        for &(fx, fy, ft, phase, a) in &comps {
            acc += a
                * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64 + ft * t as f64)
                    + phase)
                    .cos();
        }
        *slot = acc as f32;
    }
}

fn generate_matrix(spec: &WorkloadSpec, which: u64) -> Result<Tensor> {
    let n = spec.grid.len();
    let d = spec.d;
    let root = RngStream::new(spec.seed).split(which);
    let mut data = vec![0.0f32; n * d];
    match spec.structure {
        Structure::Uniform => {
            let mut rng = root.split(0);
            for c in 0..d {
                let v = rng.normal() as f32;
                for r in 0..n {
                    data[r * d + c] = v;
                }
            }
        }
        Structure::SmoothField => {
            for c in 0..d {
                let mut rng = root.split(c as u64);
                let mut col = vec![0.0f32; n];
                field_channel(&spec.grid, spec.corr_len, &mut rng, &mut col);
                for r in 0..n {
                    data[r * d + c] = col[r];
                }
            }
        }
        Structure::BlockMotif => {
            let motifs = 4usize;
            let run = (spec.corr_len.max(1.0) as usize).max(1);
            let mut mrng = root.split(0);
            let motif_vecs: Vec<Vec<f32>> = (0..motifs)
                .map(|_| (0..d).map(|_| (1.2 * mrng.normal()) as f32).collect())
                .collect();
            let mut nrng = root.split(1);
            for r in 0..n {
                let m = (r / run) % motifs;
                for c in 0..d {
                    data[r * d + c] = motif_vecs[m][c] + 0.05 * nrng.normal() as f32;
                }
            }
        }
        Structure::AdversarialSpike => {
            for c in 0..d {
                let mut rng = root.split(c as u64);
                let mut col = vec![0.0f32; n];
                field_channel(&spec.grid, spec.corr_len, &mut rng, &mut col);
                for r in 0..n {
                    data[r * d + c] = col[r];
                }
            }
            let mut srng = root.split(u64::MAX);
            let spikes = (n / 64).max(1);
            for row in srng.sample_without_replacement(n, spikes)? {
                for c in 0..d {
                    data[row * d + c] *= 25.0;
                }
            }
        }
    }
    Tensor::new(vec![n, d], data)
}

/// Deterministic Q, K, V for the spec.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<(Tensor, Tensor, Tensor)> {
    spec.validate()?;
    let q = generate_matrix(spec, 1)?;
    let k = generate_matrix(spec, 2)?;
    let v = generate_matrix(spec, 3)?;
    q.validate_finite("workload Q")?;
    k.validate_finite("workload K")?;
    v.validate_finite("workload V")?;
    Ok((q, k, v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Asa,
    AsaGt,
    StaticWindow,
    Dense,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asa" => Ok(Self::Asa),
            "asa_gt" => Ok(Self::AsaGt),
            "static_window" => Ok(Self::StaticWindow),
            "dense" => Ok(Self::Dense),
            other => Err(Error::InvalidArgument(format!("unknown variant '{other}'"))),
        }
    }
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Asa => "asa",
            Self::AsaGt => "asa_gt",
            Self::StaticWindow => "static_window",
            Self::Dense => "dense",
        }
    }
}

/// Pipeline knobs beyond the attention config itself.
#[derive(Clone, Copy, Debug)]
pub struct PipelineOptions {
    pub cfg: AttnConfig,
    pub use_gilbert: bool,
    pub curve: CurveMode,
    /// When set, the mask threshold is searched to hit this sparsity
    /// instead of using `cfg.tau` directly.
    pub target_sparsity: Option<f64>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            cfg: AttnConfig::default(),
            use_gilbert: true,
            curve: CurveMode::Gilbert3d,
            target_sparsity: None,
        }
    }
}

/// Quality and cost report for one variant.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub variant: Variant,
    pub tau: f64,
    pub sparsity: f64,
    pub rel_error: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub flops_dense: u64,
    pub flops_sparse: u64,
    pub mask_overlap_vs_oracle: f64,
}

/// Mean per-frame SSIM of the channel-averaged outputs on the token grid.
fn grid_ssim(out: &Tensor, reference: &Tensor, grid: &TokenGrid, peak: f64) -> Result<f64> {
    let (_, d) = out.dims2()?;
    let frame_image = |t: &Tensor, f: usize| -> Result<Tensor> {
        let mut img = vec![0.0f32; grid.h * grid.w];
        for y in 0..grid.h {
            for x in 0..grid.w {
                let row = t.row(grid.index_of(f, y, x));
                img[y * grid.w + x] =
                    (row.iter().map(|&v| v as f64).sum::<f64>() / d as f64) as f32;
            }
        }
        Tensor::new(vec![grid.h, grid.w], img)
    };
    let mut total = 0.0;
    for f in 0..grid.t {
        total += ssim(&frame_image(out, f)?, &frame_image(reference, f)?, peak)?;
    }
    Ok(total / grid.t as f64)
}

struct PreparedRun {
    qp: Tensor,
    kp: Tensor,
    vp: Tensor,
    perm: Permutation,
    dense_ref: Tensor,
    dense_flops: FlopCounter,
    probe_mask: BlockMask,
    oracle_mask: BlockMask,
    tau_used: f64,
}

fn prepare(spec: &WorkloadSpec, opts: &PipelineOptions) -> Result<PreparedRun> {
    opts.cfg.validate()?;
    let (q, k, v) = generate_workload(spec)?;
    let n = spec.grid.len();
    let perm = if opts.use_gilbert {
        gilbert_order_with(&spec.grid, opts.curve)?
    } else {
        Permutation::identity(n)
    };
    let qp = apply_permutation(&q, &perm)?;
    let kp = apply_permutation(&k, &perm)?;
    let vp = apply_permutation(&v, &perm)?;

    let n_b = opts.cfg.num_blocks(n);
    let dense = sparse_attention(&qp, &kp, &vp, &BlockMask::all_ones(n_b), &opts.cfg)?;

    let rng = RngStream::new(spec.seed ^ 0x5eed);
    let mut probe_flops = FlopCounter::new();
    let qs = block_sample(&qp, &opts.cfg, &rng.split(1))?;
    let ks = block_sample(&kp, &opts.cfg, &rng.split(2))?;
    let probed = max_pooled_attn_map(&qs, &ks, &opts.cfg, &mut probe_flops)?;
    let oracle_map = dense_importance_map(&qp, &kp, &opts.cfg, &mut FlopCounter::new())?;

    let (probe_mask, tau_used) = match opts.target_sparsity {
        Some(target) => mask_for_target_sparsity(&probed, &opts.cfg, target)?,
        None => (threshold_mask(&probed, &opts.cfg)?, opts.cfg.tau),
    };
    let oracle_mask = threshold_mask(&oracle_map, &opts.cfg.with_tau(tau_used))?;

    Ok(PreparedRun {
        qp,
        kp,
        vp,
        perm,
        dense_ref: dense.out,
        dense_flops: dense.flops,
        probe_mask,
        oracle_mask,
        tau_used,
    })
}

/// Static window whose banded sparsity lands nearest to `target`.
fn matched_static_mask(n_b: usize, target: f64) -> Result<BlockMask> {
    let mut best: Option<(BlockMask, f64)> = None;
    for window in (1..=2 * n_b).step_by(2) {
        let mask = static_window_mask(n_b, window)?;
        let gap = (mask.sparsity() - target).abs();
        if best.as_ref().map(|(_, g)| gap < *g).unwrap_or(true) {
            best = Some((mask, gap));
        }
    }
    Ok(best.expect("n_b >= 1 yields at least one window").0)
}

/// Run the full pipeline for each requested variant.
pub fn run_pipeline(
    spec: &WorkloadSpec,
    opts: &PipelineOptions,
    variants: &[Variant],
) -> Result<Vec<RunReport>> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no variants requested".into()));
    }
    let prep = prepare(spec, opts)?;
    let n_b = prep.probe_mask.num_blocks();
    let reference = undo_permutation(&prep.dense_ref, &prep.perm)?;
    let ref_min = reference.data().iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let ref_max = reference.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let peak = (ref_max - ref_min).max(1e-6);

    let mut reports = Vec::with_capacity(variants.len());
    for &variant in variants {
        let (mask, attn) = match variant {
            Variant::Asa => {
                let out = sparse_attention(&prep.qp, &prep.kp, &prep.vp, &prep.probe_mask, &opts.cfg)?;
                (prep.probe_mask.clone(), out)
            }
            Variant::AsaGt => {
                let cfg = if opts.cfg.pool_window == 0 {
                    opts.cfg.with_pool_window((opts.cfg.block_size / 8).max(1))
                } else {
                    opts.cfg
                };
                let out = sparse_attention_gt(&prep.qp, &prep.kp, &prep.vp, &prep.probe_mask, &cfg)?;
                (prep.probe_mask.clone(), out)
            }
            Variant::StaticWindow => {
                let mask = matched_static_mask(n_b, prep.probe_mask.sparsity())?;
                let out = sparse_attention(&prep.qp, &prep.kp, &prep.vp, &mask, &opts.cfg)?;
                (mask, out)
            }
            Variant::Dense => {
                let mask = BlockMask::all_ones(n_b);
                let out = sparse_attention(&prep.qp, &prep.kp, &prep.vp, &mask, &opts.cfg)?;
                (mask, out)
            }
        };
        let out = undo_permutation(&attn.out, &prep.perm)?;
        reports.push(RunReport {
            variant,
            tau: prep.tau_used,
            sparsity: attn.effective_sparsity,
            rel_error: relative_error(&out, &reference)?,
            psnr_db: psnr(&out, &reference, peak)?,
            ssim: grid_ssim(&out, &reference, &spec.grid, peak)?,
            flops_dense: prep.dense_flops.total(),
            flops_sparse: attn.flops.total(),
            mask_overlap_vs_oracle: mask_overlap(&mask, &prep.oracle_mask)?,
        });
    }
    Ok(reports)
}

/// One CSV row of a threshold sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub variant: String,
    pub sparsity: f64,
    pub rel_error: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub flops_ratio: f64,
    pub overlap: f64,
}

/// Run every `(tau, variant)` combination; sweep points run concurrently.
pub fn sweep(
    spec: &WorkloadSpec,
    opts: &PipelineOptions,
    taus: &[f64],
    variants: &[Variant],
) -> Result<Vec<SweepRow>> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("no tau values given".into()));
    }
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no variants requested".into()));
    }
    let results = par::map_indexed(taus.len(), |i| {
        let opts_i = PipelineOptions {
            cfg: opts.cfg.with_tau(taus[i]),
            target_sparsity: None,
            ..*opts
        };
        run_pipeline(spec, &opts_i, variants).map(|reports| {
            reports
                .into_iter()
                .map(|r| SweepRow {
                    tau: taus[i],
                    variant: r.variant.name().to_string(),
                    sparsity: r.sparsity,
                    rel_error: r.rel_error,
                    psnr: r.psnr_db,
                    ssim: r.ssim,
                    flops_ratio: r.flops_sparse as f64 / r.flops_dense as f64,
                    overlap: r.mask_overlap_vs_oracle,
                })
                .collect::<Vec<_>>()
        })
    });
    let mut rows = Vec::with_capacity(taus.len() * variants.len());
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Write sweep rows with the fixed column layout.
pub fn write_sweep_csv<W: std::io::Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "tau",
        "variant",
        "sparsity",
        "rel_error",
        "psnr",
        "ssim",
        "flops_ratio",
        "overlap",
    ])
    .map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        wtr.write_record([
            format!("{}", r.tau),
            r.variant.clone(),
            format!("{}", r.sparsity),
            format!("{}", r.rel_error),
            format!("{}", r.psnr),
            format!("{}", r.ssim),
            format!("{}", r.flops_ratio),
            format!("{}", r.overlap),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}
