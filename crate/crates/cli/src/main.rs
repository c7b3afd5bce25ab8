//! `asablade`: adaptive block-sparse attention experiments from the shell.
//!
//! Tensors move between subcommands as `.btf` files (magic `BTF1`, u32 rank,
//! u32 little-endian extents, row-major little-endian f32 payload). Exit
//! codes: 0 success, 1 validation error, 2 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use asablade_core::btf::{read_btf_file, write_btf_file};
use asablade_core::config::AttnConfig;
use asablade_core::error::Error as CoreError;
use asablade_core::flops::FlopCounter;
use asablade_core::gilbert::{gilbert_order_with, CurveMode, TokenGrid};
use asablade_core::maskgen::{threshold_mask, BlockMask};
use asablade_core::metrics::{psnr, ssim};
use asablade_core::prober::{
    block_sample, dense_importance_map, max_pooled_attn_map, ImportanceMap, Provenance,
};
use asablade_core::rng::RngStream;
use asablade_core::sparse::{sparse_attention, sparse_attention_gt};
use asablade_core::tdm::{
    distill, sample_student, DistillConfig, ScheduleKind, StudentGenerator, TeacherDist,
};
use asablade_core::tensor::relative_error;
use asablade_core::theory::{confidence_percentiles, rank_law_report};
use asablade_core::workload::{
    generate_workload, run_pipeline, sweep, write_sweep_csv, PipelineOptions, Structure, Variant,
    WorkloadSpec,
};

#[derive(Parser)]
#[command(name = "asablade", version, about = "Adaptive block-sparse attention toolbox")]
struct Cli {
    /// Seed override applied to every subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat JSON config mirroring the attention and workload fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output files are resolved relative to this directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Flat file-config: every field optional, command-line flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    block_size: Option<usize>,
    samples_per_block: Option<usize>,
    tau: Option<f64>,
    min_keep: Option<f64>,
    max_keep: Option<f64>,
    pool_window: Option<usize>,
    scale: Option<f64>,
    t: Option<usize>,
    h: Option<usize>,
    w: Option<usize>,
    d: Option<usize>,
    structure: Option<String>,
    corr_len: Option<f64>,
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Frames of the token grid.
    #[arg(long)]
    t: Option<usize>,
    /// Token rows per frame.
    #[arg(long)]
    h: Option<usize>,
    /// Token columns per frame.
    #[arg(long)]
    w: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the forward curve permutation, one raster index per line.
    Gilbert {
        #[command(flatten)]
        grid: GridArgs,
        /// Curve mode: 3d or 2d-frames.
        #[arg(long, default_value = "3d")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the block-importance map from sampled tokens.
    Probe {
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        k: PathBuf,
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Compute the full-attention oracle map instead of probing.
        #[arg(long)]
        oracle: bool,
    },
    /// Build a threshold mask from an importance map.
    Mask {
        #[arg(long)]
        pimp: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        min_keep: Option<f64>,
        #[arg(long)]
        max_keep: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also dump the mask as a CSV heatmap.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run block-sparse attention under a mask.
    Attend {
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        k: PathBuf,
        #[arg(long)]
        v: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Global-token pool window (0 disables the global region).
        #[arg(long, default_value_t = 0)]
        pool_n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Dense reference output for quality metrics in the stats file.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Monte-Carlo verification of the sampling rank law.
    VerifyTheory {
        #[arg(long, default_value_t = 16384)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        k: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill an analytic teacher into a toy one-step student.
    DistillToy {
        /// `gauss:MEAN,STD` or `mix2:W1,M1,S1,M2,S2`.
        #[arg(long, default_value = "gauss:0,1")]
        teacher: String,
        /// `affine` or `attn`.
        #[arg(long, default_value = "affine")]
        student: String,
        #[arg(long, default_value_t = 4)]
        stages: usize,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long)]
        lr: Option<f64>,
        /// Token count of the attention student.
        #[arg(long, default_value_t = 8)]
        attn_tokens: usize,
        /// Token embedding width of the attention student.
        #[arg(long, default_value_t = 4)]
        attn_dim: usize,
        /// Block size of the attention student's mask.
        #[arg(long, default_value_t = 2)]
        attn_block: usize,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Run the reorder -> probe -> mask -> attend pipeline on a synthetic
    /// workload and print one report line per variant.
    Bench {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        structure: Option<String>,
        #[arg(long)]
        corr_len: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        /// Search the threshold for this global sparsity instead of tau.
        #[arg(long)]
        target_sparsity: Option<f64>,
        #[arg(long, default_value = "asa,asa_gt,static_window,dense")]
        variants: String,
        #[arg(long)]
        no_gilbert: bool,
        /// Write the reports as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump the generated Q/K/V as PREFIX.q.btf, PREFIX.k.btf,
        /// PREFIX.v.btf for use with probe/mask/attend.
        #[arg(long)]
        dump_qkv: Option<PathBuf>,
    },
    /// Sweep thresholds and write one CSV row per (tau, variant).
    Sweep {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        structure: Option<String>,
        #[arg(long)]
        corr_len: Option<f64>,
        /// Comma-separated thresholds.
        #[arg(long, default_value = "0.5,0.7,0.8,0.9,0.95,1.0")]
        taus: String,
        #[arg(long, default_value = "asa,static_window")]
        variants: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Everything resolved from defaults, config file and global flags.
struct Ctx {
    cfg: AttnConfig,
    grid: TokenGrid,
    d: usize,
    structure: Structure,
    corr_len: f64,
    seed: u64,
    out_dir: Option<PathBuf>,
}

impl Ctx {
    fn build(cli: &Cli) -> Result<Self, CoreError> {
        let file: FileConfig = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text)
                    .map_err(|e| CoreError::Format(format!("config {}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let mut cfg = AttnConfig::default();
        if let Some(v) = file.block_size {
            cfg.block_size = v;
        }
        if let Some(v) = file.samples_per_block {
            cfg.samples_per_block = v;
        }
        if let Some(v) = file.tau {
            cfg.tau = v;
        }
        if let Some(v) = file.min_keep {
            cfg.min_keep = v;
        }
        if let Some(v) = file.max_keep {
            cfg.max_keep = v;
        }
        if let Some(v) = file.pool_window {
            cfg.pool_window = v;
        }
        if file.scale.is_some() {
            cfg.scale = file.scale;
        }
        let structure = match &file.structure {
            Some(s) => s.parse()?,
            None => Structure::SmoothField,
        };
        Ok(Ctx {
            cfg,
            grid: TokenGrid::new(file.t.unwrap_or(2), file.h.unwrap_or(16), file.w.unwrap_or(16))?,
            d: file.d.unwrap_or(32),
            structure,
            corr_len: file.corr_len.unwrap_or(6.0),
            seed: cli.seed.or(file.seed).unwrap_or(0),
            out_dir: cli.out_dir.clone(),
        })
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        match (&self.out_dir, path.is_absolute()) {
            (Some(dir), false) => dir.join(path),
            _ => path.to_path_buf(),
        }
    }

    fn grid_from(&self, args: &GridArgs) -> Result<TokenGrid, CoreError> {
        TokenGrid::new(
            args.t.unwrap_or(self.grid.t),
            args.h.unwrap_or(self.grid.h),
            args.w.unwrap_or(self.grid.w),
        )
    }
}

fn parse_curve(mode: &str) -> Result<CurveMode, CoreError> {
    match mode {
        "3d" => Ok(CurveMode::Gilbert3d),
        "2d-frames" => Ok(CurveMode::Gilbert2dPerFrame),
        other => Err(CoreError::InvalidArgument(format!(
            "unknown curve mode '{other}' (expected 3d or 2d-frames)"
        ))),
    }
}

fn parse_variants(text: &str) -> Result<Vec<Variant>, CoreError> {
    text.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse())
        .collect()
}

fn parse_taus(text: &str) -> Result<Vec<f64>, CoreError> {
    text.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CoreError::InvalidArgument(format!("bad tau '{s}': {e}")))
        })
        .collect()
}

fn parse_teacher(text: &str) -> Result<TeacherDist, CoreError> {
    let (kind, rest) = text.split_once(':').ok_or_else(|| {
        CoreError::InvalidArgument(format!(
            "teacher '{text}' must look like gauss:MEAN,STD or mix2:W1,M1,S1,M2,S2"
        ))
    })?;
    let nums: Vec<f64> = rest
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CoreError::InvalidArgument(format!("bad teacher number '{s}': {e}")))
        })
        .collect::<Result<_, _>>()?;
    match (kind, nums.as_slice()) {
        ("gauss", [mean, std]) => TeacherDist::gaussian(vec![*mean], vec![*std]),
        ("mix2", [w1, m1, s1, m2, s2]) => {
            TeacherDist::mixture2(*w1, vec![*m1], vec![*s1], vec![*m2], vec![*s2])
        }
        _ => Err(CoreError::InvalidArgument(format!(
            "teacher '{text}' not recognized"
        ))),
    }
}

fn broadcast_teacher(teacher: TeacherDist, dim: usize) -> Result<TeacherDist, CoreError> {
    if teacher.dim() == dim {
        return Ok(teacher);
    }
    if teacher.dim() != 1 {
        return Err(CoreError::ShapeMismatch(format!(
            "teacher dim {} vs student dim {dim}",
            teacher.dim()
        )));
    }
    match &teacher {
        TeacherDist::Gaussian { mean, std } => {
            TeacherDist::gaussian(vec![mean[0]; dim], vec![std[0]; dim])
        }
        TeacherDist::Mixture2 {
            weight1,
            mean1,
            std1,
            mean2,
            std2,
        } => TeacherDist::mixture2(
            *weight1,
            vec![mean1[0]; dim],
            vec![std1[0]; dim],
            vec![mean2[0]; dim],
            vec![std2[0]; dim],
        ),
    }
}

#[derive(Serialize)]
struct AttendStats {
    effective_sparsity: f64,
    flops: FlopCounter,
    flops_total: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rel_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ssim: Option<f64>,
}

#[derive(Serialize)]
struct TheoryReport {
    rank_law: asablade_core::theory::RankLawReport,
    confidence: asablade_core::theory::PercentileReport,
}

fn run(cli: Cli) -> Result<(), CoreError> {
    let ctx = Ctx::build(&cli)?;
    match cli.command {
        Command::Gilbert { grid, mode, out } => {
            let grid = ctx.grid_from(&grid)?;
            let perm = gilbert_order_with(&grid, parse_curve(&mode)?)?;
            let text: String = perm.forward().iter().map(|i| format!("{i}\n")).collect();
            std::fs::write(ctx.resolve(&out), text)?;
            println!(
                "gilbert {}x{}x{} ({mode}): {} positions -> {}",
                grid.t,
                grid.h,
                grid.w,
                perm.len(),
                out.display()
            );
        }
        Command::Probe {
            q,
            k,
            block,
            samples,
            out,
            oracle,
        } => {
            let mut cfg = ctx.cfg;
            if let Some(b) = block {
                cfg.block_size = b;
            }
            if let Some(s) = samples {
                cfg.samples_per_block = s;
            }
            cfg.validate()?;
            let q = read_btf_file(ctx.resolve(&q))?;
            let k = read_btf_file(ctx.resolve(&k))?;
            let mut flops = FlopCounter::new();
            let map = if oracle {
                dense_importance_map(&q, &k, &cfg, &mut flops)?
            } else {
                let rng = RngStream::new(ctx.seed);
                let qs = block_sample(&q, &cfg, &rng.split(1))?;
                let ks = block_sample(&k, &cfg, &rng.split(2))?;
                max_pooled_attn_map(&qs, &ks, &cfg, &mut flops)?
            };
            write_btf_file(ctx.resolve(&out), &map.values)?;
            println!(
                "{} importance map {}x{} ({} flops) -> {}",
                if oracle { "oracle" } else { "probed" },
                map.num_blocks(),
                map.num_blocks(),
                flops.total(),
                out.display()
            );
        }
        Command::Mask {
            pimp,
            tau,
            min_keep,
            max_keep,
            out,
            csv,
        } => {
            let mut cfg = ctx.cfg;
            if let Some(v) = tau {
                cfg.tau = v;
            }
            if let Some(v) = min_keep {
                cfg.min_keep = v;
            }
            if let Some(v) = max_keep {
                cfg.max_keep = v;
            }
            let values = read_btf_file(ctx.resolve(&pimp))?;
            let map = ImportanceMap {
                values,
                provenance: Provenance::SparseProbe,
            };
            let mask = threshold_mask(&map, &cfg)?;
            write_btf_file(ctx.resolve(&out), &mask.to_tensor())?;
            if let Some(csv_path) = csv {
                let mut text = String::new();
                for i in 0..mask.num_blocks() {
                    let row: Vec<&str> = mask
                        .row(i)
                        .iter()
                        .map(|&b| if b { "1" } else { "0" })
                        .collect();
                    text.push_str(&row.join(","));
                    text.push('\n');
                }
                std::fs::write(ctx.resolve(&csv_path), text)?;
            }
            if !mask.degenerate_rows().is_empty() {
                eprintln!(
                    "warning: {} all-zero rows fell back to the diagonal block",
                    mask.degenerate_rows().len()
                );
            }
            println!(
                "mask {0}x{0}: sparsity {1:.4} -> {2}",
                mask.num_blocks(),
                mask.sparsity(),
                out.display()
            );
        }
        Command::Attend {
            q,
            k,
            v,
            mask,
            pool_n,
            out,
            stats,
            reference,
        } => {
            let q = read_btf_file(ctx.resolve(&q))?;
            let k = read_btf_file(ctx.resolve(&k))?;
            let v = read_btf_file(ctx.resolve(&v))?;
            let mask = BlockMask::from_tensor(&read_btf_file(ctx.resolve(&mask))?)?;
            let (n, _) = q.dims2()?;
            let block = n.div_ceil(mask.num_blocks());
            let cfg = AttnConfig {
                pool_window: pool_n,
                scale: ctx.cfg.scale,
                ..AttnConfig::default().with_block(block, block)
            };
            let result = if pool_n > 0 {
                sparse_attention_gt(&q, &k, &v, &mask, &cfg)?
            } else {
                sparse_attention(&q, &k, &v, &mask, &cfg)?
            };
            write_btf_file(ctx.resolve(&out), &result.out)?;
            let mut report = AttendStats {
                effective_sparsity: result.effective_sparsity,
                flops: result.flops,
                flops_total: result.flops.total(),
                rel_error: None,
                psnr_db: None,
                ssim: None,
            };
            if let Some(ref_path) = reference {
                let reference = read_btf_file(ctx.resolve(&ref_path))?;
                let lo = reference.data().iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = reference
                    .data()
                    .iter()
                    .cloned()
                    .fold(f32::NEG_INFINITY, f32::max);
                let peak = ((hi - lo) as f64).max(1e-6);
                report.rel_error = Some(relative_error(&result.out, &reference)?);
                report.psnr_db = Some(psnr(&result.out, &reference, peak)?);
                if reference.shape().len() == 2 {
                    report.ssim = Some(ssim(&result.out, &reference, peak)?);
                }
            }
            if let Some(stats_path) = stats {
                std::fs::write(
                    ctx.resolve(&stats_path),
                    serde_json::to_string_pretty(&report)
                        .map_err(|e| CoreError::Format(e.to_string()))?,
                )?;
            }
            println!(
                "attended {n} rows, effective sparsity {:.4}, {} flops -> {}",
                result.effective_sparsity,
                result.flops.total(),
                out.display()
            );
        }
        Command::VerifyTheory { n, k, trials, out } => {
            let rng = RngStream::new(ctx.seed);
            let rank_law = rank_law_report(n, k, trials, &rng.split(1))?;
            let confidence = confidence_percentiles(n, k, trials, &rng.split(2))?;
            println!(
                "rank law n={n} k={k}: empirical mean {:.3} vs analytic {:.3}, empirical var {:.1} vs analytic {:.1}",
                rank_law.empirical_mean_rank,
                rank_law.analytic_mean_rank,
                rank_law.empirical_var_rank,
                rank_law.analytic_var_rank
            );
            for b in &confidence.bounds {
                println!(
                    "  {:>2.0}% of trials rank <= {} (normal approx {:.1}, captures the {:.2}% percentile)",
                    b.confidence * 100.0,
                    b.empirical_rank,
                    b.normal_rank,
                    b.population_percentile * 100.0
                );
            }
            let report = TheoryReport {
                rank_law,
                confidence,
            };
            std::fs::write(
                ctx.resolve(&out),
                serde_json::to_string_pretty(&report)
                    .map_err(|e| CoreError::Format(e.to_string()))?,
            )?;
        }
        Command::DistillToy {
            teacher,
            student,
            stages,
            iters,
            batch,
            lr,
            attn_tokens,
            attn_dim,
            attn_block,
            trace,
        } => {
            let teacher_dist = parse_teacher(&teacher)?;
            let (generator, default_lr) = match student.as_str() {
                "affine" => (StudentGenerator::affine(teacher_dist.dim())?, 1e-2),
                "attn" => {
                    // mask comes from the threshold generator over a probed
                    // synthetic token workload
                    let spec = WorkloadSpec {
                        grid: TokenGrid::new(1, 1, attn_tokens)?,
                        d: attn_dim,
                        structure: Structure::SmoothField,
                        corr_len: 2.0,
                        seed: ctx.seed,
                    };
                    let (q, kk, _) = generate_workload(&spec)?;
                    let cfg = AttnConfig {
                        tau: 0.8,
                        ..AttnConfig::default().with_block(attn_block, attn_block)
                    };
                    let map = dense_importance_map(&q, &kk, &cfg, &mut FlopCounter::new())?;
                    let mask = threshold_mask(&map, &cfg)?;
                    let mut rng = RngStream::new(ctx.seed ^ 0xa77);
                    (
                        StudentGenerator::attn(attn_tokens, attn_dim, mask, attn_block, &mut rng)?,
                        DistillConfig::attn_lr(),
                    )
                }
                other => {
                    return Err(CoreError::InvalidArgument(format!(
                        "unknown student '{other}' (expected affine or attn)"
                    )))
                }
            };
            let teacher_dist = broadcast_teacher(teacher_dist, generator.dim())?;
            let cfg = DistillConfig {
                stages,
                iters,
                batch,
                lr: lr.unwrap_or(default_lr),
                seed: ctx.seed,
                schedule: ScheduleKind::RectifiedFlow,
                ..Default::default()
            };
            let run = distill(&teacher_dist, generator, &cfg)?;

            let mut text = String::from("iter,mean_err,cov_err,fake_residual,grad_norm\n");
            for row in &run.trace {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.iter, row.mean_err, row.cov_err, row.fake_residual, row.grad_norm
                ));
            }
            std::fs::write(ctx.resolve(&trace), text)?;

            if let Some(iter) = run.diverged_at {
                return Err(CoreError::Divergence(format!(
                    "distillation aborted at iteration {iter}; trace written to {}",
                    trace.display()
                )));
            }
            let mut rng = RngStream::new(ctx.seed ^ 0xe7a1);
            let samples = sample_student(&run.student, 50_000, &mut rng)?;
            let dim = run.student.dim();
            let mut mean = vec![0.0f64; dim];
            for s in &samples {
                for (m, v) in mean.iter_mut().zip(s) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= samples.len() as f64;
            }
            let var0 = samples
                .iter()
                .map(|s| (s[0] - mean[0]) * (s[0] - mean[0]))
                .sum::<f64>()
                / samples.len() as f64;
            let (t_mean, t_std) = teacher_dist.moments();
            println!(
                "distilled {student}: sample mean {:.4} (teacher {:.4}), std {:.4} (teacher {:.4}); {} iterations -> {}",
                mean[0],
                t_mean[0],
                var0.sqrt(),
                t_std[0],
                run.trace.len(),
                trace.display()
            );
        }
        Command::Bench {
            grid,
            d,
            block,
            samples,
            structure,
            corr_len,
            tau,
            target_sparsity,
            variants,
            no_gilbert,
            out,
            dump_qkv,
        } => {
            let spec = WorkloadSpec {
                grid: ctx.grid_from(&grid)?,
                d: d.unwrap_or(ctx.d),
                structure: match structure {
                    Some(s) => s.parse()?,
                    None => ctx.structure,
                },
                corr_len: corr_len.unwrap_or(ctx.corr_len),
                seed: ctx.seed,
            };
            let mut cfg = match tau {
                Some(t) => ctx.cfg.with_tau(t),
                None => ctx.cfg,
            };
            if let Some(b) = block {
                cfg.block_size = b;
            }
            if let Some(k) = samples {
                cfg.samples_per_block = k;
            }
            cfg.validate()?;
            let opts = PipelineOptions {
                cfg,
                use_gilbert: !no_gilbert,
                curve: CurveMode::Gilbert3d,
                target_sparsity,
            };
            if let Some(prefix) = &dump_qkv {
                let (q, k, v) = generate_workload(&spec)?;
                let base = ctx.resolve(prefix);
                let with_ext = |ext: &str| {
                    let mut p = base.as_os_str().to_owned();
                    p.push(ext);
                    PathBuf::from(p)
                };
                write_btf_file(with_ext(".q.btf"), &q)?;
                write_btf_file(with_ext(".k.btf"), &k)?;
                write_btf_file(with_ext(".v.btf"), &v)?;
            }
            let reports = run_pipeline(&spec, &opts, &parse_variants(&variants)?)?;
            println!(
                "{:<14} {:>6} {:>9} {:>10} {:>9} {:>8} {:>12} {:>8}",
                "variant", "tau", "sparsity", "rel_error", "psnr_db", "ssim", "flops_ratio", "overlap"
            );
            for r in &reports {
                println!(
                    "{:<14} {:>6.3} {:>9.4} {:>10.3e} {:>9.2} {:>8.4} {:>12.4} {:>8.3}",
                    r.variant.name(),
                    r.tau,
                    r.sparsity,
                    r.rel_error,
                    r.psnr_db,
                    r.ssim,
                    r.flops_sparse as f64 / r.flops_dense as f64,
                    r.mask_overlap_vs_oracle
                );
            }
            if let Some(path) = out {
                std::fs::write(
                    ctx.resolve(&path),
                    serde_json::to_string_pretty(&reports)
                        .map_err(|e| CoreError::Format(e.to_string()))?,
                )?;
            }
        }
        Command::Sweep {
            grid,
            d,
            block,
            samples,
            structure,
            corr_len,
            taus,
            variants,
            out,
        } => {
            let spec = WorkloadSpec {
                grid: ctx.grid_from(&grid)?,
                d: d.unwrap_or(ctx.d),
                structure: match structure {
                    Some(s) => s.parse()?,
                    None => ctx.structure,
                },
                corr_len: corr_len.unwrap_or(ctx.corr_len),
                seed: ctx.seed,
            };
            let mut cfg = ctx.cfg;
            if let Some(b) = block {
                cfg.block_size = b;
            }
            if let Some(k) = samples {
                cfg.samples_per_block = k;
            }
            cfg.validate()?;
            let opts = PipelineOptions {
                cfg,
                ..Default::default()
            };
            let rows = sweep(&spec, &opts, &parse_taus(&taus)?, &parse_variants(&variants)?)?;
            let file = std::fs::File::create(ctx.resolve(&out))?;
            write_sweep_csv(file, &rows)?;
            println!("{} sweep rows -> {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version are successful exits
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(if e.is_validation() { 1 } else { 2 });
    }
}
