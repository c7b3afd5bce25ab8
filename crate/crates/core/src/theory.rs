//! Executable verification of the prober's sampling guarantees.
//!
//! Uniformly sampling `k` of `n` i.i.d. values, the sample maximum has
//! expected population rank `(n+1)/(k+1)` with variance
//! `k(n-k)(n+1) / ((k+1)^2 (k+2))` (rank 1 is the global maximum). The
//! simulation works on ranks directly, drawing `k` distinct ranks and
//! taking the minimum; this is exact and immune to floating-point ties.
//! The proportionality check runs the probed and full importance paths side
//! by side and reports how close their ratio is to the nominal `b/k` factor
//! and whether both row-normalized maps select the same mask.

use serde::Serialize;

use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::flops::FlopCounter;
use crate::maskgen::{mask_overlap, threshold_mask};
use crate::par;
use crate::prober::{block_sample, dense_importance_map, max_pooled_attn_map};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Rank-law Monte Carlo summary.
#[derive(Clone, Debug, Serialize)]
pub struct RankLawReport {
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub empirical_mean_rank: f64,
    pub empirical_var_rank: f64,
    pub analytic_mean_rank: f64,
    pub analytic_var_rank: f64,
}

pub fn analytic_mean_rank(n: usize, k: usize) -> f64 {
    (n as f64 + 1.0) / (k as f64 + 1.0)
}

pub fn analytic_var_rank(n: usize, k: usize) -> f64 {
    let (n, k) = (n as f64, k as f64);
    k * (n - k) * (n + 1.0) / ((k + 1.0) * (k + 1.0) * (k + 2.0))
}

/// Population rank (1 = maximum) of the best of `k` uniform draws without
/// replacement from `n` items.
pub fn sample_max_rank_trial(n: usize, k: usize, rng: &mut RngStream) -> Result<usize> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    let picks = rng.sample_without_replacement(n, k)?;
    // ranks are 1-based: index 0 is the maximum
    Ok(picks[0] + 1)
}

fn collect_ranks(n: usize, k: usize, trials: usize, rng: &RngStream) -> Result<Vec<u32>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let ranks = par::map_indexed(trials, |t| {
        let mut trial_rng = rng.split(t as u64);
        sample_max_rank_trial(n, k, &mut trial_rng).map(|r| r as u32)
    });
    ranks.into_iter().collect()
}

/// Monte Carlo estimate of the rank law; trials run on independent split
/// streams so the result is identical at any thread count.
pub fn rank_law_report(
    n: usize,
    k: usize,
    trials: usize,
    rng: &RngStream,
) -> Result<RankLawReport> {
    let ranks = collect_ranks(n, k, trials, rng)?;
    let mut sum: u128 = 0;
    let mut sum_sq: u128 = 0;
    for &r in &ranks {
        sum += r as u128;
        sum_sq += (r as u128) * (r as u128);
    }
    let t = trials as f64;
    let mean = sum as f64 / t;
    let var = if trials > 1 {
        (sum_sq as f64 - t * mean * mean) / (t - 1.0)
    } else {
        0.0
    };
    Ok(RankLawReport {
        n,
        k,
        trials,
        empirical_mean_rank: mean,
        empirical_var_rank: var,
        analytic_mean_rank: analytic_mean_rank(n, k),
        analytic_var_rank: analytic_var_rank(n, k),
    })
}

/// One confidence level of the rank distribution.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PercentileBound {
    /// Confidence level in (0, 1).
    pub confidence: f64,
    /// Empirical upper rank bound (quantile of the trial ranks).
    pub empirical_rank: usize,
    /// Normal-approximation bound `mean + z·sigma`, clamped to `[1, n]`.
    pub normal_rank: f64,
    /// Population percentile the empirical bound still captures.
    pub population_percentile: f64,
}

/// Confidence table for the sample-maximum rank.
#[derive(Clone, Debug, Serialize)]
pub struct PercentileReport {
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub mean_rank: f64,
    /// Population percentile of the mean rank.
    pub mean_percentile: f64,
    pub bounds: Vec<PercentileBound>,
}

const CONFIDENCE_LEVELS: [(f64, f64); 3] = [(0.68, 1.0), (0.95, 1.96), (0.99, 2.576)];

/// Empirical 68/95/99% upper rank bounds with their normal approximations
/// and captured population percentiles.
pub fn confidence_percentiles(
    n: usize,
    k: usize,
    trials: usize,
    rng: &RngStream,
) -> Result<PercentileReport> {
    let mut ranks = collect_ranks(n, k, trials, rng)?;
    ranks.sort_unstable();
    let mean = ranks.iter().map(|&r| r as f64).sum::<f64>() / trials as f64;
    let sigma = analytic_var_rank(n, k).sqrt();
    let bounds = CONFIDENCE_LEVELS
        .iter()
        .map(|&(conf, z)| {
            let idx = ((conf * trials as f64).ceil() as usize).clamp(1, trials) - 1;
            let empirical_rank = ranks[idx] as usize;
            PercentileBound {
                confidence: conf,
                empirical_rank,
                normal_rank: (analytic_mean_rank(n, k) + z * sigma).clamp(1.0, n as f64),
                population_percentile: 1.0 - empirical_rank as f64 / n as f64,
            }
        })
        .collect();
    Ok(PercentileReport {
        n,
        k,
        trials,
        mean_rank: mean,
        mean_percentile: 1.0 - mean / n as f64,
        bounds,
    })
}

/// Side-by-side diagnostics of the probed vs full importance paths.
#[derive(Clone, Debug, Serialize)]
pub struct ProportionalityReport {
    pub block_size: usize,
    pub samples_per_block: usize,
    /// `b / k`, the factor the probed map should carry.
    pub nominal_factor: f64,
    pub entry_ratio_mean: f64,
    pub entry_ratio_min: f64,
    pub entry_ratio_max: f64,
    /// Mean of per-row sampled-to-full unnormalized softmax mass, nominally `k/b`.
    pub row_sum_ratio_mean: f64,
    /// Largest entry difference between the row-normalized maps.
    pub normalized_map_max_diff: f64,
    /// Overlap of the threshold masks built from both maps at `cfg.tau`.
    pub mask_overlap: f64,
}

/// Computes the probed and oracle importance maps for `(q, k)` and reports
/// the scaling diagnostics. Constructed uniform-logit inputs reproduce the
/// nominal factor exactly; on general inputs the numbers are a diagnostic,
/// not an assertion.
pub fn proportionality_check(
    q: &Tensor,
    k: &Tensor,
    cfg: &AttnConfig,
    rng: &RngStream,
) -> Result<ProportionalityReport> {
    cfg.validate()?;
    let mut flops = FlopCounter::new();
    let qs = block_sample(q, cfg, &rng.split(1))?;
    let ks = block_sample(k, cfg, &rng.split(2))?;
    let sparse = max_pooled_attn_map(&qs, &ks, cfg, &mut flops)?;
    let full = dense_importance_map(q, k, cfg, &mut flops)?;

    let (n, d) = q.dims2()?;
    let scale = cfg.scale_for(d);

    // entrywise ratio where the oracle map is meaningfully nonzero
    let mut ratio_sum = 0.0f64;
    let mut ratio_min = f64::INFINITY;
    let mut ratio_max = f64::NEG_INFINITY;
    let mut ratio_count = 0usize;
    for (s, f) in sparse.values.data().iter().zip(full.values.data()) {
        if *f > 1e-30 {
            let r = *s as f64 / *f as f64;
            ratio_sum += r;
            ratio_min = ratio_min.min(r);
            ratio_max = ratio_max.max(r);
            ratio_count += 1;
        }
    }

    // per sampled query row: unnormalized mass over sampled keys vs all keys
    let sampled_keys: Vec<usize> = ks.indices.iter().flatten().copied().collect();
    let sampled_queries: Vec<usize> = qs.indices.iter().flatten().copied().collect();
    let row_ratios: Vec<f64> = par::map_indexed(sampled_queries.len(), |qi| {
        let r = sampled_queries[qi];
        let qrow = q.row(r);
        let logit = |c: usize| {
            let krow = k.row(c);
            let mut acc = 0.0f64;
            for i in 0..d {
                acc += qrow[i] as f64 * krow[i] as f64;
            }
            acc * scale
        };
        let mx = (0..n).map(logit).fold(f64::NEG_INFINITY, f64::max);
        let full_mass: f64 = (0..n).map(|c| (logit(c) - mx).exp()).sum();
        let sparse_mass: f64 = sampled_keys.iter().map(|&c| (logit(c) - mx).exp()).sum();
        sparse_mass / full_mass
    });
    let row_sum_ratio_mean = row_ratios.iter().sum::<f64>() / row_ratios.len().max(1) as f64;

    // row-normalized map distance
    let n_b = sparse.values.shape()[0];
    let normalize = |t: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0f64; n_b * n_b];
        for i in 0..n_b {
            let row = t.row(i);
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            for (j, &v) in row.iter().enumerate() {
                out[i * n_b + j] = if total > 0.0 { v as f64 / total } else { 0.0 };
            }
        }
        out
    };
    let ns = normalize(&sparse.values);
    let nf = normalize(&full.values);
    let normalized_map_max_diff = ns
        .iter()
        .zip(&nf)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let overlap = mask_overlap(
        &threshold_mask(&sparse, cfg)?,
        &threshold_mask(&full, cfg)?,
    )?;

    Ok(ProportionalityReport {
        block_size: cfg.block_size,
        samples_per_block: cfg.samples_per_block,
        nominal_factor: cfg.block_size as f64 / cfg.samples_per_block as f64,
        entry_ratio_mean: ratio_sum / ratio_count.max(1) as f64,
        entry_ratio_min: ratio_min,
        entry_ratio_max: ratio_max,
        row_sum_ratio_mean,
        normalized_map_max_diff,
        mask_overlap: overlap,
    })
}

/// `(max - percentile_99) / max` of a block of attention probabilities: the
/// gap the high-quantile approximation assumes is small. Reported, not
/// asserted.
pub fn high_quantile_diagnostic(block: &Tensor) -> Result<f64> {
    if block.is_empty() {
        return Err(Error::InvalidArgument("empty block".into()));
    }
    let mut vals: Vec<f32> = block.data().to_vec();
    if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(
            "block entries must be finite and non-negative".into(),
        ));
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max = *vals.last().unwrap() as f64;
    if max <= 0.0 {
        return Err(Error::InvalidArgument("block has no positive entry".into()));
    }
    // nearest-rank 99th percentile
    let idx = ((0.99 * vals.len() as f64).ceil() as usize).clamp(1, vals.len()) - 1;
    let p99 = vals[idx] as f64;
    Ok((max - p99) / max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_sampling_always_finds_the_maximum() {
        let mut rng = RngStream::new(1);
        for _ in 0..50 {
            assert_eq!(sample_max_rank_trial(12, 12, &mut rng).unwrap(), 1);
        }
        assert!(sample_max_rank_trial(4, 5, &mut rng).is_err());
        assert!(sample_max_rank_trial(4, 0, &mut rng).is_err());
    }

    #[test]
    fn single_sample_from_four_averages_two_and_a_half() {
        // all 4 outcomes are equally likely, so the mean is (1+2+3+4)/4
        let report = rank_law_report(4, 1, 40_000, &RngStream::new(2)).unwrap();
        assert!((report.empirical_mean_rank - 2.5).abs() < 0.02);
        assert_eq!(report.analytic_mean_rank, 2.5);
    }

    #[test]
    fn paper_scale_constants_match_the_formulas() {
        assert!((analytic_mean_rank(16384, 256) - 63.74).abs() < 0.02);
        assert!((analytic_var_rank(16384, 256) - 3970.0).abs() < 1.0);
        assert!((analytic_var_rank(16384, 256).sqrt() - 63.0).abs() < 0.05);
        assert_eq!(analytic_var_rank(64, 64), 0.0);
    }

    #[test]
    fn rank_law_holds_at_small_scale() {
        let report = rank_law_report(100, 10, 20_000, &RngStream::new(3)).unwrap();
        let rel = (report.empirical_mean_rank - report.analytic_mean_rank).abs()
            / report.analytic_mean_rank;
        assert!(rel < 0.02, "relative mean error {rel}");
        let var_rel =
            (report.empirical_var_rank - report.analytic_var_rank).abs() / report.analytic_var_rank;
        assert!(var_rel < 0.10, "relative variance error {var_rel}");
    }

    #[test]
    fn rank_law_holds_across_population_sizes_at_full_trials() {
        for (i, &(n, k)) in [(16384usize, 256usize), (4096, 64), (1024, 256)]
            .iter()
            .enumerate()
        {
            let report = rank_law_report(n, k, 100_000, &RngStream::new(40 + i as u64)).unwrap();
            let rel = (report.empirical_mean_rank - report.analytic_mean_rank).abs()
                / report.analytic_mean_rank;
            assert!(rel <= 0.02, "(n={n}, k={k}): relative mean error {rel}");
        }
    }

    #[test]
    fn exhaustive_sampling_has_all_bounds_at_one() {
        let report = confidence_percentiles(32, 32, 2_000, &RngStream::new(4)).unwrap();
        for b in &report.bounds {
            assert_eq!(b.empirical_rank, 1);
        }
        assert_eq!(report.mean_rank, 1.0);
    }

    /// Exact distribution oracle: P(min rank of k draws >= r) =
    /// C(n-r+1, k) / C(n, k).
    fn exact_min_rank_quantile(n: usize, k: usize, conf: f64) -> usize {
        let ln_choose = |n: usize, k: usize| -> f64 {
            if k > n {
                return f64::NEG_INFINITY;
            }
            let mut acc = 0.0f64;
            for i in 0..k {
                acc += ((n - i) as f64).ln() - ((k - i) as f64).ln();
            }
            acc
        };
        let total = ln_choose(n, k);
        let mut cdf = 0.0f64;
        for r in 1..=(n - k + 1) {
            // P(min == r) = C(n-r, k-1)/C(n,k)
            let p = (ln_choose(n - r, k - 1) - total).exp();
            cdf += p;
            if cdf >= conf {
                return r;
            }
        }
        n - k + 1
    }

    #[test]
    fn empirical_quantiles_match_exact_enumeration() {
        let (n, k) = (64, 8);
        let report = confidence_percentiles(n, k, 60_000, &RngStream::new(5)).unwrap();
        for b in &report.bounds {
            let exact = exact_min_rank_quantile(n, k, b.confidence);
            assert!(
                (b.empirical_rank as i64 - exact as i64).abs() <= 1,
                "conf {}: empirical {} vs exact {exact}",
                b.confidence,
                b.empirical_rank
            );
        }
    }

    #[test]
    fn uniform_logits_give_the_exact_nominal_factor() {
        let n = 512;
        let x = Tensor::new(vec![n, 4], vec![0.3; n * 4]).unwrap();
        let cfg = AttnConfig::default().with_block(128, 16);
        let report = proportionality_check(&x, &x, &cfg, &RngStream::new(6)).unwrap();
        assert!((report.nominal_factor - 8.0).abs() < 1e-12);
        assert!((report.entry_ratio_mean - 8.0).abs() < 1e-4);
        assert!((report.entry_ratio_min - 8.0).abs() < 1e-4);
        assert!((report.entry_ratio_max - 8.0).abs() < 1e-4);
        assert!((report.row_sum_ratio_mean - 0.125).abs() < 1e-9);
        assert!(report.normalized_map_max_diff < 1e-6);
        assert_eq!(report.mask_overlap, 1.0);
    }

    #[test]
    fn exhaustive_probe_equals_oracle() {
        let mut rng = RngStream::new(7);
        let n = 96;
        let d = 8;
        let q = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal() as f32).collect())
            .unwrap();
        let k = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal() as f32).collect())
            .unwrap();
        let cfg = AttnConfig::default().with_block(16, 16);
        let report = proportionality_check(&q, &k, &cfg, &RngStream::new(8)).unwrap();
        assert!((report.entry_ratio_mean - 1.0).abs() < 1e-6);
        assert!(report.normalized_map_max_diff < 1e-6);
        assert_eq!(report.mask_overlap, 1.0);
    }

    #[test]
    fn random_workload_report_is_populated() {
        let mut rng = RngStream::new(9);
        let n = 128;
        let d = 8;
        let q = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal() as f32).collect())
            .unwrap();
        let k = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal() as f32).collect())
            .unwrap();
        let cfg = AttnConfig::default().with_block(32, 8);
        let report = proportionality_check(&q, &k, &cfg, &RngStream::new(10)).unwrap();
        assert!(report.entry_ratio_mean > 0.0);
        assert!(report.mask_overlap >= 0.0 && report.mask_overlap <= 1.0);
        assert!(report.row_sum_ratio_mean > 0.0 && report.row_sum_ratio_mean < 1.0);
    }

    #[test]
    fn quantile_gap_cases() {
        let flat = Tensor::new(vec![4, 4], vec![0.25; 16]).unwrap();
        assert_eq!(high_quantile_diagnostic(&flat).unwrap(), 0.0);

        let mut spike = vec![1e-6f32; 256];
        spike[7] = 0.999;
        let t = Tensor::new(vec![16, 16], spike).unwrap();
        let gap = high_quantile_diagnostic(&t).unwrap();
        assert!(gap > 0.9, "one-hot block should violate the assumption: {gap}");

        let mut rng = RngStream::new(11);
        let smooth = Tensor::new(
            vec![16, 16],
            (0..256).map(|_| 0.5 + 0.01 * rng.next_f32()).collect(),
        )
        .unwrap();
        let gap = high_quantile_diagnostic(&smooth).unwrap();
        assert!(gap < 0.05, "smooth block gap {gap}");
    }
}
