//! Threshold-based sparse mask construction.
//!
//! Each importance row is ranked descending (ties broken by ascending block
//! index), and the smallest prefix whose share of the row mass reaches `tau`
//! is kept, clamped to the configured retention range. The cumulative test
//! compares raw prefix sums against `tau · row_total` rather than dividing
//! entry-wise, so multiplying a map by any positive constant yields a
//! bit-identical mask.

use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::prober::ImportanceMap;
use crate::tensor::Tensor;

/// Binary `N_b × N_b` block mask with per-row retention counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    n_b: usize,
    bits: Vec<bool>,
    kept_per_row: Vec<usize>,
    /// Rows whose importance mass was zero and fell back to the diagonal.
    degenerate_rows: Vec<usize>,
}

impl BlockMask {
    /// Validates that every row keeps at least one block.
    pub fn from_bits(n_b: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n_b * n_b {
            return Err(Error::ShapeMismatch(format!(
                "mask bits {} for {n_b}x{n_b}",
                bits.len()
            )));
        }
        let kept_per_row: Vec<usize> = (0..n_b)
            .map(|i| bits[i * n_b..(i + 1) * n_b].iter().filter(|&&b| b).count())
            .collect();
        if let Some(row) = kept_per_row.iter().position(|&k| k == 0) {
            return Err(Error::InvalidArgument(format!(
                "mask row {row} keeps no blocks"
            )));
        }
        Ok(Self {
            n_b,
            bits,
            kept_per_row,
            degenerate_rows: Vec::new(),
        })
    }

    pub fn all_ones(n_b: usize) -> Self {
        Self {
            n_b,
            bits: vec![true; n_b * n_b],
            kept_per_row: vec![n_b; n_b],
            degenerate_rows: Vec::new(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.n_b
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.n_b + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.bits[row * self.n_b..(row + 1) * self.n_b]
    }

    pub fn kept_per_row(&self) -> &[usize] {
        &self.kept_per_row
    }

    pub fn kept_total(&self) -> usize {
        self.kept_per_row.iter().sum()
    }

    /// Fraction of block pairs skipped.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept_total() as f64 / (self.n_b * self.n_b) as f64
    }

    pub fn degenerate_rows(&self) -> &[usize] {
        &self.degenerate_rows
    }

    /// Re-derive the per-row counts from the bits (consistency check).
    pub fn recount(&self) -> Vec<usize> {
        (0..self.n_b)
            .map(|i| self.row(i).iter().filter(|&&b| b).count())
            .collect()
    }

    /// 0/1-valued tensor view for `.btf` export.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.n_b, self.n_b],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dimensions are consistent")
    }

    /// Parse a 0/1-valued square tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2()?;
        if r != c {
            return Err(Error::ShapeMismatch(format!("mask tensor {r}x{c} not square")));
        }
        let bits: Vec<bool> = t
            .data()
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::Format(format!("mask entry {v} is not 0 or 1")))
                }
            })
            .collect::<Result<_>>()?;
        Self::from_bits(r, bits)
    }
}

/// Per-row retention bounds implied by the clamps, always at least 1 block.
fn clamp_bounds(cfg: &AttnConfig, n_b: usize) -> (usize, usize) {
    let lo = ((cfg.min_keep * n_b as f64).ceil() as usize).max(1);
    let hi = ((cfg.max_keep * n_b as f64).floor() as usize).clamp(lo, n_b);
    (lo, hi)
}

/// Rank a score row descending; ties broken by ascending index.
pub fn tie_break_rank(row: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Threshold mask: per row, keep the smallest top-ranked prefix whose
/// cumulative share reaches `cfg.tau`, clamped to the retention range.
///
/// An all-zero row keeps its diagonal block (padded to the lower clamp with
/// the lowest block indices) and is flagged as degenerate.
pub fn threshold_mask(p: &ImportanceMap, cfg: &AttnConfig) -> Result<BlockMask> {
    cfg.validate()?;
    let (rows, cols) = p.values.dims2()?;
    if rows != cols {
        return Err(Error::ShapeMismatch(format!(
            "importance map {rows}x{cols} not square"
        )));
    }
    let n_b = rows;
    let (lo, hi) = clamp_bounds(cfg, n_b);
    let mut bits = vec![false; n_b * n_b];
    let mut kept_per_row = Vec::with_capacity(n_b);
    let mut degenerate_rows = Vec::new();

    for i in 0..n_b {
        let row = p.values.row(i);
        if let Some(j) = row.iter().position(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "importance entry ({i},{j}) = {} is negative or non-finite",
                row[j]
            )));
        }
        let total: f64 = row.iter().map(|&v| v as f64).sum();
        if total <= 0.0 {
            degenerate_rows.push(i);
            let mut keep = vec![i];
            keep.extend((0..n_b).filter(|&j| j != i));
            keep.truncate(lo);
            for &j in &keep {
                bits[i * n_b + j] = true;
            }
            kept_per_row.push(keep.len());
            continue;
        }
        let order = tie_break_rank(row);
        let target = cfg.tau * total;
        let mut cum = 0.0f64;
        let mut m = n_b;
        for (rank, &j) in order.iter().enumerate() {
            cum += row[j] as f64;
            if cum >= target {
                m = rank + 1;
                break;
            }
        }
        let m = m.clamp(lo, hi);
        for &j in &order[..m] {
            bits[i * n_b + j] = true;
        }
        kept_per_row.push(m);
    }

    Ok(BlockMask {
        n_b,
        bits,
        kept_per_row,
        degenerate_rows,
    })
}

/// Static sliding-window baseline: row `i` keeps blocks with
/// `|i - j| <= window/2`.
pub fn static_window_mask(n_b: usize, window: usize) -> Result<BlockMask> {
    if n_b == 0 || window == 0 {
        return Err(Error::InvalidArgument(
            "static window needs n_b >= 1 and window >= 1".into(),
        ));
    }
    let half = window / 2;
    let mut bits = vec![false; n_b * n_b];
    for i in 0..n_b {
        for j in i.saturating_sub(half)..=(i + half).min(n_b - 1) {
            bits[i * n_b + j] = true;
        }
    }
    BlockMask::from_bits(n_b, bits)
}

/// Intersection-over-union of the kept entries.
pub fn mask_overlap(a: &BlockMask, b: &BlockMask) -> Result<f64> {
    if a.n_b != b.n_b {
        return Err(Error::ShapeMismatch(format!(
            "mask sizes {} vs {}",
            a.n_b, b.n_b
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Binary-search `tau` so the mask's global sparsity lands nearest to
/// `target`. Returns the mask and the `tau` that produced it.
pub fn mask_for_target_sparsity(
    p: &ImportanceMap,
    cfg: &AttnConfig,
    target: f64,
) -> Result<(BlockMask, f64)> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!(
            "target sparsity must be in [0, 1), got {target}"
        )));
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut best: Option<(BlockMask, f64, f64)> = None;
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        let tau = mid.max(f64::MIN_POSITIVE);
        let mask = threshold_mask(p, &cfg.with_tau(tau))?;
        let s = mask.sparsity();
        let gap = (s - target).abs();
        if best.as_ref().map(|(_, _, g)| gap < *g).unwrap_or(true) {
            best = Some((mask, tau, gap));
        }
        // sparsity decreases as tau grows
        if s > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (mask, tau, _) = best.expect("at least one bisection step ran");
    Ok((mask, tau))
}
