//! Block-sparse attention execution.
//!
//! Each query row runs an online softmax (running max, running sum, rescaled
//! value accumulator, all in f64) over its kept key blocks only. The
//! global-token variant appends mean-pooled keys and values; every query
//! attends to the whole pooled region with `ln(window)` added to those
//! logits inside the same softmax, so one pooled token carries the combined
//! unnormalized weight of its constituents. A partial trailing window of
//! size `n'` gets `ln(n')`.

use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::flops::FlopCounter;
use crate::maskgen::BlockMask;
use crate::par;
use crate::tensor::{matmul, mean_pool_rows, row_softmax, Tensor};

/// Output of a sparse attention call.
#[derive(Clone, Debug)]
pub struct AttnOutput {
    pub out: Tensor,
    /// Work done by this call (analytic in the processed-block layout).
    pub flops: FlopCounter,
    /// `1 - processed block pairs / N_b^2`, over the masked original region.
    pub effective_sparsity: f64,
}

struct Shapes {
    n: usize,
    d: usize,
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, mask: &BlockMask, b: usize) -> Result<Shapes> {
    let (n, d) = q.dims2()?;
    if k.dims2()? != (n, d) || v.dims2()? != (n, d) {
        return Err(Error::ShapeMismatch(format!(
            "Q {:?}, K {:?}, V {:?} must agree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let n_b = n.div_ceil(b);
    if mask.num_blocks() != n_b {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} blocks, {n} rows at block size {b} need {n_b}",
            mask.num_blocks()
        )));
    }
    Ok(Shapes { n, d })
}

/// Flops for one query row attending `cols` keys as part of an online pass:
/// scores (dot + scale), exps, sum, value accumulation, and the running
/// rescale charged per block.
fn row_block_flops(f: &mut FlopCounter, cols: usize, d: usize) {
    let (cols, d) = (cols as u64, d as u64);
    f.mults += cols * (d + 1);
    f.adds += cols * (d - 1);
    f.exps += cols;
    f.adds += cols; // sum of exponentials
    f.mults += cols * d; // value products
    f.adds += cols * d; // value accumulation
    // online merge: rescale running sum and accumulator
    f.exps += 2;
    f.mults += 2 + d;
    f.adds += 1;
}

/// Online-softmax state for one query row.
struct RowState {
    m: f64,
    l: f64,
    acc: Vec<f64>,
}

impl RowState {
    fn new(d: usize) -> Self {
        Self {
            m: f64::NEG_INFINITY,
            l: 0.0,
            acc: vec![0.0; d],
        }
    }

    /// Fold in one key block given its scores and value rows.
    fn absorb(&mut self, scores: &[f64], values: &[&[f32]]) {
        let block_max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
        let new_max = self.m.max(block_max);
        let rescale = if self.m == f64::NEG_INFINITY {
            0.0
        } else {
            (self.m - new_max).exp()
        };
        self.l *= rescale;
        for a in &mut self.acc {
            *a *= rescale;
        }
        for (s, vrow) in scores.iter().zip(values) {
            let e = (s - new_max).exp();
            self.l += e;
            for (a, &vv) in self.acc.iter_mut().zip(vrow.iter()) {
                *a += e * vv as f64;
            }
        }
        self.m = new_max;
    }

    fn finish(&self, out: &mut [f32]) {
        for (slot, &a) in out.iter_mut().zip(&self.acc) {
            *slot = (a / self.l) as f32;
        }
    }
}

/// Block-sparse attention under `mask`.
pub fn sparse_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &BlockMask,
    cfg: &AttnConfig,
) -> Result<AttnOutput> {
    cfg.validate()?;
    let b = cfg.block_size;
    let Shapes { n, d } = check_qkv(q, k, v, mask, b)?;
    let n_b = mask.num_blocks();
    let scale = cfg.scale_for(d);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    let mut out = vec![0.0f32; n * d];
    par::for_each_chunk_mut(&mut out, d, |r, out_row| {
        let qi = r / b;
        let qrow = &qd[r * d..(r + 1) * d];
        let mut state = RowState::new(d);
        let mut scores = Vec::with_capacity(b);
        let mut values = Vec::with_capacity(b);
        for kj in 0..n_b {
            if !mask.is_kept(qi, kj) {
                continue;
            }
            let c_lo = kj * b;
            let c_hi = (c_lo + b).min(n);
            scores.clear();
            values.clear();
            for c in c_lo..c_hi {
                let krow = &kd[c * d..(c + 1) * d];
                let mut acc = 0.0f64;
                for i in 0..d {
                    acc += qrow[i] as f64 * krow[i] as f64;
                }
                scores.push(acc * scale);
                values.push(&vd[c * d..(c + 1) * d]);
            }
            state.absorb(&scores, &values);
        }
        state.finish(out_row);
    });

    // analytic flop count over the processed pairs
    let mut flops = FlopCounter::new();
    let mut processed = 0usize;
    for qi in 0..n_b {
        let rows = ((qi + 1) * b).min(n) - qi * b;
        for kj in 0..n_b {
            if !mask.is_kept(qi, kj) {
                continue;
            }
            processed += 1;
            let cols = ((kj + 1) * b).min(n) - kj * b;
            for _ in 0..rows {
                row_block_flops(&mut flops, cols, d);
            }
        }
    }
    flops.mults += n as u64 * d as u64; // final divide per row

    let out = Tensor::new(vec![n, d], out)?;
    out.validate_finite("sparse attention output")?;
    Ok(AttnOutput {
        out,
        flops,
        effective_sparsity: 1.0 - processed as f64 / (n_b * n_b) as f64,
    })
}

/// Bias of a pooled window of true size `n'`.
fn pool_bias(window_size: usize) -> f64 {
    (window_size as f64).ln()
}

/// Block-sparse attention with a mean-pooled global-token region.
///
/// `cfg.pool_window == 0` falls back to plain [`sparse_attention`]. The
/// pooled region is never masked and shares the softmax normalizer with the
/// sparse region; `effective_sparsity` still reports the masked original
/// region only.
pub fn sparse_attention_gt(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &BlockMask,
    cfg: &AttnConfig,
) -> Result<AttnOutput> {
    cfg.validate()?;
    let pool_n = cfg.pool_window;
    if pool_n == 0 {
        return sparse_attention(q, k, v, mask, cfg);
    }
    let b = cfg.block_size;
    let Shapes { n, d } = check_qkv(q, k, v, mask, b)?;
    let n_b = mask.num_blocks();
    let scale = cfg.scale_for(d);

    let k_pool = mean_pool_rows(k, pool_n)?;
    let v_pool = mean_pool_rows(v, pool_n)?;
    let p = k_pool.shape()[0];
    let biases: Vec<f64> = (0..p)
        .map(|g| pool_bias(((g + 1) * pool_n).min(n) - g * pool_n))
        .collect();

    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let (kpd, vpd) = (k_pool.data(), v_pool.data());

    let mut out = vec![0.0f32; n * d];
    par::for_each_chunk_mut(&mut out, d, |r, out_row| {
        let qi = r / b;
        let qrow = &qd[r * d..(r + 1) * d];
        let mut state = RowState::new(d);
        let mut scores = Vec::with_capacity(b.max(p));
        let mut values: Vec<&[f32]> = Vec::with_capacity(b.max(p));
        for kj in 0..n_b {
            if !mask.is_kept(qi, kj) {
                continue;
            }
            let c_lo = kj * b;
            let c_hi = (c_lo + b).min(n);
            scores.clear();
            values.clear();
            for c in c_lo..c_hi {
                let krow = &kd[c * d..(c + 1) * d];
                let mut acc = 0.0f64;
                for i in 0..d {
                    acc += qrow[i] as f64 * krow[i] as f64;
                }
                scores.push(acc * scale);
                values.push(&vd[c * d..(c + 1) * d]);
            }
            state.absorb(&scores, &values);
        }
        // pooled region: fully attended, biased logits
        scores.clear();
        values.clear();
        for g in 0..p {
            let krow = &kpd[g * d..(g + 1) * d];
            let mut acc = 0.0f64;
            for i in 0..d {
                acc += qrow[i] as f64 * krow[i] as f64;
            }
            scores.push(acc * scale + biases[g]);
            values.push(&vpd[g * d..(g + 1) * d]);
        }
        state.absorb(&scores, &values);
        state.finish(out_row);
    });

    let mut flops = FlopCounter::new();
    let mut processed = 0usize;
    for qi in 0..n_b {
        let rows = ((qi + 1) * b).min(n) - qi * b;
        for kj in 0..n_b {
            if !mask.is_kept(qi, kj) {
                continue;
            }
            processed += 1;
            let cols = ((kj + 1) * b).min(n) - kj * b;
            for _ in 0..rows {
                row_block_flops(&mut flops, cols, d);
            }
        }
    }
    // pooled region per row, plus pooling cost and bias adds
    for _ in 0..n {
        row_block_flops(&mut flops, p, d);
    }
    flops.adds += (n * p) as u64; // bias additions
    flops.adds += (n * d) as u64; // pooling sums (two pooled matrices)
    flops.mults += 2 * (p * d) as u64; // pooling divides
    flops.mults += n as u64 * d as u64; // final divide per row

    let out = Tensor::new(vec![n, d], out)?;
    out.validate_finite("global-token attention output")?;
    Ok(AttnOutput {
        out,
        flops,
        effective_sparsity: 1.0 - processed as f64 / (n_b * n_b) as f64,
    })
}

/// Dense validation oracle: materializes all logits, sets masked-block
/// logits to `-inf`, applies the shared row softmax and multiplies by V.
pub fn dense_masked_oracle(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &BlockMask,
    cfg: &AttnConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let b = cfg.block_size;
    let Shapes { n, d } = check_qkv(q, k, v, mask, b)?;
    let scale = cfg.scale_for(d);
    let (qd, kd) = (q.data(), k.data());

    let mut logits = vec![0.0f32; n * n];
    par::for_each_chunk_mut(&mut logits, n, |r, row| {
        let qrow = &qd[r * d..(r + 1) * d];
        let qi = r / b;
        for (c, slot) in row.iter_mut().enumerate() {
            if !mask.is_kept(qi, c / b) {
                *slot = f32::NEG_INFINITY;
                continue;
            }
            let krow = &kd[c * d..(c + 1) * d];
            let mut acc = 0.0f64;
            for i in 0..d {
                acc += qrow[i] as f64 * krow[i] as f64;
            }
            *slot = acc as f32;
        }
    });
    let mut flops = FlopCounter::new();
    let probs = row_softmax(&Tensor::new(vec![n, n], logits)?, scale, &mut flops)?;
    matmul(&probs, v, &mut flops)
}

/// Verdict of the `ln(n)` additive-bias identity.
#[derive(Clone, Copy, Debug)]
pub struct BiasCompensation {
    pub window: usize,
    pub max_rel_err: f64,
    pub ok: bool,
}

/// Checks that one pooled token with a `ln(n)` logit bias reproduces the
/// total unnormalized weight of `n` identical constituent tokens:
/// `exp(logit + ln n) == n · exp(logit)`.
pub fn bias_compensation_check(window: usize) -> BiasCompensation {
    let bias = pool_bias(window.max(1));
    let logits = [-4.0, -1.0, -0.3, 0.0, 0.7, 1.0, 3.5];
    let mut max_rel_err = 0.0f64;
    for &l in &logits {
        let pooled = (l + bias).exp();
        let constituents = window.max(1) as f64 * l.exp();
        max_rel_err = max_rel_err.max(((pooled - constituents) / constituents).abs());
    }
    BiasCompensation {
        window,
        max_rel_err,
        ok: max_rel_err < 1e-6,
    }
}
