//! Block-importance estimation.
//!
//! The cheap path samples `k` representative tokens per `b`-sized block of Q
//! and K, runs a streaming softmax over the sampled scores (running row max
//! `M`, running row sum `l`, stashed per-block row maxima `R`, final rescale
//! `exp(R - M)/l`) and max-pools the result per block pair; the full sampled
//! score matrix is never materialized. The expensive path computes the full
//! softmax and max-pools it; it is the validation oracle for the cheap path.

use serde::{Deserialize, Serialize};

use crate::config::{AttnConfig, SampleStrategy};
use crate::error::{Error, Result};
use crate::flops::FlopCounter;
use crate::par;
use crate::rng::RngStream;
use crate::tensor::{row_softmax, Tensor};

/// Where an importance map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SparseProbe,
    FullOracle,
}

/// `N_b × N_b` block-importance matrix of post-softmax probabilities.
#[derive(Clone, Debug)]
pub struct ImportanceMap {
    pub values: Tensor,
    pub provenance: Provenance,
}

impl ImportanceMap {
    pub fn num_blocks(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Rows sampled per block, concatenated block-major, with the chosen row
/// indices recorded for replay.
#[derive(Clone, Debug)]
pub struct BlockSample {
    pub rows: Tensor,
    /// Absolute row indices per block, ascending within each block.
    pub indices: Vec<Vec<usize>>,
    /// Requested samples per block (trailing blocks may hold fewer).
    pub nominal_k: usize,
}

impl BlockSample {
    pub fn num_blocks(&self) -> usize {
        self.indices.len()
    }

    /// Start offset of each block in `rows`, plus the total count.
    pub fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.indices.len() + 1);
        let mut acc = 0;
        offs.push(0);
        for idx in &self.indices {
            acc += idx.len();
            offs.push(acc);
        }
        offs
    }
}

/// Zero-pad rows so the count is divisible by `b`.
pub fn pad_to_block(x: &Tensor, b: usize) -> Result<Tensor> {
    if b == 0 {
        return Err(Error::InvalidArgument("block size must be >= 1".into()));
    }
    let (n, d) = x.dims2()?;
    let padded = n.div_ceil(b) * b;
    if padded == n {
        return Ok(x.clone());
    }
    let mut data = x.data().to_vec();
    data.resize(padded * d, 0.0);
    Tensor::new(vec![padded, d], data)
}

/// Sample `k` rows from each `b`-sized block of `x`.
///
/// Indices are drawn without replacement from each block's valid rows via a
/// per-block split of `rng`, so the draw for block `i` does not depend on
/// evaluation order. A trailing block with fewer than `k` valid rows clamps
/// `k` to what is available. With `k == b` every row is taken in index order.
pub fn block_sample(x: &Tensor, cfg: &AttnConfig, rng: &RngStream) -> Result<BlockSample> {
    cfg.validate()?;
    let (n, d) = x.dims2()?;
    let b = cfg.block_size;
    let k = cfg.samples_per_block;
    let n_b = n.div_ceil(b);

    let mut indices = Vec::with_capacity(n_b);
    for block in 0..n_b {
        let lo = block * b;
        let valid = (n - lo).min(b);
        let take = k.min(valid);
        let picks = match cfg.sample_strategy {
            SampleStrategy::Uniform => {
                let mut block_rng = rng.split(block as u64);
                block_rng.sample_without_replacement(valid, take)?
            }
            SampleStrategy::Strided => (0..take).map(|i| i * valid / take).collect(),
        };
        indices.push(picks.into_iter().map(|i| lo + i).collect::<Vec<_>>());
    }

    let total: usize = indices.iter().map(|v| v.len()).sum();
    let mut rows = Vec::with_capacity(total * d);
    for block in &indices {
        for &r in block {
            rows.extend_from_slice(x.row(r));
        }
    }
    Ok(BlockSample {
        rows: Tensor::new(vec![total, d], rows)?,
        indices,
        nominal_k: k,
    })
}

/// Flop cost of the streaming probe, analytic in the sample layout.
fn probe_flops(q_offsets: &[usize], k_offsets: &[usize], d: usize) -> FlopCounter {
    let nq = *q_offsets.last().unwrap() as u64;
    let nk = *k_offsets.last().unwrap() as u64;
    let n_b = (k_offsets.len() - 1) as u64;
    let mut f = FlopCounter::new();
    // scores: dot product + scale per sampled pair
    f.mults += nq * nk * (d as u64 + 1);
    f.adds += nq * nk * (d as u64 - 1);
    f.exps += nq * nk;
    // per-pair row sums
    f.adds += nq * nk;
    // online merge per (row, key-block): two rescale exps + two mults + add
    f.exps += 2 * nq * n_b;
    f.mults += 2 * nq * n_b;
    f.adds += nq * n_b;
    // final rescale pass per (row, key-block): exp + divide
    f.exps += nq * n_b;
    f.mults += nq * n_b;
    f
}

/// Streaming max-pooled attention map over block-sampled Q and K.
///
/// Entry `(i, j)` is the maximum softmax probability between block `i`'s
/// sampled queries and block `j`'s sampled keys, normalized over sampled keys
/// only. Matches the two-pass softmax-then-maxpool computation within 1e-6.
pub fn max_pooled_attn_map(
    qs: &BlockSample,
    ks: &BlockSample,
    cfg: &AttnConfig,
    flops: &mut FlopCounter,
) -> Result<ImportanceMap> {
    if qs.nominal_k != ks.nominal_k {
        return Err(Error::InvalidArgument(format!(
            "sample sizes differ: {} vs {}",
            qs.nominal_k, ks.nominal_k
        )));
    }
    let (_, dq) = qs.rows.dims2()?;
    let (_, dk) = ks.rows.dims2()?;
    if dq != dk {
        return Err(Error::ShapeMismatch(format!(
            "sampled Q and K widths differ: {dq} vs {dk}"
        )));
    }
    let d = dq;
    let n_bq = qs.num_blocks();
    let n_bk = ks.num_blocks();
    let scale = cfg.scale_for(d);
    let q_offsets = qs.offsets();
    let k_offsets = ks.offsets();
    let qd = qs.rows.data();
    let kd = ks.rows.data();

    let mut out = vec![0.0f32; n_bq * n_bk];
    par::for_each_chunk_mut(&mut out, n_bk, |qi, map_row| {
        let q_lo = q_offsets[qi];
        let q_hi = q_offsets[qi + 1];
        let rows = q_hi - q_lo;
        let mut running_max = vec![f64::NEG_INFINITY; rows];
        let mut running_sum = vec![0.0f64; rows];
        // stashed per-(row, key-block) score maxima
        let mut stash = vec![f64::NEG_INFINITY; rows * n_bk];

        for kj in 0..n_bk {
            let k_lo = k_offsets[kj];
            let k_hi = k_offsets[kj + 1];
            for (r, qrow) in (q_lo..q_hi).enumerate() {
                let q = &qd[qrow * d..(qrow + 1) * d];
                let mut block_max = f64::NEG_INFINITY;
                let mut scores = [0.0f64; 0].to_vec();
                scores.reserve(k_hi - k_lo);
                for krow in k_lo..k_hi {
                    let kv = &kd[krow * d..(krow + 1) * d];
                    let mut acc = 0.0f64;
                    for c in 0..d {
                        acc += q[c] as f64 * kv[c] as f64;
                    }
                    let s = acc * scale;
                    block_max = block_max.max(s);
                    scores.push(s);
                }
                let mut block_sum = 0.0f64;
                for s in &scores {
                    block_sum += (s - block_max).exp();
                }
                let new_max = running_max[r].max(block_max);
                running_sum[r] = (running_max[r] - new_max).exp() * running_sum[r]
                    + (block_max - new_max).exp() * block_sum;
                running_max[r] = new_max;
                stash[r * n_bk + kj] = block_max;
            }
        }
        for kj in 0..n_bk {
            let mut best = 0.0f64;
            for r in 0..rows {
                let p = (stash[r * n_bk + kj] - running_max[r]).exp() / running_sum[r];
                best = best.max(p);
            }
            map_row[kj] = best as f32;
        }
    });

    flops.merge(&probe_flops(&q_offsets, &k_offsets, d));
    Ok(ImportanceMap {
        values: Tensor::new(vec![n_bq, n_bk], out)?,
        provenance: Provenance::SparseProbe,
    })
}

/// Full-attention importance oracle: softmax of all scores, max-pooled per
/// `b × b` block (partial trailing blocks pool over their valid region).
pub fn dense_importance_map(
    q: &Tensor,
    k: &Tensor,
    cfg: &AttnConfig,
    flops: &mut FlopCounter,
) -> Result<ImportanceMap> {
    let (nq, dq) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    if dq != dk {
        return Err(Error::ShapeMismatch(format!(
            "Q and K widths differ: {dq} vs {dk}"
        )));
    }
    let d = dq;
    let b = cfg.block_size;
    let scale = cfg.scale_for(d);

    // raw logits, scale applied inside the softmax
    let mut logits = vec![0.0f32; nq * nk];
    let qd = q.data();
    let kd = k.data();
    par::for_each_chunk_mut(&mut logits, nk, |r, row| {
        let qrow = &qd[r * d..(r + 1) * d];
        for (c, slot) in row.iter_mut().enumerate() {
            let krow = &kd[c * d..(c + 1) * d];
            let mut acc = 0.0f64;
            for i in 0..d {
                acc += qrow[i] as f64 * krow[i] as f64;
            }
            *slot = acc as f32;
        }
    });
    flops.record_matmul(nq, d, nk);
    let probs = row_softmax(&Tensor::new(vec![nq, nk], logits)?, scale, flops)?;

    let n_bq = nq.div_ceil(b);
    let n_bk = nk.div_ceil(b);
    let pd = probs.data();
    let mut out = vec![0.0f32; n_bq * n_bk];
    par::for_each_chunk_mut(&mut out, n_bk, |bi, map_row| {
        let r_lo = bi * b;
        let r_hi = (r_lo + b).min(nq);
        for (bj, slot) in map_row.iter_mut().enumerate() {
            let c_lo = bj * b;
            let c_hi = (c_lo + b).min(nk);
            let mut best = 0.0f32;
            for r in r_lo..r_hi {
                for c in c_lo..c_hi {
                    best = best.max(pd[r * nk + c]);
                }
            }
            *slot = best;
        }
    });

    Ok(ImportanceMap {
        values: Tensor::new(vec![n_bq, n_bk], out)?,
        provenance: Provenance::FullOracle,
    })
}
