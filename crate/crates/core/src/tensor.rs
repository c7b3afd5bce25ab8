//! Dense row-major tensors and the handful of kernels everything else is
//! built on: 64-bit-accumulated matrix product, max-shifted row softmax and
//! row mean-pooling. Storage is `f32`; dot products, softmax sums and pooled
//! means accumulate in `f64` before rounding back.

use crate::error::{Error, Result};
use crate::flops::FlopCounter;
use crate::par;

/// Dense row-major tensor with explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build from shape and data; extents must be positive and consistent.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret as a matrix, returning `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch(format!(
                "expected a 2-D tensor, got shape {other:?}"
            ))),
        }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Error if any entry is NaN or infinite.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{what}: entry {pos} is {}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// `a[m×k] · b[k×n]` with 64-bit accumulation, rounded to `f32`.
pub fn matmul(a: &Tensor, b: &Tensor, flops: &mut FlopCounter) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner extents differ: {m}x{ka} vs {kb}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        let arow = &ad[i * ka..(i + 1) * ka];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for p in 0..ka {
                acc += arow[p] as f64 * bd[p * n + j] as f64;
            }
            *slot = acc as f32;
        }
    });
    flops.record_matmul(m, ka, n);
    let t = Tensor::new(vec![m, n], out)?;
    t.validate_finite("matmul output")?;
    Ok(t)
}

/// Row-wise `softmax(scale · s)` with per-row max subtraction.
///
/// `-inf` entries are permitted and map to zero probability (used by the
/// dense masked oracle); every row must contain at least one finite entry
/// and no NaN. Each output row sums to 1 within 1e-6.
pub fn row_softmax(s: &Tensor, scale: f64, flops: &mut FlopCounter) -> Result<Tensor> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "softmax scale must be positive and finite, got {scale}"
        )));
    }
    let (m, n) = s.dims2()?;
    if s.data().iter().any(|v| v.is_nan() || *v == f32::INFINITY) {
        return Err(Error::NonFinite("softmax input contains NaN or +inf".into()));
    }
    let mut out = vec![0.0f32; m * n];
    let sd = s.data();
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        let src = &sd[i * n..(i + 1) * n];
        let mut mx = f64::NEG_INFINITY;
        for &v in src {
            mx = mx.max(scale * v as f64);
        }
        if mx == f64::NEG_INFINITY {
            // whole row masked off; flagged below via NaN sentinel
            row.fill(f32::NAN);
            return;
        }
        let mut sum = 0.0f64;
        for (slot, &v) in row.iter_mut().zip(src) {
            let e = (scale * v as f64 - mx).exp();
            sum += e;
            *slot = e as f32;
        }
        for slot in row.iter_mut() {
            *slot = (*slot as f64 / sum) as f32;
        }
    });
    flops.record_row_softmax(m, n);
    let t = Tensor::new(vec![m, n], out)?;
    t.validate_finite("softmax output (a row with no finite entry?)")?;
    Ok(t)
}

/// Mean-pool rows in windows of `n`; a trailing partial window is averaged
/// over its actual size. Returns `ceil(rows/n)` rows.
pub fn mean_pool_rows(x: &Tensor, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("pool window must be >= 1".into()));
    }
    let (rows, cols) = x.dims2()?;
    let out_rows = rows.div_ceil(n);
    let mut out = vec![0.0f32; out_rows * cols];
    let xd = x.data();
    par::for_each_chunk_mut(&mut out, cols, |j, dst| {
        let lo = j * n;
        let hi = ((j + 1) * n).min(rows);
        let span = (hi - lo) as f64;
        for (c, slot) in dst.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for r in lo..hi {
                acc += xd[r * cols + c] as f64;
            }
            *slot = (acc / span) as f32;
        }
    });
    Tensor::new(vec![out_rows, cols], out)
}

/// Frobenius norm of the difference over the norm of `reference`.
pub fn relative_error(x: &Tensor, reference: &Tensor) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::ShapeMismatch(format!(
            "relative_error shapes {:?} vs {:?}",
            x.shape(),
            reference.shape()
        )));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (a, b) in x.data().iter().zip(reference.data()) {
        let d = (*a - *b) as f64;
        num += d * d;
        den += (*b as f64) * (*b as f64);
    }
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn fc() -> FlopCounter {
        FlopCounter::new()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![2, 2], vec![3.0, -1.0, 2.5, 4.0]).unwrap();
        let out = matmul(&eye, &a, &mut fc()).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_cases() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let out = matmul(&a, &b, &mut fc()).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[2.0, 4.0]);

        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let y = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&x, &y, &mut fc()).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(vec![2, 3]).unwrap();
        let b = Tensor::zeros(vec![2, 2]).unwrap();
        assert!(matches!(
            matmul(&a, &b, &mut fc()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn matmul_matches_naive_triple_loop_on_random_64x64() {
        let mut rng = RngStream::new(11);
        let n = 64;
        let a = Tensor::new(
            vec![n, n],
            (0..n * n).map(|_| rng.normal() as f32).collect(),
        )
        .unwrap();
        let b = Tensor::new(
            vec![n, n],
            (0..n * n).map(|_| rng.normal() as f32).collect(),
        )
        .unwrap();
        let got = matmul(&a, &b, &mut fc()).unwrap();
        // independent oracle: plain triple loop, f64 throughout
        let mut want = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..n {
                    acc += a.data()[i * n + p] as f64 * b.data()[p * n + j] as f64;
                }
                want[i * n + j] = acc;
            }
        }
        for (g, w) in got.data().iter().zip(&want) {
            let rel = ((*g as f64 - w) / w.abs().max(1e-9)).abs();
            assert!(rel < 1e-5, "got {g}, want {w}");
        }
    }

    #[test]
    fn matmul_flop_count_is_deterministic() {
        let a = Tensor::zeros(vec![5, 7]).unwrap();
        let b = Tensor::zeros(vec![7, 3]).unwrap();
        let mut f1 = fc();
        matmul(&a, &b, &mut f1).unwrap();
        let mut f2 = fc();
        matmul(&a, &b, &mut f2).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.mults, 5 * 3 * 7);
        assert_eq!(f1.adds, 5 * 3 * 6);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let s = Tensor::new(vec![1, 3], vec![4.2, 4.2, 4.2]).unwrap();
        let p = row_softmax(&s, 1.0, &mut fc()).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_closed_form_quarter_three_quarters() {
        let s = Tensor::new(vec![1, 2], vec![0.0, 3.0f32.ln()]).unwrap();
        let p = row_softmax(&s, 1.0, &mut fc()).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-6);
        assert!((p.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_single_column_is_one() {
        let s = Tensor::new(vec![3, 1], vec![-5.0, 0.0, 9.0]).unwrap();
        let p = row_softmax(&s, 0.5, &mut fc()).unwrap();
        assert_eq!(p.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_handles_extreme_spread_and_neg_inf() {
        let s = Tensor::new(
            vec![2, 3],
            vec![1e4, -1e4, 0.0, f32::NEG_INFINITY, 2.0, 2.0],
        )
        .unwrap();
        let p = row_softmax(&s, 1.0, &mut fc()).unwrap();
        for i in 0..2 {
            let sum: f64 = p.row(i).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
        }
        assert_eq!(p.data()[3], 0.0);
    }

    #[test]
    fn softmax_rejects_fully_masked_row_and_nan() {
        let s = Tensor::new(vec![1, 2], vec![f32::NEG_INFINITY; 2]).unwrap();
        assert!(row_softmax(&s, 1.0, &mut fc()).is_err());
        let s = Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(row_softmax(&s, 1.0, &mut fc()).is_err());
    }

    #[test]
    fn mean_pool_identity_and_pairs() {
        let x = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        assert_eq!(mean_pool_rows(&x, 1).unwrap(), x);
        let pooled = mean_pool_rows(&x, 2).unwrap();
        assert_eq!(pooled.shape(), &[1, 1]);
        assert_eq!(pooled.data(), &[1.0]);
    }

    #[test]
    fn mean_pool_partial_trailing_window() {
        let x = Tensor::new(vec![5, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let pooled = mean_pool_rows(&x, 2).unwrap();
        assert_eq!(pooled.shape(), &[3, 1]);
        assert_eq!(pooled.data(), &[0.5, 2.5, 4.0]);
        assert!(mean_pool_rows(&x, 0).is_err());
    }

    #[test]
    fn tensor_validation() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::new(vec![1, 2], vec![1.0, f32::NAN]).unwrap();
        assert!(t.validate_finite("t").is_err());
    }
}
