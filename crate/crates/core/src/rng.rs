//! Counter-based pseudo-random stream.
//!
//! Every draw is a pure function of `(seed, counter)`, so a stream can be
//! split per block / per trial and replayed on any platform with identical
//! results regardless of evaluation order. The mixer is the splitmix64
//! finalizer, which is statistically adequate for Monte Carlo sampling at
//! this scale.

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLIT_SALT: u64 = 0xD1B5_4A32_D192_ED03;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Reproducible random stream keyed by `(seed, counter)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derive an independent stream for a labelled subtask (block index,
    /// trial index, ...). Splitting does not advance `self`.
    pub fn split(&self, label: u64) -> RngStream {
        RngStream::new(mix(
            self.seed ^ mix(label.wrapping_mul(SPLIT_SALT).wrapping_add(GOLDEN)),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_f32(&mut self) -> f32 {
        self.next_f64() as f32
    }

    /// Uniform in `[0, n)` via multiply-shift (bias ~ n / 2^64, negligible
    /// for the population sizes used here).
    pub fn gen_range(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box-Muller; consumes two uniforms).
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        if u1 <= 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `k` distinct indices drawn uniformly from `[0, n)`, returned in
    /// ascending order (Floyd's algorithm).
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        if k > n {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {k} distinct items from a population of {n}"
            )));
        }
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        for j in (n - k)..n {
            let t = self.gen_range(j + 1);
            if chosen.contains(&t) {
                chosen.push(j);
            } else {
                chosen.push(t);
            }
        }
        chosen.sort_unstable();
        Ok(chosen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_counter_replays() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let seq: Vec<u64> = (0..8).map(|_| RngStream::new(7).next_u64()).collect();
        assert!(seq.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn split_streams_differ_and_replay() {
        let root = RngStream::new(1);
        let mut a = root.split(0);
        let mut b = root.split(1);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut a2 = root.split(0);
        assert_eq!(RngStream::new(1).split(0).next_u64(), {
            a2.next_u64()
        });
    }

    #[test]
    fn without_replacement_is_distinct_in_range_and_sorted() {
        let mut rng = RngStream::new(3);
        for &(n, k) in &[(10usize, 10usize), (100, 7), (5, 1), (1, 1)] {
            let s = rng.sample_without_replacement(n, k).unwrap();
            assert_eq!(s.len(), k);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|&i| i < n));
        }
        assert!(rng.sample_without_replacement(3, 4).is_err());
    }

    #[test]
    fn uniform_and_normal_are_sane() {
        let mut rng = RngStream::new(9);
        let n = 20_000;
        let mean_u: f64 = (0..n).map(|_| rng.next_f64()).sum::<f64>() / n as f64;
        assert!((mean_u - 0.5).abs() < 0.01);
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        let var: f64 = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
