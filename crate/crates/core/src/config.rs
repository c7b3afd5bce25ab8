use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the prober picks representative tokens inside each block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStrategy {
    /// Uniform without replacement (the default).
    #[default]
    Uniform,
    /// Evenly strided deterministic picks, for ablation.
    Strided,
}

/// Block-sparse attention hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttnConfig {
    /// Block size `b`.
    pub block_size: usize,
    /// Sampled tokens per block `k` (`k <= b`).
    pub samples_per_block: usize,
    /// Cumulative-mass threshold `tau` in `(0, 1]`.
    pub tau: f64,
    /// Minimum retained block fraction per row.
    pub min_keep: f64,
    /// Maximum retained block fraction per row.
    pub max_keep: f64,
    /// Global-token mean-pool window `n` (0 disables the global region).
    pub pool_window: usize,
    /// Attention scale; `None` means `1/sqrt(d)`.
    pub scale: Option<f64>,
    pub sample_strategy: SampleStrategy,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            block_size: 128,
            samples_per_block: 16,
            tau: 0.9,
            min_keep: 0.05,
            max_keep: 1.0,
            pool_window: 0,
            scale: None,
            sample_strategy: SampleStrategy::Uniform,
        }
    }
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::InvalidArgument("block_size must be >= 1".into()));
        }
        if self.samples_per_block == 0 || self.samples_per_block > self.block_size {
            return Err(Error::InvalidArgument(format!(
                "samples_per_block must be in 1..={}, got {}",
                self.block_size, self.samples_per_block
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must be in (0, 1], got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.min_keep)
            || !(0.0..=1.0).contains(&self.max_keep)
            || self.min_keep > self.max_keep
        {
            return Err(Error::InvalidArgument(format!(
                "retention clamps must satisfy 0 <= min_keep <= max_keep <= 1, got {} and {}",
                self.min_keep, self.max_keep
            )));
        }
        if let Some(s) = self.scale {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "scale must be positive and finite, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Effective attention scale for head dimension `d`.
    pub fn scale_for(&self, d: usize) -> f64 {
        self.scale.unwrap_or(1.0 / (d as f64).sqrt())
    }

    pub fn with_block(mut self, b: usize, k: usize) -> Self {
        self.block_size = b;
        self.samples_per_block = k;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_clamps(mut self, min_keep: f64, max_keep: f64) -> Self {
        self.min_keep = min_keep;
        self.max_keep = max_keep;
        self
    }

    pub fn with_pool_window(mut self, n: usize) -> Self {
        self.pool_window = n;
        self
    }

    /// Number of blocks covering `n` rows.
    pub fn num_blocks(&self, n: usize) -> usize {
        n.div_ceil(self.block_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_scale_defaults_to_rsqrt_d() {
        let cfg = AttnConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.block_size, 128);
        assert_eq!(cfg.samples_per_block, 16);
        assert!((cfg.scale_for(64) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AttnConfig { samples_per_block: 0, ..Default::default() }.validate().is_err());
        assert!(AttnConfig { samples_per_block: 200, ..Default::default() }.validate().is_err());
        assert!(AttnConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(AttnConfig { tau: 1.5, ..Default::default() }.validate().is_err());
        assert!(AttnConfig { min_keep: 0.8, max_keep: 0.2, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn flat_json_round_trip_with_partial_fields() {
        let cfg: AttnConfig = serde_json::from_str(r#"{"block_size": 32, "tau": 0.95}"#).unwrap();
        assert_eq!(cfg.block_size, 32);
        assert_eq!(cfg.samples_per_block, 16);
        assert!((cfg.tau - 0.95).abs() < 1e-12);
    }
}
