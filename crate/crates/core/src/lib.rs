//! Adaptive block-sparse attention at desk scale.
//!
//! The crate covers the full pipeline (locality-preserving Gilbert
//! reordering, sampled block-importance probing, threshold mask generation,
//! block-sparse execution with an optional mean-pooled global-token region
//! carrying a `ln n` logit bias) plus the order-statistics verification
//! suite behind the prober's sampling guarantees and a toy data-free
//! trajectory-distribution-matching distiller with a masked-attention
//! student.
//!
//! Dense brute-force oracles back every fast path. Hot loops are
//! data-parallel via rayon under the default `parallel` feature and run
//! sequentially without it; results are identical in both modes.

// `!(x > 0.0)` deliberately rejects NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod btf;
pub mod config;
pub mod error;
pub mod flops;
pub mod gilbert;
pub mod maskgen;
pub mod metrics;
pub mod par;
pub mod prober;
pub mod rng;
pub mod sparse;
pub mod tdm;
pub mod tensor;
pub mod theory;
pub mod workload;

pub use config::{AttnConfig, SampleStrategy};
pub use error::{Error, Result};
pub use flops::FlopCounter;
pub use rng::RngStream;
pub use tensor::Tensor;
