use serde::Serialize;

/// Arithmetic-work counter for the kernels in this crate.
///
/// Counts are analytic functions of operand shapes (and, for sparse kernels,
/// of the set of processed blocks), never of the data, so they are exactly
/// reproducible for a fixed configuration. Divisions are tallied as
/// multiplies. Each parallel worker accumulates into a local counter that is
/// merged at the join point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopCounter {
    pub mults: u64,
    pub adds: u64,
    pub exps: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.mults + self.adds + self.exps
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        self.mults += other.mults;
        self.adds += other.adds;
        self.exps += other.exps;
    }

    /// `m×k` by `k×n` product with 64-bit accumulation.
    pub(crate) fn record_matmul(&mut self, m: usize, k: usize, n: usize) {
        let (m, k, n) = (m as u64, k as u64, n as u64);
        self.mults += m * n * k;
        self.adds += m * n * k.saturating_sub(1);
    }

    /// Scaled, max-shifted softmax over `rows` rows of `cols` entries:
    /// one scale multiply and one exp per entry, a sum per row, one divide
    /// per entry.
    pub(crate) fn record_row_softmax(&mut self, rows: usize, cols: usize) {
        let (rows, cols) = (rows as u64, cols as u64);
        self.mults += rows * cols * 2;
        self.adds += rows * cols.saturating_sub(1);
        self.exps += rows * cols;
    }
}

impl std::ops::AddAssign for FlopCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.merge(&rhs);
    }
}
