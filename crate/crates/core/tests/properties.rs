//! Property tests for the numeric substrate and mask generator.

use proptest::prelude::*;

use asablade_core::config::AttnConfig;
use asablade_core::flops::FlopCounter;
use asablade_core::gilbert::{apply_permutation, undo_permutation, Permutation};
use asablade_core::maskgen::threshold_mask;
use asablade_core::prober::{ImportanceMap, Provenance};
use asablade_core::tensor::{matmul, mean_pool_rows, row_softmax, Tensor};

fn finite_f32() -> impl Strategy<Value = f32> {
    (-1e4f32..1e4f32).prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..12,
        scale in 0.05f64..4.0,
        data in proptest::collection::vec(-1e4f32..1e4f32, 1..72),
    ) {
        prop_assume!(data.len() >= rows * cols);
        let t = Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let p = row_softmax(&t, scale, &mut FlopCounter::new()).unwrap();
        for i in 0..rows {
            let sum: f64 = p.row(i).iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn matmul_matches_naive(
        m in 1usize..6,
        k in 1usize..6,
        n in 1usize..6,
        a in proptest::collection::vec(-100f32..100f32, 36),
        b in proptest::collection::vec(-100f32..100f32, 36),
    ) {
        let at = Tensor::new(vec![m, k], a[..m * k].to_vec()).unwrap();
        let bt = Tensor::new(vec![k, n], b[..k * n].to_vec()).unwrap();
        let got = matmul(&at, &bt, &mut FlopCounter::new()).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += at.data()[i * k + p] as f64 * bt.data()[p * n + j] as f64;
                }
                let g = got.data()[i * n + j] as f64;
                prop_assert!((g - acc).abs() <= 1e-5 * acc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn permutation_round_trip_is_identity(
        order in Just(()).prop_perturb(|_, mut rng| {
            let n = 1 + (rng.next_u64() % 40) as usize;
            let mut fwd: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                fwd.swap(i, j);
            }
            fwd
        }),
        cols in 1usize..5,
        fill in finite_f32(),
    ) {
        let n = order.len();
        let p = Permutation::new(order).unwrap();
        let data: Vec<f32> = (0..n * cols).map(|i| fill + i as f32).collect();
        let x = Tensor::new(vec![n, cols], data).unwrap();
        let back = undo_permutation(&apply_permutation(&x, &p).unwrap(), &p).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn mean_pool_preserves_total_mass_on_exact_windows(
        blocks in 1usize..8,
        window in 1usize..6,
        cols in 1usize..4,
        fill in proptest::collection::vec(-10f32..10f32, 1..192),
    ) {
        let rows = blocks * window;
        prop_assume!(fill.len() >= rows * cols);
        let x = Tensor::new(vec![rows, cols], fill[..rows * cols].to_vec()).unwrap();
        let pooled = mean_pool_rows(&x, window).unwrap();
        prop_assert_eq!(pooled.shape()[0], blocks);
        for c in 0..cols {
            let total: f64 = (0..rows).map(|r| x.data()[r * cols + c] as f64).sum();
            let pooled_total: f64 =
                (0..blocks).map(|r| pooled.data()[r * cols + c] as f64 * window as f64).sum();
            prop_assert!((total - pooled_total).abs() < 1e-3);
        }
    }

    #[test]
    fn threshold_mask_respects_clamps_for_any_row(
        n_b in 2usize..16,
        tau in 0.05f64..1.0,
        min_keep in 0.0f64..0.5,
        extra in 0.0f64..0.5,
        values in proptest::collection::vec(0f32..1f32, 4..256),
    ) {
        prop_assume!(values.len() >= n_b * n_b);
        let map = ImportanceMap {
            values: Tensor::new(vec![n_b, n_b], values[..n_b * n_b].to_vec()).unwrap(),
            provenance: Provenance::SparseProbe,
        };
        let max_keep = (min_keep + extra).min(1.0);
        let cfg = AttnConfig::default().with_tau(tau).with_clamps(min_keep, max_keep);
        let mask = threshold_mask(&map, &cfg).unwrap();
        let lo = ((min_keep * n_b as f64).ceil() as usize).max(1);
        let hi = ((max_keep * n_b as f64).floor() as usize).clamp(lo, n_b);
        for (i, &kept) in mask.kept_per_row().iter().enumerate() {
            prop_assert!(kept >= 1, "row {i} kept nothing");
            if !mask.degenerate_rows().contains(&i) {
                prop_assert!(kept >= lo && kept <= hi, "row {i} kept {kept} outside [{lo},{hi}]");
            }
        }
        prop_assert_eq!(mask.recount(), mask.kept_per_row().to_vec());
    }
}
