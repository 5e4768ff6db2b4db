mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use codeal::covariate::RemovalKind;
use codeal::estimator::{run_estimator, EstimatorConfig, EstimatorKind};
use codeal::io;
use codeal::panel::{extract_block_partition, validate_and_sort, PanelDataset};

use common::{additive_panel, random_sizes, staggered_indicator};

fn pattern(seed: u64, r: usize, n: usize, t: usize) -> DMatrix<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    staggered_indicator(&random_sizes(&mut rng, r, n.max(r)), &random_sizes(&mut rng, r, t.max(r)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_reconstructs_the_indicator(seed in any::<u64>(), r in 2usize..7, n in 2usize..40, t in 2usize..40) {
        let w = pattern(seed, r, n, t);
        let partition = extract_block_partition(&w).unwrap();
        prop_assert_eq!(partition.r(), r);
        prop_assert_eq!(partition.reconstruct(), w);
    }

    #[test]
    fn did_is_exact_on_additive_panels(seed in any::<u64>(), r in 2usize..6, n in 2usize..30, t in 2usize..30) {
        let w = pattern(seed, r, n, t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let (panel, y0) = additive_panel(&mut rng, &w, -2.5);
        // shuffle units to exercise sorting and the inverse permutation
        let order: Vec<usize> = (0..w.nrows()).rev().collect();
        let shuffled = panel.permute_units(&order);
        let config = EstimatorConfig::new(EstimatorKind::Did, RemovalKind::None, 1);
        let result = run_estimator(&shuffled, &config).unwrap();
        for (k, &i) in order.iter().enumerate() {
            for c in 0..w.ncols() {
                prop_assert!((result.counterfactuals[(k, c)] - y0[(i, c)]).abs() < 1e-10);
            }
            if let Some(att) = result.att.per_unit[k] {
                prop_assert!((att + 2.5).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn csv_round_trip_is_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 12)) {
        let dir = tempfile::tempdir().unwrap();
        let y = DMatrix::from_row_slice(3, 4, &values);
        let w = DMatrix::from_row_slice(3, 4, &[false, false, false, false, false, false, true, true, false, false, false, true]);
        let x = DMatrix::from_row_slice(3, 1, &values[..3]);
        let panel = PanelDataset::new(y, w, x).unwrap();
        io::save_panel(&panel, dir.path()).unwrap();
        let (yp, wp, xp) = io::panel_paths(dir.path());
        let loaded = io::load_panel(&yp, &wp, &xp).unwrap();
        let (sorted, _) = validate_and_sort(&panel).unwrap();
        prop_assert_eq!(loaded.outcomes().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            sorted.outcomes().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(loaded.covariates(), sorted.covariates());
    }
}
