use proptest::prelude::*;

use vgsleep_core::edf::{encode_tal, parse_tal, write_edf, EdfFile, EdfHeader, SignalHeader, SleepAnnotation};
use vgsleep_core::metrics::{auc_macro_ovr, binary_auc};
use vgsleep_core::sampling::{minmax_normalize, stratified_kfold, stratified_split_indices};
use vgsleep_core::visibility::{build_nvg_fast, build_nvg_naive};

fn series(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(-100.0f64..100.0, 1..max_len),
        // small integers force ties and collinear points
        prop::collection::vec((0i32..5).prop_map(f64::from), 1..max_len),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn nvg_fast_equals_naive(s in series(120)) {
        prop_assert_eq!(build_nvg_fast(&s).unwrap(), build_nvg_naive(&s).unwrap());
    }

    #[test]
    fn nvg_invariant_under_power_of_two_affine_maps(s in series(120), shift in -64i32..64, exp in -3i32..4) {
        // power-of-two scales and integer shifts are exact, so ties survive
        let a = 2f64.powi(exp);
        let mapped: Vec<f64> = s.iter().map(|v| a * v + f64::from(shift)).collect();
        prop_assert_eq!(build_nvg_fast(&mapped).unwrap(), build_nvg_fast(&s).unwrap());
    }

    #[test]
    fn nvg_reversal_mirrors_edges(s in series(120)) {
        let n = s.len();
        let rev: Vec<f64> = s.iter().rev().copied().collect();
        let mut mirrored: Vec<(usize, usize)> =
            build_nvg_fast(&rev).unwrap().edges.into_iter().map(|(i, j)| (n - 1 - j, n - 1 - i)).collect();
        mirrored.sort_unstable();
        prop_assert_eq!(mirrored, build_nvg_fast(&s).unwrap().edges);
    }

    #[test]
    fn nvg_always_links_neighbours(s in series(120)) {
        let g = build_nvg_fast(&s).unwrap();
        for i in 1..s.len() {
            prop_assert!(g.edges.binary_search(&(i - 1, i)).is_ok());
        }
    }

    #[test]
    fn minmax_lands_in_unit_interval(s in series(200)) {
        let out = minmax_normalize(&s);
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn edf_round_trip(
        layout in prop::collection::vec((1usize..20, 1i32..500, 1i32..500), 1..4),
        n_records in 0usize..5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let signals: Vec<SignalHeader> = layout
            .iter()
            .enumerate()
            .map(|(i, &(spr, lo, hi))| SignalHeader::new(&format!("ch{i}"), -f64::from(lo), f64::from(hi), spr))
            .collect();
        let digital: Vec<Vec<i16>> =
            signals.iter().map(|s| (0..s.samples_per_record * n_records).map(|_| rng.random()).collect()).collect();
        let bytes = write_edf(&EdfHeader::new(n_records, 1.0, signals), &digital).unwrap();
        let parsed = EdfFile::parse(&bytes).unwrap();
        prop_assert_eq!(&parsed.digital, &digital);
        prop_assert_eq!(parsed.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn tal_round_trip(entries in prop::collection::vec((0u32..100_000, 1u32..600, "[A-Za-z0-9 ?]{1,20}"), 0..8)) {
        let anns: Vec<SleepAnnotation> = entries
            .iter()
            .map(|(onset, dur, text)| SleepAnnotation::new(f64::from(*onset), f64::from(*dur), text.clone()))
            .collect();
        prop_assert_eq!(parse_tal(&encode_tal(&anns)).unwrap(), anns);
    }

    #[test]
    fn auc_invariant_under_monotone_transforms(
        data in prop::collection::vec((any::<bool>(), -50i32..50), 2..80),
        scale in 0.5f64..4.0,
    ) {
        let positive: Vec<bool> = data.iter().map(|d| d.0).collect();
        let scores: Vec<f64> = data.iter().map(|d| f64::from(d.1)).collect();
        let warped: Vec<f64> = scores.iter().map(|s| (s * scale / 25.0).exp() + s.powi(3)).collect();
        prop_assert_eq!(binary_auc(&positive, &scores), binary_auc(&positive, &warped));
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        if let (Some(a), Some(b)) = (binary_auc(&positive, &scores), binary_auc(&positive, &flipped)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn macro_auc_bounded(labels in prop::collection::vec(0usize..4, 2..60), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<Vec<f64>> = labels.iter().map(|_| (0..4).map(|_| rng.random()).collect()).collect();
        let s = auc_macro_ovr(&labels, &scores).unwrap();
        if let Some(m) = s.macro_auc {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        prop_assert_eq!(s.per_class.iter().filter(|a| a.is_none()).count(), s.skipped.len());
    }

    #[test]
    fn split_partitions_and_stratifies(labels in prop::collection::vec(0usize..3, 10..120), seed in any::<u64>()) {
        let (tr, va) = stratified_split_indices(&labels, 0.8, seed).unwrap();
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for c in 0..3 {
            let total = labels.iter().filter(|&&l| l == c).count() as f64;
            let in_train = tr.iter().filter(|&&i| labels[i] == c).count() as f64;
            // largest-remainder quotas stay within one sample of the exact share
            prop_assert!((in_train - 0.8 * total).abs() <= 1.0);
        }
    }

    #[test]
    fn kfold_validation_sets_partition(extra in prop::collection::vec(0usize..3, 0..80), folds in 2usize..6, seed in any::<u64>()) {
        // every class needs at least one sample per fold
        let labels: Vec<usize> = (0..3 * folds).map(|i| i % 3).chain(extra).collect();
        let splits = stratified_kfold(&labels, folds, seed).unwrap();
        prop_assert_eq!(splits.len(), folds);
        let mut seen: Vec<usize> = splits.iter().flat_map(|(_, va)| va.iter().copied()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..labels.len()).collect::<Vec<_>>());
        for (tr, va) in &splits {
            prop_assert_eq!(tr.len() + va.len(), labels.len());
            prop_assert!(tr.iter().all(|i| !va.contains(i)));
        }
    }
}
