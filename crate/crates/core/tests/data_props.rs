use proptest::prelude::*;
use prunelab::data::{
    batches, encode_idx_images, encode_idx_labels, epoch_seed, parse_idx_images, parse_idx_labels,
    synthetic, EvalSet, SyntheticConfig,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn synthetic_round_trips_through_idx(seed in any::<u64>(), n in 1usize..40, side in 4usize..16, classes in 2usize..10) {
        let ds = synthetic(SyntheticConfig::new(classes, n, seed).with_shape([1, side, side]).with_jitter(1.5)).unwrap();
        let images = parse_idx_images(&encode_idx_images(&ds.images).unwrap()).unwrap();
        prop_assert_eq!(images.shape(), ds.images.shape());
        prop_assert_eq!(images.data(), ds.images.data());
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&ds.labels)).unwrap(), ds.labels.clone());
        prop_assert!(ds.labels.iter().all(|&l| l < classes));
    }

    #[test]
    fn eval_sets_are_seeded_and_distinct(len in 1usize..500, size in 1usize..600, seed in any::<u64>()) {
        let a = EvalSet::sample(len, size, seed).unwrap();
        let b = EvalSet::sample(len, size, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.fingerprint(), b.fingerprint());
        prop_assert_eq!(a.len(), size.min(len));
        let mut sorted = a.indices().to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), a.len());
        prop_assert!(sorted.iter().all(|&i| i < len));
    }

    #[test]
    fn epoch_batches_partition_the_data(len in 1usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0usize..20) {
        let parts = batches(len, bs, epoch_seed(seed, epoch)).unwrap();
        prop_assert_eq!(parts.len(), len.div_ceil(bs));
        prop_assert!(parts.iter().rev().skip(1).all(|b| b.len() == bs));
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }
}

#[test]
fn different_seeds_give_different_data() {
    let a = synthetic(SyntheticConfig::new(10, 20, 1)).unwrap();
    let b = synthetic(SyntheticConfig::new(10, 20, 2)).unwrap();
    assert_ne!(a.images.data(), b.images.data());
}
