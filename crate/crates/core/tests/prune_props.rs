mod common;

use common::*;
use proptest::prelude::*;
use prunelab::hessian::batch_loss;
use prunelab::nn::Network;
use prunelab::prune::{
    colormap, prune_parameters, prune_units, remove_low_nnz_units, shrink, unit_connectivity,
    PruneScope, UnitRef,
};
use prunelab::scorers::param::{score_parameters, ParamScorer, ParamScorerKind};
use prunelab::scorers::unit::{random_unit_scores, UnitScoreTable, UnitScorerKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomly_masked(i: usize, seed: u64, n: usize) -> (Network, prunelab::data::Batch) {
    let (mut net, batch) = random_case(i, seed, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    for pl in net.params_mut() {
        for m in pl
            .weight_mask
            .data_mut()
            .iter_mut()
            .chain(pl.bias_mask.data_mut())
        {
            if rng.random_bool(0.35) {
                *m = 0.0;
            }
        }
        pl.apply_masks();
    }
    (net, batch)
}

fn max_gap(a: &Network, b: &Network, batch: &prunelab::data::Batch) -> f64 {
    let (x, _) = a.logits(&batch.images, &batch.labels).unwrap();
    let (y, _) = b.logits(&batch.images, &batch.labels).unwrap();
    x.data()
        .iter()
        .zip(y.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shrink_preserves_logits(i in 0usize..500, seed in any::<u64>(), dead in 0usize..3) {
        let (mut net, batch) = randomly_masked(i, seed, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..dead {
            let p = rng.random_range(0..net.param_layer_count() - 1);
            let u = rng.random_range(0..net.units(p));
            prunelab::prune::mask_unit(&mut net, UnitRef::new(p, u)).unwrap();
        }
        let s = shrink(&net).unwrap();
        prop_assert!(max_gap(&net, &s.net, &batch) <= 1e-9);
        prop_assert!(s.net.param_count() <= net.param_count());
        for (p, kept) in s.kept.iter().enumerate() {
            prop_assert!(!kept.is_empty() && kept.len() == s.net.units(p) && kept.len() <= net.units(p));
        }
    }

    #[test]
    fn constant_units_propagate_exactly(i in 0usize..500, seed in any::<u64>(), bias in -1.0f64..1.0) {
        let (mut net, batch) = random_case(i, seed, 8);
        let p = (seed as usize) % (net.param_layer_count() - 1);
        let n = net.units(p);
        let unit = (seed as usize / 7) % n;
        let pl = &mut net.params_mut()[p];
        let row = pl.fan_in();
        pl.weight.data_mut()[unit * row..(unit + 1) * row].fill(0.0);
        pl.bias.data_mut()[unit] = bias;
        let before = batch_loss(&net, &batch, 250).unwrap();
        let mut scores = vec![1.0; n];
        scores[unit] = 0.0;
        let f = (1.0 / n as f64 + 1e-12).min(1.0);
        prune_units(&mut net, &[UnitScoreTable::new(p, UnitScorerKind::Mrs, scores)], f, Some(&batch)).unwrap();
        let after = batch_loss(&net, &batch, 250).unwrap();
        prop_assert!((after - before).abs() < 1e-10, "{before} → {after}");
    }

    #[test]
    fn pruned_units_output_zero(i in 0usize..500, seed in any::<u64>(), f in 0.1f64..0.9) {
        let (mut net, batch) = random_case(i, seed, 4);
        let tables: Vec<_> = (0..net.param_layer_count() - 1)
            .map(|p| random_unit_scores(&net, p, seed).unwrap())
            .collect();
        let r = prune_units(&mut net, &tables, f, Some(&batch)).unwrap();
        for t in &tables {
            let expect = (net.units(t.layer) as f64 * f).floor() as usize;
            prop_assert_eq!(r.pruned_units.iter().filter(|u| u.layer == t.layer).count(), expect);
        }
        let outputs = net.layer_outputs(&batch.images, &batch.labels).unwrap();
        for r in &r.pruned_units {
            // Post-activation output of the unit.
            let out = &outputs[net.spec_index(r.layer) + 1];
            let per_sample = out.len() / batch.len();
            let per_unit = per_sample / net.units(r.layer);
            for k in 0..batch.len() {
                let start = k * per_sample + r.unit * per_unit;
                prop_assert!(out.data()[start..start + per_unit].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn parameter_pruning_is_monotone(i in 0usize..500, seed in any::<u64>(), global in any::<bool>()) {
        let (mut net, batch) = randomly_masked(i, seed, 3);
        let scope = if global { PruneScope::Global } else { PruneScope::PerLayer };
        let mut last = net.pruned_fraction();
        let mut mask = net.flat_mask();
        for f in [0.4, 0.5, 0.7, 0.9] {
            let scores = score_parameters(&mut net, &batch, &ParamScorer::new(ParamScorerKind::Taylor1Abs)).unwrap();
            prune_parameters(&mut net, &scores, f, scope).unwrap();
            let now = net.flat_mask();
            prop_assert!(mask.iter().zip(&now).all(|(a, b)| !(*a == 0.0 && *b != 0.0)), "a mask was lifted");
            prop_assert!(net.pruned_fraction() >= last);
            if global {
                let target = (net.param_count() as f64 * f).floor() as usize;
                prop_assert!(net.masked_count() >= target.min(net.param_count()));
            }
            last = net.pruned_fraction();
            mask = now;
        }
    }

    #[test]
    fn low_connectivity_removal_follows_input_ratios(i in 0usize..500, seed in any::<u64>(), f_nz in 0.0f64..0.8) {
        let (mut net, batch) = randomly_masked(i, seed, 3);
        let mut expected = Vec::new();
        for p in 0..net.param_layer_count() - 1 {
            for (u, (inc, out)) in unit_connectivity(&net, p).unwrap().into_iter().enumerate() {
                if !net.params()[p].unit_pruned(u) && (inc <= f_nz || out <= f_nz) {
                    expected.push(UnitRef::new(p, u));
                }
            }
        }
        let before = net.param_count();
        let r = remove_low_nnz_units(&mut net, f_nz, Some(&batch)).unwrap();
        prop_assert_eq!(net.param_count(), before);
        prop_assert_eq!(r.pruned_units, expected);
    }

    #[test]
    fn colormaps_are_normalized(i in 0usize..500, seed in any::<u64>()) {
        let (net, _) = randomly_masked(i, seed, 1);
        for p in 0..net.param_layer_count() {
            let map = colormap(&net, p).unwrap();
            prop_assert_eq!(map.values.len(), map.rows * map.cols);
            prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(map.rows * map.cols, net.params()[p].weight.len());
        }
    }
}
