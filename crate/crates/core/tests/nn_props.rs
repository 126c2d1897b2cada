mod common;

use common::*;
use proptest::prelude::*;
use prunelab::hessian::batch_loss;
use prunelab::nn::{mnist_spec, preset, Activation, Network};
use prunelab::train::{sgd_step, LrMultiplierMap, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flatten_width(net: &Network) -> usize {
    let spec = net.spec();
    let li = spec
        .layers
        .iter()
        .position(|l| l.name() == "flatten")
        .unwrap();
    net.layer_shapes()[li].iter().product()
}

#[test]
fn preset_flatten_widths() {
    for act in [Activation::Relu, Activation::Tanh] {
        let mnist = build(mnist_spec(64, act), 0);
        assert_eq!(flatten_width(&mnist), 256);
        let cifar = build(preset("cifar", act, None).unwrap(), 0);
        assert_eq!(flatten_width(&cifar), 400);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_matches_finite_differences(i in 0usize..1000, seed in any::<u64>()) {
        let (mut net, batch) = random_case(i, seed, 3);
        prop_assume!(net.param_count() <= 500);
        let analytic = flat_gradient(&mut net, &batch);
        let numeric = numeric_gradient(&mut net, &batch, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            prop_assert!((a - n).abs() / n.abs().max(1.0) < 1e-5, "analytic {a}, numeric {n}");
        }
    }

    #[test]
    fn small_sgd_step_decreases_batch_loss(i in 0usize..1000, seed in any::<u64>()) {
        let (mut net, batch) = random_case(i, seed, 4);
        let g = flat_gradient(&mut net, &batch);
        prop_assume!(norm(&g) > 1e-6);
        let before = batch_loss(&net, &batch, 250).unwrap();
        let cfg = TrainConfig { learning_rate: 1e-4, batch_size: batch.len(), ..TrainConfig::default() };
        sgd_step(&mut net, &batch, &cfg, &LrMultiplierMap::new()).unwrap();
        let after = batch_loss(&net, &batch, 250).unwrap();
        prop_assert!(after < before, "{before} → {after}");
    }

    #[test]
    fn masks_absorb_on_reapplication(i in 0usize..1000, seed in any::<u64>(), keep in 0.2f64..0.9) {
        let (mut net, batch) = random_case(i, seed, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pl in net.params_mut() {
            for m in pl.weight_mask.data_mut().iter_mut().chain(pl.bias_mask.data_mut()) {
                *m = if rng.random_bool(keep) { 1.0 } else { 0.0 };
            }
            pl.apply_masks();
        }
        let (once, _) = net.logits(&batch.images, &batch.labels).unwrap();
        for _ in 0..3 {
            for pl in net.params_mut() {
                pl.apply_masks();
            }
        }
        let (again, _) = net.logits(&batch.images, &batch.labels).unwrap();
        prop_assert_eq!(bits(once.data()), bits(again.data()));
    }
}
