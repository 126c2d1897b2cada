mod common;

use common::*;
use proptest::prelude::*;
use prunelab::hessian::{full_hessian, hessian_diag, hvp, NetObjective, DEFAULT_FD_EPS};
use prunelab::scorers::param::{
    loss_change_oracle, score_parameters, ParamScorer, ParamScorerKind,
};
use prunelab::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn hessian_cap_is_enforced() {
    let (mut net, batch) = random_case(1, 1, 2);
    let n = net.param_count();
    let err = full_hessian(
        &mut NetObjective::new(&mut net, &batch),
        DEFAULT_FD_EPS,
        n - 1,
    )
    .unwrap_err();
    assert!(matches!(err, Error::CapExceeded { .. }));
    // The diagonal falls back to per-coordinate products above the cap.
    let below = hessian_diag(
        &mut NetObjective::new(&mut net, &batch),
        DEFAULT_FD_EPS,
        n - 1,
    )
    .unwrap();
    let full = hessian_diag(&mut NetObjective::new(&mut net, &batch), DEFAULT_FD_EPS, n).unwrap();
    for (a, b) in below.iter().zip(&full) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hvp_is_symmetric(i in 0usize..500, seed in any::<u64>()) {
        let (mut net, batch) = random_case(i, seed, 3);
        let n = net.param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut obj = NetObjective::new(&mut net, &batch);
        let hv = hvp(&mut obj, &v, DEFAULT_FD_EPS).unwrap();
        let hu = hvp(&mut obj, &u, DEFAULT_FD_EPS).unwrap();
        let (a, b) = (dot(&u, &hv), dot(&v, &hu));
        let scale = a.abs().max(b.abs()).max(1e-8);
        prop_assert!((a - b).abs() / scale < 1e-6, "uᵀHv {a}, vᵀHu {b}");
    }

    #[test]
    fn second_order_calls_restore_parameters(i in 0usize..500, seed in any::<u64>()) {
        let (mut net, batch) = random_case(i, seed, 3);
        let before = bits(net.flat_params().data());
        let v: Vec<f64> = (0..net.param_count()).map(|j| (j as f64).sin()).collect();
        hvp(&mut NetObjective::new(&mut net, &batch), &v, DEFAULT_FD_EPS).unwrap();
        prop_assert_eq!(&bits(net.flat_params().data()), &before);
        full_hessian(&mut NetObjective::new(&mut net, &batch), DEFAULT_FD_EPS, 2000).unwrap();
        prop_assert_eq!(&bits(net.flat_params().data()), &before);
        for kind in [ParamScorerKind::Taylor2, ParamScorerKind::Hessian, ParamScorerKind::Taylor1] {
            score_parameters(&mut net, &batch, &ParamScorer::new(kind)).unwrap();
            prop_assert_eq!(&bits(net.flat_params().data()), &before);
        }
        loss_change_oracle(&mut net, &batch, 1.0, None, usize::MAX).unwrap();
        prop_assert_eq!(&bits(net.flat_params().data()), &before);
    }
}
