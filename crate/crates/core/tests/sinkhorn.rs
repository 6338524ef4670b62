use dotresize::linalg::Matrix;
use dotresize::ot::{
    cost_matrix, entropy, objective, rescale_rows, sinkhorn, uniform, ActivationMatrix, OtError, SinkhornConfig,
    SinkhornMode,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{brute_force_min, random_histogram};

fn cfg(mode: SinkhornMode) -> SinkhornConfig {
    SinkhornConfig {
        mode,
        ..SinkhornConfig::default()
    }
}

fn marginal_violation(plan: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    rows.iter()
        .zip(a)
        .chain(cols.iter().zip(b))
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn random_instances_meet_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = SinkhornConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=6);
        let cost = Matrix::from_fn(n, k, |_, _| rng.random_range(0.0..5.0));
        let a = random_histogram(&mut rng, n);
        let b = random_histogram(&mut rng, k);
        let lambda = [0.01, 0.1, 1.0, 10.0][rng.random_range(0..4)];
        let p = sinkhorn(&cost, &a, &b, lambda, &config).unwrap();
        let v = marginal_violation(&p.plan, &a, &b);
        assert!(v <= p.marginal_residual + 1e-15);
        worst = worst.max(v);
    }
    assert!(worst <= 1e-9, "worst marginal violation {worst:e}");
}

#[test]
fn two_by_two_closed_form_all_modes() {
    let c = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
    let h = uniform(2);
    for lambda in [0.05f64, 0.1, 1.0] {
        let expected = 0.5 / (1.0 + (-1.0 / lambda).exp());
        for mode in [SinkhornMode::Auto, SinkhornMode::Linear, SinkhornMode::Log] {
            let p = sinkhorn(&c, &h, &h, lambda, &cfg(mode)).unwrap();
            for (i, j, want) in [(0, 0, expected), (1, 1, expected), (0, 1, 0.5 - expected), (1, 0, 0.5 - expected)] {
                let got = p.plan[(i, j)];
                assert!((got - want).abs() < 1e-9, "λ={lambda} {mode:?} ({i},{j}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn objective_matches_brute_force_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let config = SinkhornConfig::default();
    for case in 0..24 {
        let n = 1 + case % 3;
        let k = 1 + (case / 3) % 3;
        let cost = Matrix::from_fn(n, k, |_, _| rng.random_range(0.0..3.0));
        let a = random_histogram(&mut rng, n);
        let b = random_histogram(&mut rng, k);
        let lambda = [0.1, 0.5, 2.0][case % 3];
        let p = sinkhorn(&cost, &a, &b, lambda, &config).unwrap();
        let solver = p.objective(&cost);
        let brute = brute_force_min(&cost, &a, &b, lambda);
        assert!(
            solver <= brute + 1e-6,
            "case {case} ({n}x{k}, λ={lambda}): solver {solver} > brute {brute}"
        );
    }
}

#[test]
fn small_lambda_approaches_assignment() {
    // Identical points on both sides: the plan tends to the diagonal.
    let x = Matrix::from_rows(&[[0.0, 1.0], [3.0, -1.0], [2.0, 2.0]]);
    let acts = ActivationMatrix::new(x).unwrap();
    let c = cost_matrix(&acts, &[0, 1, 2]).unwrap();
    let h = uniform(3);
    let p = sinkhorn(&c, &h, &h, 0.01, &SinkhornConfig::default()).unwrap();
    let rows = rescale_rows(&p);
    assert!(rows.max_abs_diff(&Matrix::identity(3)) < 1e-9);
}

#[test]
fn large_lambda_approaches_product_coupling() {
    let c = Matrix::from_rows(&[[0.0, 2.0, 1.0], [1.0, 0.5, 3.0]]);
    let a = uniform(2);
    let b = uniform(3);
    let p = sinkhorn(&c, &a, &b, 1e6, &SinkhornConfig::default()).unwrap();
    let product = Matrix::from_fn(2, 3, |i, j| a[i] * b[j]);
    assert!(p.plan.max_abs_diff(&product) < 1e-6);
}

#[test]
fn entropy_increases_with_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = Matrix::from_fn(5, 4, |_, _| rng.random_range(0.0..2.0));
    let (a, b) = (uniform(5), uniform(4));
    let mut last = f64::NEG_INFINITY;
    for lambda in [0.02, 0.05, 0.1, 0.3, 1.0, 3.0, 10.0] {
        let h = sinkhorn(&c, &a, &b, lambda, &SinkhornConfig::default()).unwrap().entropy();
        assert!(h >= last - 1e-12, "entropy fell at λ={lambda}");
        last = h;
    }
}

#[test]
fn linear_and_log_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = Matrix::from_fn(6, 4, |_, _| rng.random_range(0.0..1.0));
    let (a, b) = (uniform(6), uniform(4));
    let lin = sinkhorn(&c, &a, &b, 0.2, &cfg(SinkhornMode::Linear)).unwrap();
    let log = sinkhorn(&c, &a, &b, 0.2, &cfg(SinkhornMode::Log)).unwrap();
    assert!(!lin.log_domain && log.log_domain);
    assert!(lin.plan.max_abs_diff(&log.plan) < 1e-9);
}

#[test]
fn tiny_lambda_switches_to_log_domain() {
    let c = Matrix::from_rows(&[[20.0, 50.0], [40.0, 30.0]]);
    let h = uniform(2);
    let p = sinkhorn(&c, &h, &h, 0.01, &SinkhornConfig::default()).unwrap();
    assert!(p.log_domain);
    assert!(p.plan.is_finite());
    assert!(matches!(
        sinkhorn(&c, &h, &h, 0.01, &cfg(SinkhornMode::Linear)),
        Err(OtError::NumericalUnderflow)
    ));
}

#[test]
fn full_support_small_lambda_is_near_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let n = rng.random_range(2..=8);
        // Zero self-cost; every off-diagonal cost at least 10x the diagonal gap.
        let c = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { rng.random_range(1.0..5.0) });
        let h = uniform(n);
        let plan = sinkhorn(&c, &h, &h, 1e-3, &SinkhornConfig::default()).unwrap();
        let r = rescale_rows(&plan);
        let off = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .fold(0.0f64, |m, (i, j)| m.max(r[(i, j)]));
        assert!(off < 0.01, "n {n}: off-diagonal mass {off:e}");
    }
}

#[test]
fn tiny_lambda_relative_to_cost_scale_converges() {
    // Costs in the hundreds of thousands against λ = 0.01, the regime of
    // raw ℓ1 distances summed over a large calibration budget.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for (n, k) in [(64, 51), (32, 29), (16, 9)] {
        let x = Matrix::from_fn(n, 4096, |_, _| rng.random_range(-60.0..60.0));
        let acts = ActivationMatrix::new(x).unwrap();
        let support: Vec<usize> = (0..k).collect();
        let c = cost_matrix(&acts, &support).unwrap();
        for lambda in [0.01, 0.1, 1.0] {
            let plan = sinkhorn(&c, &uniform(n), &uniform(k), lambda, &SinkhornConfig::default())
                .unwrap_or_else(|e| panic!("{n}x{k} at {lambda}: {e}"));
            assert!(plan.marginal_residual <= 1e-9);
            assert!(marginal_violation(&plan.plan, &uniform(n), &uniform(k)) <= 1e-9);
        }
    }
}

#[test]
fn invalid_inputs_rejected() {
    let c = Matrix::zeros(2, 2);
    let h = uniform(2);
    let config = SinkhornConfig::default();
    assert!(matches!(sinkhorn(&c, &h, &h, 0.0, &config), Err(OtError::InvalidLambda(_))));
    assert!(matches!(sinkhorn(&c, &[0.7, 0.7], &h, 1.0, &config), Err(OtError::InvalidMarginal(_))));
    assert!(matches!(sinkhorn(&c, &[1.0], &h, 1.0, &config), Err(OtError::InvalidMarginal(_))));
    let bad = Matrix::from_rows(&[[f64::NAN, 0.0], [0.0, 0.0]]);
    assert!(matches!(sinkhorn(&bad, &h, &h, 1.0, &config), Err(OtError::NonFinite)));
}

#[test]
fn cost_matrix_is_l1_distance() {
    let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.0, 0.0, 0.0], [2.0, 2.0, 2.0]]);
    let acts = ActivationMatrix::new(x).unwrap();
    let c = cost_matrix(&acts, &[2, 0]).unwrap();
    let expected = Matrix::from_rows(&[[1.0 + 4.0 + 1.5, 0.0], [6.0, 3.5], [0.0, 1.0 + 4.0 + 1.5]]);
    assert_eq!(c, expected);
    assert!(matches!(cost_matrix(&acts, &[0, 0]), Err(OtError::DuplicateSupportIndex(0))));
    assert!(matches!(cost_matrix(&acts, &[3]), Err(OtError::IndexOutOfRange { index: 3, len: 3 })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plan_is_nonnegative_with_exact_marginals(
        n in 1usize..7,
        k in 1usize..6,
        seed in any::<u64>(),
        lambda in prop::sample::select(vec![0.02, 0.1, 0.5, 2.0, 10.0]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Matrix::from_fn(n, k, |_, _| rng.random_range(0.0..4.0));
        let (a, b) = (uniform(n), uniform(k));
        let p = sinkhorn(&c, &a, &b, lambda, &SinkhornConfig::default()).unwrap();
        prop_assert!(p.plan.as_slice().iter().all(|&t| t >= 0.0));
        prop_assert!(marginal_violation(&p.plan, &a, &b) <= 1e-9);
        let rows = rescale_rows(&p);
        for s in rows.row_sums() {
            prop_assert!((s - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn plan_beats_product_coupling(
        n in 1usize..6,
        k in 1usize..6,
        seed in any::<u64>(),
        lambda in 0.05f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Matrix::from_fn(n, k, |_, _| rng.random_range(0.0..4.0));
        let (a, b) = (uniform(n), uniform(k));
        let p = sinkhorn(&c, &a, &b, lambda, &SinkhornConfig::default()).unwrap();
        let product = Matrix::from_fn(n, k, |i, j| a[i] * b[j]);
        prop_assert!(p.objective(&c) <= objective(&product, &c, lambda) + 1e-9);
    }

    #[test]
    fn entropy_bounded_by_product(n in 1usize..8, k in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Matrix::from_fn(n, k, |_, _| rng.random_range(0.0..4.0));
        let (a, b) = (uniform(n), uniform(k));
        let p = sinkhorn(&c, &a, &b, 0.3, &SinkhornConfig::default()).unwrap();
        let product = Matrix::from_fn(n, k, |i, j| a[i] * b[j]);
        prop_assert!(entropy(&p.plan) <= entropy(&product) + 1e-9);
    }
}
