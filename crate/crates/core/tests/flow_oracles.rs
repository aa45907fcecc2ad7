use bgad_core::flow::{position_embedding, FlowConfig, HALF_LOG_2PI};
use bgad_core::objective::ml_loss;
use bgad_core::FlowModel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn config(dim: usize, blocks: usize) -> FlowConfig {
    FlowConfig {
        cond_dim: 4,
        blocks,
        ..FlowConfig::new(dim)
    }
}

fn random_model(dim: usize, blocks: usize, seed: u64) -> FlowModel {
    let mut m = FlowModel::new(&config(dim, blocks), "l0", seed).unwrap();
    m.randomize(0.3, 0.2, seed + 1000);
    m
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// log|det A| by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Vec<f64>, n: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
            .unwrap();
        if p != k {
            for c in 0..n {
                a.swap(k * n + c, p * n + c);
            }
        }
        let pivot = a[k * n + k];
        acc += pivot.abs().ln();
        for r in k + 1..n {
            let f = a[r * n + k] / pivot;
            for c in k..n {
                a[r * n + c] -= f * a[k * n + c];
            }
        }
    }
    acc
}

/// Central-difference Jacobian of `x ↦ z`, column by column.
fn numeric_logdet(model: &FlowModel, x: &[f64], c: &[f64], h: f64) -> f64 {
    let n = x.len();
    let mut jac = vec![0.0; n * n];
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let zp = model.forward(&xp, c).unwrap().z;
        let zm = model.forward(&xm, c).unwrap().z;
        for i in 0..n {
            jac[i * n + j] = (zp[i] - zm[i]) / (2.0 * h);
        }
    }
    log_abs_det(jac, n)
}

#[test]
fn logdet_matches_numeric_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for trial in 0..60 {
        let dim = [1, 2, 3, 4, 8][trial % 5];
        let blocks = [1, 2, 4][trial % 3];
        let model = random_model(dim, blocks, trial as u64);
        let x = gaussian_vec(&mut rng, dim);
        let c = position_embedding((trial % 3, trial % 5), (3, 5), 4).unwrap();
        let analytic = model.forward(&x, &c).unwrap().logdet;
        let numeric = numeric_logdet(&model, &x, &c, 1e-7);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative log-det error {worst:e}");
}

#[test]
fn single_block_logdet_matches_numeric_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let model = random_model(4, 1, seed);
        let x = gaussian_vec(&mut rng, 4);
        let c = position_embedding((1, 1), (2, 2), 4).unwrap();
        let (_, analytic) = model.blocks()[0].forward(&x, &c).unwrap();
        let numeric = numeric_logdet(&model, &x, &c, 1e-7);
        assert!(
            (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(1.0),
            "{analytic} vs {numeric}"
        );
    }
}

#[test]
fn full_model_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..30 {
        let model = random_model(8, 8, seed);
        let c = position_embedding((2, 3), (4, 4), 4).unwrap();
        let x: Vec<f64> = gaussian_vec(&mut rng, 8).iter().map(|v| 3.0 * v).collect();
        let back = model.inverse(&model.forward(&x, &c).unwrap().z, &c).unwrap();
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / (1.0 + norm) < 1e-6);
    }
}

fn quadrature_1d(model: &FlowModel) -> f64 {
    let c = position_embedding((0, 0), (1, 1), 4).unwrap();
    let h = 1e-3;
    (0..=16_000)
        .map(|i| {
            let x = -8.0 + i as f64 * h;
            let w = if i == 0 || i == 16_000 { 0.5 } else { 1.0 };
            w * model.log_likelihood(&[x], &c).unwrap().exp()
        })
        .sum::<f64>()
        * h
}

fn quadrature_2d(model: &FlowModel) -> f64 {
    let c = position_embedding((0, 0), (1, 1), 4).unwrap();
    let h = 0.02;
    let n = 800;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = [-8.0 + (i as f64 + 0.5) * h, -8.0 + (j as f64 + 0.5) * h];
            total += model.log_likelihood(&x, &c).unwrap().exp();
        }
    }
    total * h * h
}

#[test]
fn identity_density_integrates_to_one() {
    let model = FlowModel::identity(&config(1, 2), "l0").unwrap();
    assert!((quadrature_1d(&model) - 1.0).abs() < 0.02);
}

#[test]
fn random_densities_integrate_to_one() {
    for seed in 0..3 {
        let mut m1 = FlowModel::new(&config(1, 3), "l0", seed).unwrap();
        m1.randomize(0.2, 0.1, seed);
        let q1 = quadrature_1d(&m1);
        assert!((q1 - 1.0).abs() < 0.02, "d=1 seed {seed}: {q1}");
        let mut m2 = FlowModel::new(&config(2, 3), "l0", seed).unwrap();
        m2.randomize(0.2, 0.1, seed);
        let q2 = quadrature_2d(&m2);
        assert!((q2 - 1.0).abs() < 0.02, "d=2 seed {seed}: {q2}");
    }
}

#[test]
fn monte_carlo_nll_of_standard_normal() {
    let model = FlowModel::identity(&config(2, 1), "l0").unwrap();
    let c = position_embedding((0, 0), (1, 1), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logps: Vec<f64> = (0..1000)
        .map(|_| model.log_likelihood(&gaussian_vec(&mut rng, 2), &c).unwrap())
        .collect();
    let expected = 1.0 + 2.0 * HALF_LOG_2PI;
    assert!((ml_loss(&logps).unwrap() - expected).abs() < 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_any_input(
        seed in 0u64..1000,
        dim in 1usize..=8,
        blocks in 1usize..=4,
        x in proptest::collection::vec(-10.0f64..10.0, 8),
    ) {
        let model = random_model(dim, blocks, seed);
        let c = position_embedding((1, 2), (3, 3), 4).unwrap();
        let x = &x[..dim];
        let back = model.inverse(&model.forward(x, &c).unwrap().z, &c).unwrap();
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(err / (1.0 + norm) < 1e-6);
    }

    #[test]
    fn identity_model_is_exact_gaussian(x in proptest::collection::vec(-20.0f64..20.0, 3)) {
        let model = FlowModel::identity(&config(3, 2), "l0").unwrap();
        let c = position_embedding((0, 0), (1, 1), 4).unwrap();
        let expected = -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 3.0 * HALF_LOG_2PI;
        prop_assert_eq!(model.log_likelihood(&x, &c).unwrap(), expected);
    }
}
