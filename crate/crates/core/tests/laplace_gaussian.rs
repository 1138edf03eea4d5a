//! Gaussian conjugate checks of the Laplace engine against dense algebra.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stevm::inference::{fit, log_posterior_hyper, FitOptions, LatentSystem, NewtonOptions};
use stevm::mesh::{BoundingBox, TriangularMesh};
use stevm::model::{BlockData, ModelData, ModelSpec, PriorConfig};

fn toy(n_sites: usize, n_times: usize, seed: u64) -> (TriangularMesh<f64>, ModelData) {
    let mesh = TriangularMesh::structured(BoundingBox::new([-0.3, -0.3], [1.3, 1.3]), 6, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites: Vec<[f64; 2]> = (0..n_sites).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let mut block = BlockData::default();
    let mut x1 = Vec::new();
    for t in 0..n_times {
        for s in &sites {
            block.locations.push(*s);
            block.times.push(t);
            let x: f64 = rng.random::<f64>() - 0.5;
            x1.push(x);
            block.y.push(1.0 + 0.8 * x + 0.3 * (rng.random::<f64>() - 0.5));
        }
    }
    block.covariates = BTreeMap::from([("x1".to_string(), x1)]);
    (mesh, ModelData { blocks: vec![block], n_times })
}

/// Dense latent prior precision, design and marginal likelihood.
fn dense_oracle(sys: &LatentSystem, theta: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let hs = sys.hyper_state(theta).unwrap();
    let vals = sys.prior_values(&hs).unwrap();
    let n = sys.dim();
    let p = sys.pattern();
    let mut q = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for k in p.colptr[j]..p.colptr[j + 1] {
            q[(p.rowidx[k], j)] += vals[k];
        }
    }
    let m = sys.num_obs();
    let mut a = DMatrix::<f64>::zeros(m, n);
    for i in 0..m {
        let (idx, coef) = sys.row_coefficients(i, &hs);
        for (j, c) in idx.into_iter().zip(coef) {
            a[(i, j)] += c;
        }
    }
    let stevm::likelihoods::Family::Gaussian { sd } = hs.families[0] else { panic!() };
    let cov = &a * q.clone().try_inverse().unwrap() * a.transpose() + DMatrix::identity(m, m) * (sd * sd);
    let y = DVector::from_vec(sys.y.clone());
    let chol = cov.clone().cholesky().unwrap();
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad = (y.transpose() * chol.solve(&y))[(0, 0)];
    let ll = -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
    let post_prec = &q + a.transpose() * &a / (sd * sd);
    let post_cov = post_prec.try_inverse().unwrap();
    let mean = &post_cov * a.transpose() * &y / (sd * sd);
    (ll, mean, post_cov)
}

#[test]
fn laplace_is_exact_for_gaussian_space_time_model() {
    let (mesh, data) = toy(15, 2, 3);
    let spec = ModelSpec::gaussian("y", &["x1"], true, &PriorConfig::default(), 1.4).unwrap();
    let sys = LatentSystem::new(&spec, &mesh, &data).unwrap();
    let theta = vec![(1.0f64 / 0.1).ln(), ((1.0f64 + 0.7) / (1.0 - 0.7)).ln(), 0.4f64.ln(), 0.5f64.ln()];
    let ev = log_posterior_hyper(&sys, &theta, None, &NewtonOptions::default()).unwrap();
    let (ll, mean, _) = dense_oracle(&sys, &theta);
    assert!((ev.log_marginal - ll).abs() < 1e-6, "{} vs {ll}", ev.log_marginal);
    assert!(ev.newton.iterations <= 1);
    for (a, b) in ev.newton.x.iter().zip(mean.iter()) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn fixed_hyper_fit_matches_gls_marginals() {
    let (mesh, data) = toy(15, 2, 5);
    let mut spec = ModelSpec::gaussian("y", &["x1"], true, &PriorConfig::default(), 1.4).unwrap();
    spec.fix("precision", 10.0).unwrap();
    spec.fix("a", 0.7).unwrap();
    spec.fix("range", 0.4).unwrap();
    spec.fix("sigma", 0.5).unwrap();
    let sys = LatentSystem::new(&spec, &mesh, &data).unwrap();
    let res = fit(&sys, &FitOptions::default()).unwrap();
    assert_eq!(res.grid.len(), 1);
    let theta = res.theta_mode.clone();
    let (_, mean, cov) = dense_oracle(&sys, &theta);
    for name in ["intercept", "x1"] {
        let j = sys.coefficient_col(name).unwrap();
        let m = res.coefficient(name).unwrap();
        assert!((m.mean - mean[j]).abs() < 1e-6);
        assert!((m.sd - cov[(j, j)].sqrt()).abs() < 1e-6);
    }
}
