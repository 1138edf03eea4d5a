//! Reductions of the joint mean/maximum model to single-block fits.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use stevm::inference::{fit, FitOptions, FitResult, LatentSystem};
use stevm::joint::{build_joint_spec, sharing_posteriors, SharingLink};
use stevm::mesh::{BoundingBox, TriangularMesh};
use stevm::model::{BlockData, BlockSpec, FamilyKind, ModelData, ModelSpec, PriorConfig, SpecBuilder};

fn mesh() -> TriangularMesh<f64> {
    TriangularMesh::structured(BoundingBox::new([-0.3, -0.3], [1.3, 1.3]), 5, 5).unwrap()
}

fn block(n_sites: usize, seed: u64, maxima: bool) -> BlockData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gumbel = Gumbel::new(0.0, 0.3).unwrap();
    let mut b = BlockData::default();
    let mut x1 = Vec::new();
    for t in 0..2 {
        for _ in 0..n_sites {
            b.locations.push([rng.random::<f64>(), rng.random::<f64>()]);
            b.times.push(t);
            let x: f64 = rng.random::<f64>() - 0.5;
            x1.push(x);
            b.y.push(if maxima {
                2.0 + 0.3 * x + gumbel.sample(&mut rng)
            } else {
                1.0 + 0.5 * x + 0.2 * (rng.random::<f64>() - 0.5)
            });
        }
    }
    b.covariates = BTreeMap::from([("x1".to_string(), x1)]);
    b
}

fn fit_spec(spec: &ModelSpec, blocks: Vec<BlockData>) -> FitResult {
    let data = ModelData { blocks, n_times: 2 };
    let sys = LatentSystem::new(spec, &mesh(), &data).unwrap();
    fit(&sys, &FitOptions::default()).unwrap()
}

fn assert_close(joint: &FitResult, jname: &str, single: &FitResult, sname: &str, tol: f64) {
    let a = joint.coefficient(jname).unwrap();
    let b = single.coefficient(sname).unwrap();
    assert!((a.mean - b.mean).abs() < tol, "{jname} mean {} vs {}", a.mean, b.mean);
    assert!((a.sd - b.sd).abs() < tol, "{jname} sd {} vs {}", a.sd, b.sd);
}

#[test]
fn unit_sharing_without_maxima_matches_gaussian_fit() {
    let priors = PriorConfig::default();
    let link = SharingLink::new(&["x1"], &["intercept"]).unwrap();
    let mut joint = build_joint_spec(&link, &priors, 1.4).unwrap();
    joint.fix("beta1.x1", 1.0).unwrap();
    joint.fix("beta2", 1.0).unwrap();
    joint.fix("precision.max", 10.0).unwrap();
    let empty = BlockData { covariates: BTreeMap::from([("x1".to_string(), Vec::new())]), ..Default::default() };
    let jf = fit_spec(&joint, vec![block(12, 1, false), empty]);

    let single = ModelSpec::gaussian("y", &["x1"], true, &priors, 1.4).unwrap();
    let sf = fit_spec(&single, vec![block(12, 1, false)]);
    assert_close(&jf, "mean.intercept", &sf, "intercept", 1e-4);
    assert_close(&jf, "shared.x1", &sf, "x1", 1e-4);
    for (j, s) in [("a", "a"), ("sigma", "sigma"), ("precision.mean", "precision")] {
        let (a, b) = (&jf.hyper(j).unwrap().summary, &sf.hyper(s).unwrap().summary);
        assert!((a.mean - b.mean).abs() < 1e-4 * b.mean.abs().max(1.0), "{j}: {} vs {}", a.mean, b.mean);
    }
}

#[test]
fn no_sharing_splits_into_separate_fits() {
    let priors = PriorConfig::default();
    let link = SharingLink::new(&[], &["intercept", "x1"]).unwrap();
    let mut joint = build_joint_spec(&link, &priors, 1.4).unwrap();
    joint.fix("beta2", 0.0).unwrap();
    let jf = fit_spec(&joint, vec![block(10, 2, false), block(10, 3, true)]);

    let mean = ModelSpec::gaussian("y", &["x1"], true, &priors, 1.4).unwrap();
    let mf = fit_spec(&mean, vec![block(10, 2, false)]);
    // Gumbel regression without a latent field.
    let mut b = SpecBuilder::new("gumbel", &priors, 1.4);
    b.likelihood_precision("precision").unwrap();
    let terms = vec![b.coefficient_term("intercept", "intercept", None), b.coefficient_term("x1", "x1", None)];
    b.blocks.push(BlockSpec {
        name: "max".into(),
        family: FamilyKind::Gumbel,
        response: "y".into(),
        terms,
        precision: "precision".into(),
        shape: None,
    });
    let gf = fit_spec(&b.finish().unwrap(), vec![block(10, 3, true)]);

    // Separate optimizers stop at slightly different modes.
    let tol = 2e-3;
    assert_close(&jf, "mean.intercept", &mf, "intercept", tol);
    assert_close(&jf, "mean.x1", &mf, "x1", tol);
    assert_close(&jf, "max.intercept", &gf, "intercept", tol);
    assert_close(&jf, "max.x1", &gf, "x1", tol);
}

#[test]
fn zero_shared_covariate_is_prior_dominated() {
    let priors = PriorConfig::default();
    let link = SharingLink::new(&["x1", "z"], &["intercept"]).unwrap();
    let spec = build_joint_spec(&link, &priors, 1.4).unwrap();
    let mut blocks = vec![block(10, 4, false), block(10, 5, true)];
    for b in &mut blocks {
        let n = b.y.len();
        b.covariates.insert("z".into(), vec![0.0; n]);
    }
    let jf = fit_spec(&spec, blocks);
    let post = sharing_posteriors(&spec, &jf).unwrap();
    let find = |name: &str| post.iter().find(|p| p.summary.name == name).unwrap();
    assert!(find("beta1.z").prior_dominated);
    assert!(!find("beta1.x1").prior_dominated);
}
