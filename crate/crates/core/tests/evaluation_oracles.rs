//! Closed-form and sampling oracles for the evaluation criteria.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stevm::evaluation::{cpo_pit, dic, waic, CpoMethod};
use stevm::inference::{fit, FitOptions, LatentSystem};
use stevm::mesh::{BoundingBox, TriangularMesh};
use stevm::model::{BlockData, ModelData, ModelSpec, PriorConfig};

fn iid_normal(n: usize, seed: u64) -> (LatentSystem, Vec<f64>) {
    let mesh = TriangularMesh::structured(BoundingBox::new([0.0, 0.0], [1.0, 1.0]), 3, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = (0..n).map(|_| 2.0 + rng.sample::<f64, _>(StandardNormal)).collect();
    let block =
        BlockData { y: y.clone(), covariates: BTreeMap::new(), locations: vec![[0.5, 0.5]; n], times: vec![0; n] };
    let mut spec = ModelSpec::gaussian("y", &[], false, &PriorConfig::default(), 1.0).unwrap();
    spec.fix("precision", 1.0).unwrap();
    let sys = LatentSystem::new(&spec, &mesh, &ModelData { blocks: vec![block], n_times: 1 }).unwrap();
    (sys, y)
}

#[test]
fn cpo_matches_closed_form_leave_one_out() {
    let (sys, y) = iid_normal(40, 11);
    let res = fit(&sys, &FitOptions::default()).unwrap();
    let (cp, _) = cpo_pit(&sys, &res).unwrap();
    assert_eq!(cp.method, CpoMethod::Cavity);
    let s2 = sys.spec.coefficients[0].prior_sd.powi(2);
    let total: f64 = y.iter().sum();
    for i in 0..y.len() {
        let prec = 1.0 / s2 + (y.len() - 1) as f64;
        let mean = (total - y[i]) / prec;
        let v = 1.0 / prec + 1.0;
        let dens = (-(y[i] - mean).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        assert!((cp.cpo[i] - dens).abs() < 1e-6 * dens.max(1.0), "{i}: {} vs {dens}", cp.cpo[i]);
        let pit = stevm::numeric::normal_cdf((y[i] - mean) / v.sqrt());
        assert!((cp.pit[i] - pit).abs() < 1e-6);
    }
    assert!(cp.failed.is_empty());
}

#[test]
fn pit_is_one_half_at_loo_median() {
    let (mut sys, _) = iid_normal(21, 2);
    // Replace the last observation by its leave-one-out predictive median.
    let n = sys.y.len();
    let prec = 1.0 / sys.spec.coefficients[0].prior_sd.powi(2) + (n - 1) as f64;
    let rest: f64 = sys.y[..n - 1].iter().sum();
    sys.y[n - 1] = rest / prec;
    let res = fit(&sys, &FitOptions::default()).unwrap();
    let (cp, _) = cpo_pit(&sys, &res).unwrap();
    assert!((cp.pit[n - 1] - 0.5).abs() < 1e-6);
}

#[test]
fn dic_and_waic_match_exact_posterior_sampling() {
    let (sys, y) = iid_normal(30, 5);
    let res = fit(&sys, &FitOptions::default()).unwrap();
    let (d, _) = dic(&sys, &res).unwrap();
    let (w, _) = waic(&sys, &res).unwrap();
    // Exact posterior of μ is Gaussian.
    let s2 = sys.spec.coefficients[0].prior_sd.powi(2);
    let prec = 1.0 / s2 + y.len() as f64;
    let (pm, psd) = (y.iter().sum::<f64>() / prec, (1.0 / prec).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws: Vec<f64> = (0..200_000).map(|_| pm + psd * rng.sample::<f64, _>(StandardNormal)).collect();
    let lp = |yi: f64, mu: f64| -0.5 * (yi - mu).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let dev = |mu: f64| -2.0 * y.iter().map(|&yi| lp(yi, mu)).sum::<f64>();
    let mean_dev = draws.iter().map(|&m| dev(m)).sum::<f64>() / draws.len() as f64;
    let dic_mc = 2.0 * mean_dev - dev(pm);
    assert!(((d.dic - dic_mc) / dic_mc).abs() < 0.02, "{} vs {dic_mc}", d.dic);
    let mut waic_mc = 0.0;
    for &yi in &y {
        let l: Vec<f64> = draws.iter().map(|&m| lp(yi, m)).collect();
        let e = l.iter().map(|v| v.exp()).sum::<f64>() / l.len() as f64;
        let m1 = l.iter().sum::<f64>() / l.len() as f64;
        let m2 = l.iter().map(|v| v * v).sum::<f64>() / l.len() as f64;
        waic_mc += -2.0 * (e.ln() - (m2 - m1 * m1));
    }
    assert!(((w.waic - waic_mc) / waic_mc).abs() < 0.02, "{} vs {waic_mc}", w.waic);
    assert!((d.p_d - 1.0).abs() < 0.05);
}

#[test]
fn point_mass_posterior_gives_zero_p_d() {
    let (sys, _) = iid_normal(10, 1);
    let mut res = fit(&sys, &FitOptions::default()).unwrap();
    for o in &mut res.grid[0].obs {
        o.var = 0.0;
    }
    let (d, warnings) = dic(&sys, &res).unwrap();
    assert_eq!(d.p_d, 0.0);
    assert_eq!(d.dic, d.deviance_at_mean);
    assert!(!warnings.is_empty());
}

#[test]
fn criteria_are_permutation_invariant() {
    let (sys, y) = iid_normal(25, 8);
    let res = fit(&sys, &FitOptions::default()).unwrap();
    let mut permuted = sys;
    let mut y2 = y.clone();
    y2.reverse();
    permuted.y = y2;
    let res2 = fit(&permuted, &FitOptions::default()).unwrap();
    let (w1, _) = waic(&permuted, &res2).unwrap();
    let (sys1, _) = iid_normal(25, 8);
    let (w0, _) = waic(&sys1, &res).unwrap();
    assert!((w1.waic - w0.waic).abs() < 1e-8 * w0.waic.abs());
}
