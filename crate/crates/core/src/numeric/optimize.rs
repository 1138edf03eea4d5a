use crate::real::Real;

/// Golden-section search for the maximum of a unimodal `f` on `[a, b]`.
pub fn golden_section_max<T: Real, F: FnMut(T) -> T>(mut f: F, a: T, b: T, tol: T) -> T {
    let inv_phi = T::lit((5f64.sqrt() - 1.0) / 2.0);
    let (mut lo, mut hi) = (a, b);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while (hi - lo).abs() > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
    }
    T::lit(0.5) * (lo + hi)
}

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Initial simplex edge per coordinate.
    pub step: Vec<f64>,
    /// Convergence when the spread of simplex values falls below this.
    pub f_tol: f64,
    /// Convergence when the simplex diameter falls below this.
    pub x_tol: f64,
    pub max_evals: usize,
    /// Number of restarts from the best vertex after convergence.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { step: Vec::new(), f_tol: 1e-7, x_tol: 1e-5, max_evals: 4000, restarts: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
    /// Best value after each restart round.
    pub trace: Vec<f64>,
}

/// Minimizes `f` with the Nelder–Mead simplex method (adaptive coefficients).
/// Non-finite objective values are treated as `+inf`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, start: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult {
    let n = start.len();
    let mut eval = |x: &[f64], count: &mut usize| {
        *count += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut evals = 0;
    if n == 0 {
        let v = eval(start, &mut evals);
        return NelderMeadResult { x: vec![], value: v, evals, converged: true, trace: vec![v] };
    }
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);
    let mut best = start.to_vec();
    let mut best_val = eval(&best, &mut evals);
    let mut trace = Vec::new();
    let mut converged = false;
    for _round in 0..=opts.restarts {
        let mut simplex: Vec<Vec<f64>> = vec![best.clone()];
        let mut values = vec![best_val];
        for i in 0..n {
            let mut p = best.clone();
            let h = opts.step.get(i).copied().unwrap_or(0.5);
            p[i] += h;
            values.push(eval(&p, &mut evals));
            simplex.push(p);
        }
        converged = false;
        while evals < opts.max_evals {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();
            let spread = values[n] - values[0];
            let diam = simplex[1..]
                .iter()
                .flat_map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
                .fold(0.0f64, f64::max);
            if spread.is_finite() && spread <= opts.f_tol && diam <= opts.x_tol * 10.0 || diam <= opts.x_tol {
                converged = true;
                break;
            }
            let mut centroid = vec![0.0; n];
            for p in &simplex[..n] {
                for (c, v) in centroid.iter_mut().zip(p) {
                    *c += v / nf;
                }
            }
            let lerp =
                |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (c - w)).collect() };
            let xr = lerp(alpha);
            let fr = eval(&xr, &mut evals);
            if fr < values[0] {
                let xe = lerp(alpha * gamma);
                let fe = eval(&xe, &mut evals);
                if fe < fr {
                    simplex[n] = xe;
                    values[n] = fe;
                } else {
                    simplex[n] = xr;
                    values[n] = fr;
                }
            } else if fr < values[n - 1] {
                simplex[n] = xr;
                values[n] = fr;
            } else {
                let (xc, fc) = if fr < values[n] {
                    let x = lerp(alpha * rho);
                    let v = eval(&x, &mut evals);
                    (x, v)
                } else {
                    let x = lerp(-rho);
                    let v = eval(&x, &mut evals);
                    (x, v)
                };
                if fc < values[n].min(fr) {
                    simplex[n] = xc;
                    values[n] = fc;
                } else {
                    for i in 1..=n {
                        let p: Vec<f64> =
                            simplex[0].iter().zip(&simplex[i]).map(|(b, x)| b + sigma * (x - b)).collect();
                        values[i] = eval(&p, &mut evals);
                        simplex[i] = p;
                    }
                }
            }
        }
        let (ib, vb) =
            values.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        let improved = vb < best_val - opts.f_tol;
        if vb <= best_val {
            best = simplex[ib].clone();
            best_val = vb;
        }
        trace.push(best_val);
        if !improved && _round > 0 {
            break;
        }
    }
    NelderMeadResult { x: best, value: best_val, evals, converged, trace }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let r = nelder_mead(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &NelderMeadOptions { x_tol: 1e-9, f_tol: 1e-14, ..Default::default() },
        );
        assert!((r.x[0] - 1.0).abs() < 1e-5, "{:?}", r);
        assert!((r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn golden() {
        let x = golden_section_max(|x: f64| -(x - 0.3).powi(2), -1.0, 2.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-8);
    }
}
