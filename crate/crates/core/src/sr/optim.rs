//! Constant fitting: Nelder-Mead for refits, Levenberg-Marquardt for the
//! short tuning passes inside evolution.

use nalgebra::{DMatrix, DVector};

use super::expr::Expr;
use super::training::TrainingSet;

/// Evaluation budget per constant for [`refit_constants`].
pub const REFIT_EVALS_PER_CONSTANT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop once the spread of simplex values falls below this.
    pub f_tol: f64,
    /// ... and every vertex lies this close to the best one.
    pub x_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: 1000,
            f_tol: 1e-15,
            x_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
}

fn initial_simplex(x0: &[f64]) -> Vec<Vec<f64>> {
    let mut simplex = vec![x0.to_vec()];
    for i in 0..x0.len() {
        let mut v = x0.to_vec();
        v[i] = if v[i] != 0.0 { v[i] * 1.05 } else { 2.5e-4 };
        simplex.push(v);
    }
    simplex
}

/// Minimizes `f` from `x0` with the standard reflection / expansion /
/// contraction / shrink moves. When a simplex collapses with budget left
/// the search restarts around the best point; it stops when a restart
/// brings no improvement. Non-finite values count as `+inf`.
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], options: &NelderMeadOptions) -> NelderMeadResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let f0 = eval(x0, &mut evals);
    if n == 0 {
        return NelderMeadResult {
            x: Vec::new(),
            fx: f0,
            evals,
        };
    }
    let mut best = (x0.to_vec(), f0);

    while evals < options.max_evals {
        let start_value = best.1;
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        for v in initial_simplex(&best.0) {
            let fv = if simplex.is_empty() {
                best.1
            } else {
                eval(&v, &mut evals)
            };
            simplex.push((v, fv));
        }

        while evals < options.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let spread = simplex[n].1 - simplex[0].1;
            let size = simplex[1..]
                .iter()
                .flat_map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if (spread.is_finite() && spread <= options.f_tol) && size <= options.x_tol {
                break;
            }
            if size == 0.0 {
                break;
            }

            let mut centroid = vec![0.0; n];
            for (v, _) in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (w - c))
                    .collect()
            };

            let reflected = along(-1.0);
            let fr = eval(&reflected, &mut evals);
            if fr < simplex[0].1 {
                let expanded = along(-2.0);
                let fe = eval(&expanded, &mut evals);
                simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
                continue;
            }
            if fr < simplex[n - 1].1 {
                simplex[n] = (reflected, fr);
                continue;
            }
            let outside = fr < simplex[n].1;
            let contracted = along(if outside { -0.5 } else { 0.5 });
            let fc = eval(&contracted, &mut evals);
            if (outside && fc <= fr) || (!outside && fc < simplex[n].1) {
                simplex[n] = (contracted, fc);
                continue;
            }
            let anchor = simplex[0].0.clone();
            for vertex in simplex.iter_mut().skip(1) {
                if evals >= options.max_evals {
                    break;
                }
                let v: Vec<f64> = anchor.iter().zip(&vertex.0).map(|(a, x)| a + 0.5 * (x - a)).collect();
                let fv = eval(&v, &mut evals);
                *vertex = (v, fv);
            }
        }

        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 < best.1 {
            best = simplex[0].clone();
        }
        if best.1 >= start_value {
            break;
        }
    }

    NelderMeadResult {
        x: best.0,
        fx: best.1,
        evals,
    }
}

/// Least-squares fit of `x` so that `predict(x)` matches `targets`, using
/// Levenberg-Marquardt steps on a forward-difference Jacobian. Each
/// iteration costs `x.len() + 1` calls to `predict`; the search stops after
/// `max_evals` calls. Returns the best point found and its MSE.
pub fn levenberg_marquardt(
    predict: impl Fn(&[f64]) -> Vec<f64>,
    targets: &[f64],
    x0: &[f64],
    max_evals: usize,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let m = targets.len();
    let mse_of = |p: &[f64]| -> f64 {
        let s: f64 = p.iter().zip(targets).map(|(a, b)| (a - b) * (a - b)).sum();
        if s.is_finite() && m > 0 {
            s / m as f64
        } else {
            f64::INFINITY
        }
    };
    let mut x = x0.to_vec();
    let mut pred = predict(&x);
    let mut fx = mse_of(&pred);
    let mut evals = 1;
    if n == 0 || m == 0 || !fx.is_finite() {
        return (x, fx);
    }
    let mut lambda = 1e-3;
    while evals + n < max_evals {
        let mut jac = DMatrix::<f64>::zeros(m, n);
        for j in 0..n {
            let h = 1e-7 * x[j].abs().max(1e-3);
            let mut xh = x.clone();
            xh[j] += h;
            let ph = predict(&xh);
            evals += 1;
            for (i, (a, b)) in ph.iter().zip(&pred).enumerate() {
                jac[(i, j)] = (a - b) / h;
            }
        }
        if !jac.iter().all(|v| v.is_finite()) {
            break;
        }
        let residual = DVector::from_iterator(m, targets.iter().zip(&pred).map(|(t, p)| t - p));
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * residual;
        let mut improved = false;
        while evals < max_evals && lambda < 1e12 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
            let p = predict(&candidate);
            evals += 1;
            let f = mse_of(&p);
            if f < fx {
                let relative = (fx - f) / fx.max(f64::MIN_POSITIVE);
                x = candidate;
                pred = p;
                fx = f;
                lambda = (lambda / 10.0).max(1e-12);
                improved = relative > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (x, fx)
}

/// Re-optimizes the constants of `expr` for minimum MSE on `data`, keeping
/// its structure. Never returns a worse fit than the input.
pub fn refit_constants(expr: &Expr, data: &TrainingSet) -> Expr {
    let constants = expr.constants();
    if constants.is_empty() || data.is_empty() {
        return expr.clone();
    }
    let before = data.mse(expr);
    let options = NelderMeadOptions {
        max_evals: REFIT_EVALS_PER_CONSTANT * constants.len(),
        ..NelderMeadOptions::default()
    };
    let result = nelder_mead(|c| data.mse(&expr.with_constants(c)), &constants, &options);
    if result.fx <= before && result.x.iter().all(|c| c.is_finite()) {
        expr.with_constants(&result.x)
    } else {
        expr.clone()
    }
}
