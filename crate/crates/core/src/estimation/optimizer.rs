//! BFGS ascent with a backtracking Armijo line search.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Stop when max |gradient| falls to this level.
    pub gtol: f64,
    /// Stop when |ΔLL| / max(|LL|, 1) falls to this level; 0 disables.
    pub ftol: f64,
    /// Cap on the largest coordinate change of a single trial step.
    pub max_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iter: 500,
            gtol: 1e-5,
            ftol: 1e-9,
            max_step: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimStatus {
    GradientTolerance,
    RelativeChange,
    MaxIterations,
    LineSearchFailed,
}

impl OptimStatus {
    pub fn converged(self) -> bool {
        matches!(self, OptimStatus::GradientTolerance | OptimStatus::RelativeChange)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimStatus::GradientTolerance => "gradient tolerance",
            OptimStatus::RelativeChange => "relative change",
            OptimStatus::MaxIterations => "iteration limit",
            OptimStatus::LineSearchFailed => "line search failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loglik: f64,
    pub grad_max: f64,
    pub step: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub loglik: f64,
    pub gradient: Vec<f64>,
    pub status: OptimStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub trace: Vec<TraceRow>,
    /// Final n×n row-major approximation of the inverse Hessian of −f.
    pub inverse_hessian: Vec<f64>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `f`, which returns the objective and its gradient. Trial points
/// with a non-finite objective are treated as failed trials; a non-finite
/// objective at `x0` is an error.
pub fn maximize<F>(f: F, x0: &[f64], opts: &OptimOptions, on_iter: impl FnMut(&TraceRow)) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    maximize_from(f, x0, None, opts, on_iter)
}

/// As [`maximize`], optionally starting from the inverse Hessian of an
/// earlier run (for example one on a cheaper approximation of `f`).
pub fn maximize_from<F>(
    mut f: F,
    x0: &[f64],
    inverse_hessian: Option<&[f64]>,
    opts: &OptimOptions,
    mut on_iter: impl FnMut(&TraceRow),
) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    if let Some(h) = inverse_hessian {
        if h.len() != n * n {
            return Err(Error::dimension("inverse Hessian", n * n, h.len()));
        }
    }
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("objective at the starting point is {fx}")));
    }
    let mut trace = vec![TraceRow {
        iteration: 0,
        loglik: fx,
        grad_max: max_abs(&g),
        step: 0.0,
        evaluations,
    }];
    on_iter(&trace[0]);
    if n == 0 || max_abs(&g) <= opts.gtol {
        return Ok(OptimResult {
            x,
            loglik: fx,
            gradient: g,
            status: OptimStatus::GradientTolerance,
            iterations: 0,
            evaluations,
            trace,
            inverse_hessian: inverse_hessian.map_or_else(|| vec![0.0; n * n], <[f64]>::to_vec),
        });
    }

    // inverse Hessian of −f
    let initial_scale = (0.5 / max_abs(&g)).min(1.0);
    let identity = |scale: f64| {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = scale;
        }
        h
    };
    let mut h = inverse_hessian.map_or_else(|| identity(initial_scale), <[f64]>::to_vec);
    let mut first_update = inverse_hessian.is_none();
    let mut status = OptimStatus::MaxIterations;
    let mut iterations = 0;
    let mut reset_once = false;

    while iterations < opts.max_iter {
        // ascent direction p = H·g
        let mut p: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&p, &g);
        if !(slope > 0.0) {
            h = identity(initial_scale);
            p = g.iter().map(|v| v * initial_scale).collect();
            slope = dot(&p, &g);
        }
        let pmax = max_abs(&p);
        let mut alpha = if pmax > opts.max_step { opts.max_step / pmax } else { 1.0 };

        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
            let res = f(&trial);
            evaluations += 1;
            if let Ok((ft, gt)) = res {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft >= fx + 1e-4 * alpha * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                if ft.is_finite() {
                    // quadratic interpolation of the step along p
                    let denom = 2.0 * (fx + alpha * slope - ft);
                    let a_new = if denom > 0.0 { slope * alpha * alpha / denom } else { 0.5 * alpha };
                    alpha = a_new.clamp(0.1 * alpha, 0.5 * alpha);
                    continue;
                }
            }
            alpha *= 0.25;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if !reset_once {
                reset_once = true;
                h = identity(initial_scale);
                first_update = true;
                continue;
            }
            status = OptimStatus::LineSearchFailed;
            break;
        };
        reset_once = false;
        iterations += 1;

        // BFGS update on −f: s = Δx, y = −Δg
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if first_update {
                let scale = sy / dot(&y, &y);
                h = identity(scale);
                first_update = false;
            }
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }

        let change = (f_new - fx).abs() / fx.abs().max(1.0);
        let step = max_abs(&s);
        x = x_new;
        fx = f_new;
        g = g_new;
        let row = TraceRow {
            iteration: iterations,
            loglik: fx,
            grad_max: max_abs(&g),
            step,
            evaluations,
        };
        on_iter(&row);
        trace.push(row);
        if max_abs(&g) <= opts.gtol {
            status = OptimStatus::GradientTolerance;
            break;
        }
        if change <= opts.ftol {
            status = OptimStatus::RelativeChange;
            break;
        }
    }
    Ok(OptimResult {
        x,
        loglik: fx,
        gradient: g,
        status,
        iterations,
        evaluations,
        trace,
        inverse_hessian: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
        let ga = -(-2.0 * (1.0 - a) - 400.0 * a * (b - a * a));
        let gb = -(200.0 * (b - a * a));
        Ok((f, vec![ga, gb]))
    }

    #[test]
    fn finds_rosenbrock_optimum_with_monotone_trace() {
        let opts = OptimOptions {
            ftol: 0.0,
            gtol: 1e-8,
            ..OptimOptions::default()
        };
        let r = maximize(rosenbrock, &[-1.2, 1.0], &opts, |_| {}).unwrap();
        assert_eq!(r.status, OptimStatus::GradientTolerance);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        for w in r.trace.windows(2) {
            assert!(w[1].loglik >= w[0].loglik);
        }
    }

    #[test]
    fn concave_quadratic_converges_quickly() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let f = -(3.0 * (x[0] - 2.0).powi(2) + 0.5 * (x[1] + 1.0).powi(2) + (x[0] - 2.0) * (x[1] + 1.0));
            Ok((f, vec![-(6.0 * (x[0] - 2.0) + (x[1] + 1.0)), -((x[1] + 1.0) + (x[0] - 2.0))]))
        };
        let r = maximize(f, &[0.0, 0.0], &OptimOptions { ftol: 0.0, ..Default::default() }, |_| {}).unwrap();
        assert!(r.status.converged());
        assert!(r.iterations < 20);
        assert!((r.x[0] - 2.0).abs() < 1e-5 && (r.x[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn warm_inverse_hessian_speeds_up_a_restart() {
        let opts = OptimOptions { ftol: 0.0, gtol: 1e-10, ..Default::default() };
        let first = maximize(rosenbrock, &[-1.2, 1.0], &OptimOptions { max_iter: 25, ..opts }, |_| {}).unwrap();
        let cold = maximize(rosenbrock, &first.x, &opts, |_| {}).unwrap();
        let warm = maximize_from(rosenbrock, &first.x, Some(&first.inverse_hessian), &opts, |_| {}).unwrap();
        assert!(warm.status.converged() && cold.status.converged());
        assert!(warm.evaluations <= cold.evaluations, "{} > {}", warm.evaluations, cold.evaluations);
    }

    #[test]
    fn nonfinite_start_is_an_error() {
        let f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(maximize(f, &[0.0], &OptimOptions::default(), |_| {}).is_err());
    }

    #[test]
    fn unbounded_objective_stops_without_error() {
        // ln(logistic(x)) increases towards 0 without a maximizer
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = crate::distributions::log_logistic(x[0]);
            Ok((v, vec![1.0 - crate::distributions::logistic(x[0])]))
        };
        let opts = OptimOptions { max_iter: 50, ..Default::default() };
        let r = maximize(f, &[0.0], &opts, |_| {}).unwrap();
        assert!(r.x[0] > 5.0);
    }
}
