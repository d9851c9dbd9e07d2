//! Fixed-coefficient logit fitted by Newton–Raphson, used for starting
//! values, and the closed-form intercept-only null log-likelihood.

use nalgebra::{DMatrix, DVector};

use crate::choice::CovariateSource;
use crate::data::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlainLogit {
    /// Per non-opt-out alternative: constant followed by one coefficient per
    /// covariate source.
    pub coefs: Vec<Vec<f64>>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximizes Σ ln P(chosen) with utilities asc_j + Σ_k β_jk·value_k.
pub fn fit_plain_logit(data: &Dataset, sources: &[CovariateSource], alternatives: usize) -> Result<PlainLogit> {
    if alternatives < 2 {
        return Err(Error::InvalidArgument("a logit needs at least 2 alternatives".into()));
    }
    let k = sources.len() + 1;
    let j = alternatives - 1;
    let dim = j * k;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(data.observation_count());
    for r in &data.respondents {
        for s in &r.scenarios {
            let mut v = Vec::with_capacity(k);
            v.push(1.0);
            v.extend(sources.iter().map(|src| src.value(&r.x, s)));
            rows.push((v, s.chosen));
        }
    }
    let eval = |beta: &DVector<f64>, want: bool| -> (f64, DVector<f64>, DMatrix<f64>) {
        let mut ll = 0.0;
        let mut g = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);
        let mut u = vec![0.0; alternatives];
        let mut p = vec![0.0; alternatives];
        for (x, chosen) in &rows {
            u[0] = 0.0;
            for a in 0..j {
                u[a + 1] = (0..k).map(|c| beta[a * k + c] * x[c]).sum();
            }
            let mx = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = u.iter().map(|v| (v - mx).exp()).sum();
            let lz = mx + z.ln();
            for a in 0..alternatives {
                p[a] = (u[a] - lz).exp();
            }
            ll += u[*chosen] - lz;
            if !want {
                continue;
            }
            for a in 0..j {
                let res = if *chosen == a + 1 { 1.0 } else { 0.0 } - p[a + 1];
                for c in 0..k {
                    g[a * k + c] += res * x[c];
                }
                for b in 0..j {
                    let w = if a == b { p[a + 1] * (1.0 - p[a + 1]) } else { -p[a + 1] * p[b + 1] };
                    for c in 0..k {
                        for d in 0..k {
                            h[(a * k + c, b * k + d)] -= w * x[c] * x[d];
                        }
                    }
                }
            }
        }
        (ll, g, h)
    };
    let mut beta = DVector::zeros(dim);
    let (mut ll, _, _) = eval(&beta, false);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        let (_, g, h) = eval(&beta, true);
        if g.amax() < 1e-10 {
            converged = true;
            break;
        }
        let neg = -h;
        let step = match neg.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => {
                let ridge = neg + DMatrix::identity(dim, dim) * 1e-6;
                match ridge.cholesky() {
                    Some(c) => c.solve(&g),
                    None => g.clone(),
                }
            }
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let trial = &beta + &step * t;
            let (lt, _, _) = eval(&trial, false);
            if lt.is_finite() && lt >= ll {
                beta = trial;
                improved = lt > ll || step.amax() * t < 1e-14;
                ll = lt;
                break;
            }
            t *= 0.5;
        }
        if !improved || step.amax() * t < 1e-12 {
            converged = step.amax() * t < 1e-8;
            break;
        }
    }
    // separated data drive coefficients towards infinity; keep them usable as starts
    let coefs = (0..j)
        .map(|a| (0..k).map(|c| beta[a * k + c].clamp(-20.0, 20.0)).collect())
        .collect();
    Ok(PlainLogit {
        coefs,
        loglik: ll,
        iterations,
        converged,
    })
}

/// Σ_j N_j ln(N_j / N): the maximized log-likelihood of a model with one
/// constant per alternative and nothing else.
pub fn null_loglik(data: &Dataset, alternatives: usize) -> f64 {
    let mut counts = vec![0usize; alternatives];
    for r in &data.respondents {
        for s in &r.scenarios {
            counts[s.chosen] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64 * (c as f64 / n as f64).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{ChoiceScenario, DatasetMeta, Respondent};

    fn data(rows: &[(f64, usize)]) -> Dataset {
        Dataset {
            respondents: vec![Respondent {
                id: "a".into(),
                z: vec![],
                x: vec![],
                indicators: vec![],
                scenarios: rows
                    .iter()
                    .map(|(a, c)| ChoiceScenario { attributes: vec![*a], chosen: *c })
                    .collect(),
            }],
            meta: DatasetMeta {
                membership_names: vec![],
                explanatory_names: vec![],
                attribute_names: vec!["a".into()],
                indicator_names: vec![],
                categories: vec![],
                alternatives: 2,
            },
        }
    }

    #[test]
    fn intercept_only_matches_share() {
        let d = data(&[(0.0, 1), (0.0, 1), (0.0, 1), (0.0, 0)]);
        let fit = fit_plain_logit(&d, &[], 2).unwrap();
        assert!(fit.converged);
        assert!((fit.coefs[0][0] - 3f64.ln()).abs() < 1e-10);
        assert!((fit.loglik - null_loglik(&d, 2)).abs() < 1e-12);
        assert!((null_loglik(&d, 2) - (3.0 * 0.75f64.ln() + 0.25f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn slope_score_vanishes_at_fit() {
        let d = data(&[(1.0, 1), (2.0, 1), (3.0, 0), (4.0, 1), (5.0, 0), (6.0, 0), (2.5, 0), (4.5, 1)]);
        let fit = fit_plain_logit(&d, &[CovariateSource::Scenario(0)], 2).unwrap();
        let (a, b) = (fit.coefs[0][0], fit.coefs[0][1]);
        let mut g = [0.0; 2];
        for s in &d.respondents[0].scenarios {
            let x = s.attributes[0];
            let p = 1.0 / (1.0 + (-(a + b * x)).exp());
            let y = s.chosen as f64;
            g[0] += y - p;
            g[1] += (y - p) * x;
        }
        assert!(g[0].abs() < 1e-9 && g[1].abs() < 1e-9);
        assert!(b < 0.0);
    }

    #[test]
    fn separated_data_do_not_fail() {
        let d = data(&[(0.0, 1), (0.0, 1)]);
        let fit = fit_plain_logit(&d, &[], 2).unwrap();
        assert!(fit.coefs[0][0] > 5.0);
    }
}
