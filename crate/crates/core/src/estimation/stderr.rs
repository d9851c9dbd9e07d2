//! Standard errors from the observed information (numerical Hessian of the
//! analytic gradient) or from the outer product of respondent scores.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{EvalRequest, Evaluator};
use crate::params::ParamLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeMethod {
    #[default]
    Hessian,
    Bhhh,
}

impl SeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SeMethod::Hessian => "hessian",
            SeMethod::Bhhh => "bhhh",
        }
    }
}

impl std::str::FromStr for SeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hessian" => Ok(SeMethod::Hessian),
            "bhhh" => Ok(SeMethod::Bhhh),
            other => Err(Error::InvalidArgument(format!("unknown standard-error method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeFlag {
    Ok,
    /// The information matrix has a zero row for this parameter.
    NoInformation,
    /// The parameter loads on a (near) null direction of the information
    /// matrix; the pseudo-inverse value is reported.
    Singular,
    /// The packed coordinate exceeds the boundary threshold.
    Boundary,
}

impl SeFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            SeFlag::Ok => "ok",
            SeFlag::NoInformation => "no_information",
            SeFlag::Singular => "singular",
            SeFlag::Boundary => "boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardErrors {
    pub method: SeMethod,
    /// Covariance of the packed free coordinates.
    pub cov_packed: DMatrix<f64>,
    /// Covariance of the natural values of the free entries.
    pub cov_natural: DMatrix<f64>,
    /// Natural-scale standard errors; NaN where unavailable.
    pub se: Vec<f64>,
    pub flags: Vec<SeFlag>,
}

/// Negative central-difference Hessian of the log-likelihood, built from the
/// analytic gradient and symmetrized.
pub fn numerical_information(evaluator: &Evaluator<'_>, free: &[f64]) -> Result<DMatrix<f64>> {
    let k = free.len();
    let mut h = DMatrix::zeros(k, k);
    let mut x = free.to_vec();
    for i in 0..k {
        let step = 1e-4 * free[i].abs().max(1.0);
        x[i] = free[i] + step;
        let gp = evaluator.evaluate(&x, EvalRequest::GRADIENT)?.gradient;
        x[i] = free[i] - step;
        let gm = evaluator.evaluate(&x, EvalRequest::GRADIENT)?.gradient;
        x[i] = free[i];
        for j in 0..k {
            h[(j, i)] = (gp[j] - gm[j]) / (2.0 * step);
        }
    }
    Ok(-(&h + h.transpose()) * 0.5)
}

/// Σ_n s_n s_nᵀ over respondent scores.
pub fn bhhh_information(scores: &[Vec<f64>], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(k, k);
    for s in scores {
        for i in 0..k {
            if s[i] == 0.0 {
                continue;
            }
            for j in 0..k {
                m[(i, j)] += s[i] * s[j];
            }
        }
    }
    m
}

/// Inverts an information matrix. Parameters with no information get NaN
/// variances; if the remainder is not positive definite a pseudo-inverse is
/// used and the parameters touching its null space are flagged.
pub fn invert_information(info: &DMatrix<f64>) -> (DMatrix<f64>, Vec<SeFlag>) {
    let k = info.nrows();
    let mut flags = vec![SeFlag::Ok; k];
    let scale = (0..k).map(|i| info[(i, i)].abs()).fold(0.0, f64::max);
    let active: Vec<usize> = (0..k)
        .filter(|&i| {
            let d = info[(i, i)];
            d.is_finite() && d > 1e-12 * scale.max(1e-300) && (0..k).all(|j| info[(i, j)].is_finite())
        })
        .collect();
    for i in 0..k {
        if !active.contains(&i) {
            flags[i] = SeFlag::NoInformation;
        }
    }
    let m = active.len();
    let sub = DMatrix::from_fn(m, m, |a, b| info[(active[a], active[b])]);
    let inv_sub = match sub.clone().cholesky() {
        Some(c) => c.inverse(),
        None => {
            let eig = SymmetricEigen::new(sub);
            let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(*v));
            let tol = top * 1e-10 * m as f64;
            let mut inv = DMatrix::zeros(m, m);
            let mut null_weight = vec![0.0; m];
            for (e, &lam) in eig.eigenvalues.iter().enumerate() {
                let v = eig.eigenvectors.column(e);
                if lam > tol {
                    inv += v * v.transpose() / lam;
                } else {
                    for a in 0..m {
                        null_weight[a] += v[a] * v[a];
                    }
                }
            }
            for a in 0..m {
                if null_weight[a] > 1e-6 {
                    flags[active[a]] = SeFlag::Singular;
                }
            }
            inv
        }
    };
    let mut cov = DMatrix::from_element(k, k, f64::NAN);
    for a in 0..m {
        for b in 0..m {
            cov[(active[a], active[b])] = inv_sub[(a, b)];
        }
    }
    (cov, flags)
}

/// Natural-scale covariance J·Cov·Jᵀ. A natural value inherits the worst
/// flag of the packed coordinates it depends on.
pub fn delta_method(
    layout: &ParamLayout,
    free: &[f64],
    cov_packed: &DMatrix<f64>,
    flags: &[SeFlag],
) -> Result<(DMatrix<f64>, Vec<f64>, Vec<SeFlag>)> {
    let jac = layout.jacobian(free)?;
    let k = free.len();
    let clean = cov_packed.map(|v| if v.is_finite() { v } else { 0.0 });
    let cov_nat = &jac * clean * jac.transpose();
    let mut out_flags = flags.to_vec();
    for i in 0..k {
        for j in 0..k {
            if jac[(i, j)] != 0.0 && flags[j] != SeFlag::Ok && out_flags[i] == SeFlag::Ok {
                out_flags[i] = flags[j];
            }
        }
    }
    let se = (0..k)
        .map(|i| {
            let v = cov_nat[(i, i)];
            if out_flags[i] == SeFlag::NoInformation || !(v >= 0.0) {
                f64::NAN
            } else {
                v.sqrt()
            }
        })
        .collect();
    Ok((cov_nat, se, out_flags))
}

pub fn standard_errors(evaluator: &Evaluator<'_>, free: &[f64], method: SeMethod) -> Result<StandardErrors> {
    let info = match method {
        SeMethod::Hessian => numerical_information(evaluator, free)?,
        SeMethod::Bhhh => {
            let eval = evaluator.evaluate(free, EvalRequest::SCORES)?;
            bhhh_information(&eval.scores, free.len())
        }
    };
    let (cov_packed, flags) = invert_information(&info);
    let (cov_natural, se, flags) = delta_method(evaluator.layout(), free, &cov_packed, &flags)?;
    Ok(StandardErrors {
        method,
        cov_packed,
        cov_natural,
        se,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverts_positive_definite_information() {
        let info = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let (cov, flags) = invert_information(&info);
        assert!(flags.iter().all(|f| *f == SeFlag::Ok));
        let id = &info * &cov;
        assert!((id - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn zero_row_is_flagged_and_others_survive() {
        let info = DMatrix::from_row_slice(3, 3, &[4.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0]);
        let (cov, flags) = invert_information(&info);
        assert_eq!(flags, vec![SeFlag::Ok, SeFlag::NoInformation, SeFlag::Ok]);
        assert!(cov[(1, 1)].is_nan());
        assert!((cov[(0, 0)] - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_parameters_use_pseudo_inverse() {
        // information of a model that only sees a + b
        let info = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 5.0]);
        let (cov, flags) = invert_information(&info);
        assert_eq!(flags, vec![SeFlag::Singular, SeFlag::Singular, SeFlag::Ok]);
        assert!((cov[(2, 2)] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn bhhh_sums_outer_products() {
        let m = bhhh_information(&[vec![1.0, 2.0], vec![0.0, 1.0]], 2);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]));
    }
}
