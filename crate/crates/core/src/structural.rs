//! Structural equations: observed covariates shift the means of Gaussian
//! latent variables, and standard-normal draws are mapped to latent
//! realizations through the Cholesky factor of Ψ.

use crate::distributions::{mvn_logpdf, Covariance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralParams {
    /// For each latent variable, the positions in the respondent covariate
    /// vector `x` that enter its mean.
    pub covariates: Vec<Vec<usize>>,
    /// Coefficients aligned with `covariates`.
    pub lambda: Vec<Vec<f64>>,
    pub psi: Covariance,
}

impl StructuralParams {
    pub fn n_latent(&self) -> usize {
        self.covariates.len()
    }

    pub fn check(&self) -> Result<()> {
        let g = self.covariates.len();
        if self.lambda.len() != g {
            return Err(Error::dimension("structural lambda rows", g, self.lambda.len()));
        }
        if self.psi.dim() != g {
            return Err(Error::dimension("structural psi", g, self.psi.dim()));
        }
        for (c, l) in self.covariates.iter().zip(&self.lambda) {
            if c.len() != l.len() {
                return Err(Error::dimension("structural lambda row", c.len(), l.len()));
            }
        }
        Ok(())
    }
}

/// Λx for the sparse Λ described by `params`.
pub fn latent_mean(x: &[f64], params: &StructuralParams) -> Vec<f64> {
    let mut out = vec![0.0; params.n_latent()];
    latent_mean_into(x, params, &mut out);
    out
}

#[inline]
pub(crate) fn latent_mean_into(x: &[f64], params: &StructuralParams, out: &mut [f64]) {
    for (g, (cols, lam)) in params.covariates.iter().zip(&params.lambda).enumerate() {
        let mut m = 0.0;
        for (&k, &l) in cols.iter().zip(lam) {
            m += l * x[k];
        }
        out[g] = m;
    }
}

/// mean + L·std_draw with L the lower Cholesky factor of Ψ.
pub fn realize_latents(mean: &[f64], psi: &Covariance, std_draw: &[f64]) -> Result<Vec<f64>> {
    let g = psi.dim();
    if mean.len() != g {
        return Err(Error::dimension("latent mean", g, mean.len()));
    }
    if std_draw.len() < g {
        return Err(Error::dimension("latent draw", g, std_draw.len()));
    }
    let l = psi.cholesky();
    let mut out = mean.to_vec();
    if psi.is_diagonal() {
        for i in 0..g {
            out[i] += l[(i, i)] * std_draw[i];
        }
    } else {
        for i in 0..g {
            for j in 0..=i {
                out[i] += l[(i, j)] * std_draw[j];
            }
        }
    }
    Ok(out)
}

/// ln N(latent; Λx, Ψ).
pub fn structural_logpdf(latent: &[f64], x: &[f64], params: &StructuralParams) -> Result<f64> {
    mvn_logpdf(latent, &latent_mean(x, params), &params.psi)
}
