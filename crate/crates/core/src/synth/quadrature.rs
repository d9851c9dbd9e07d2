//! Gauss–Hermite tensor quadrature of the class-conditional likelihood, an
//! independent check on the Halton simulator for low-dimensional models.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::choice::{panel_loglik_given_draw, realize_coefs};
use crate::data::dataset::Respondent;
use crate::distributions::log_sum_exp;
use crate::error::{Error, Result};
use crate::measurement::measurement_loglik;
use crate::params::ParameterSet;
use crate::structural::{latent_mean, realize_latents};

/// Largest latent-plus-random-coefficient dimension handled by quadrature.
pub const MAX_QUADRATURE_DIM: usize = 3;

/// Nodes and weights for ∫ f(x) φ(x) dx with φ the standard normal density,
/// by Golub–Welsch. Nodes ascend and weights sum to one.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("quadrature needs at least one node".into()));
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok((pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1 / total).collect()))
}

/// L_n|q by tensor Gauss–Hermite quadrature over the standardized latent
/// and random-coefficient dimensions, with the same integrand as the
/// simulated likelihood.
pub fn quadrature_person_likelihood(
    respondent: &Respondent,
    q: usize,
    theta: &ParameterSet,
    nodes: usize,
    drop_missing: bool,
) -> Result<f64> {
    Ok(quadrature_person_log_likelihood(respondent, q, theta, nodes, drop_missing)?.exp())
}

/// Log of [`quadrature_person_likelihood`], accumulated in log space.
pub fn quadrature_person_log_likelihood(
    respondent: &Respondent,
    q: usize,
    theta: &ParameterSet,
    nodes: usize,
    drop_missing: bool,
) -> Result<f64> {
    let class = theta
        .classes
        .get(q)
        .ok_or_else(|| Error::InvalidArgument(format!("class {q} out of range")))?;
    let g = class.structural.n_latent();
    let p = class.choice.random_count();
    let dim = g + p;
    if dim > MAX_QUADRATURE_DIM {
        return Err(Error::InvalidArgument(format!(
            "{dim} integration dimensions exceed the quadrature limit of {MAX_QUADRATURE_DIM}; use the simulated likelihood"
        )));
    }
    let (x, w) = gauss_hermite(nodes)?;
    let lw: Vec<f64> = w.iter().map(|v| v.ln()).collect();
    let mean = latent_mean(&respondent.x, &class.structural);
    let total = nodes.pow(dim as u32);
    let mut terms = Vec::with_capacity(total);
    let mut point = vec![0.0; dim];
    for idx in 0..total {
        let mut rest = idx;
        let mut log_weight = 0.0;
        for d in point.iter_mut() {
            let k = rest % nodes;
            rest /= nodes;
            *d = x[k];
            log_weight += lw[k];
        }
        let latent = realize_latents(&mean, &class.structural.psi, &point[..g])?;
        let coefs = realize_coefs(&class.choice, &point[g..])?;
        let c = panel_loglik_given_draw(respondent, &latent, &coefs, &class.choice);
        let m = measurement_loglik(&respondent.indicators, &latent, &class.measurement, drop_missing)?;
        terms.push(log_weight + c.value + m.value);
    }
    Ok(log_sum_exp(&terms))
}
