//! Deterministic starting values and seeded perturbations of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::choice::Coef;
use crate::data::dataset::Dataset;
use crate::data::spec::ModelSpec;
use crate::distributions::std_normal_inv_cdf;
use crate::error::{Error, Result};
use crate::estimation::logit::fit_plain_logit;
use crate::params::{ParamLayout, ParameterSet};

/// Starting sd of every random coefficient.
pub const START_SD: f64 = 0.5;

/// Cut points placed at the smoothed marginal category shares of the
/// indicators, scaled by √2 for the unit latent variance plus unit error
/// variance of the starting model.
pub fn threshold_starts(data: &Dataset, spec: &ModelSpec) -> Result<Vec<Vec<f64>>> {
    let inds = spec.indicators();
    let counts_of = |hs: &[usize], c: usize| {
        let mut counts = vec![0.5; c];
        for r in &data.respondents {
            for &h in hs {
                if let Some(Some(v)) = r.indicators.get(h) {
                    if *v >= 1 && (*v as usize) <= c {
                        counts[*v as usize - 1] += 1.0;
                    }
                }
            }
        }
        counts
    };
    let mut out = Vec::with_capacity(inds.len());
    for (h, info) in inds.iter().enumerate() {
        let c = info.categories as usize;
        let members: Vec<usize> = if spec.options.shared_thresholds {
            inds.iter()
                .enumerate()
                .filter(|(_, i)| i.latent == info.latent)
                .map(|(k, _)| k)
                .collect()
        } else {
            vec![h]
        };
        let counts = counts_of(&members, c);
        let total: f64 = counts.iter().sum();
        let mut cum = 0.0;
        let mut taus = Vec::with_capacity(c - 1);
        for count in &counts[..c - 1] {
            cum += count;
            taus.push(std::f64::consts::SQRT_2 * std_normal_inv_cdf(cum / total)?);
        }
        out.push(taus);
    }
    Ok(out)
}

/// γ = 0, Λ = 0, ψ = 1, unit loadings, frequency-based thresholds and
/// choice coefficients from a fixed-coefficient logit. With several classes
/// the choice coefficients are spread so the classes start apart.
pub fn initial_theta(layout: &ParamLayout, spec: &ModelSpec, data: &Dataset) -> Result<ParameterSet> {
    let mut theta = layout.neutral();
    let taus = threshold_starts(data, spec)?;
    let q_count = theta.classes.len();
    for (q, class) in theta.classes.iter_mut().enumerate() {
        class.measurement.thresholds = taus.clone();
        let fit = fit_plain_logit(data, &class.choice.sources, spec.alternatives)?;
        let f = if q_count > 1 {
            0.5 + q as f64 / (q_count - 1) as f64
        } else {
            1.0
        };
        for (alt, coefs) in class.choice.alternatives.iter_mut().zip(&fit.coefs) {
            alt.asc = coefs[0] + 2.0 * (f - 1.0);
            for (c, &b) in alt.coefs.iter_mut().zip(&coefs[1..]) {
                *c = match c {
                    Coef::Fixed(_) => Coef::Fixed(f * b),
                    Coef::Normal { .. } => Coef::Normal {
                        mean: f * b,
                        sd: START_SD,
                    },
                };
            }
        }
    }
    layout.apply_fixed(&theta)
}

/// Packed start number `index` (zero-based): start 0 is `base` itself, later
/// starts add independent N(0, sd²) noise to every packed coordinate.
pub fn jittered_start(base: &[f64], index: usize, seed: u64, sd: f64) -> Result<Vec<f64>> {
    if index == 0 {
        return Ok(base.to_vec());
    }
    let normal = Normal::new(0.0, sd).map_err(|e| Error::InvalidArgument(format!("jitter sd {sd}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    Ok(base.iter().map(|v| v + normal.sample(&mut rng)).collect())
}
