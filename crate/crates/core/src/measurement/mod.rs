//! Ordered-probit measurement equations linking latent variables to ordinal
//! indicators, plus scale reliability and validity diagnostics.

pub mod reliability;

use crate::distributions::{std_normal_interval, PROB_FLOOR};
use crate::error::{Error, Result};

/// Per-class measurement parameters for `H` indicators, each loading on
/// exactly one latent variable.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementParams {
    /// Latent variable each indicator loads on.
    pub latent_of: Vec<usize>,
    pub loadings: Vec<f64>,
    pub intercepts: Vec<f64>,
    /// √Θ_h.
    pub error_sd: Vec<f64>,
    /// Interior cut points τ_{h,1} < … < τ_{h,C_h−1}.
    pub thresholds: Vec<Vec<f64>>,
}

impl MeasurementParams {
    pub fn n_indicators(&self) -> usize {
        self.latent_of.len()
    }

    pub fn categories(&self, h: usize) -> usize {
        self.thresholds[h].len() + 1
    }

    pub fn check(&self) -> Result<()> {
        let h = self.latent_of.len();
        for (what, len) in [
            ("loadings", self.loadings.len()),
            ("intercepts", self.intercepts.len()),
            ("error_sd", self.error_sd.len()),
            ("thresholds", self.thresholds.len()),
        ] {
            if len != h {
                return Err(Error::dimension(format!("measurement {what}"), h, len));
            }
        }
        for (i, sd) in self.error_sd.iter().enumerate() {
            if !(*sd > 0.0) {
                return Err(Error::InvalidArgument(format!("indicator {i}: error sd {sd} must be > 0")));
            }
        }
        for (i, t) in self.thresholds.iter().enumerate() {
            if t.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidArgument(format!(
                    "indicator {i}: thresholds {t:?} are not strictly increasing"
                )));
            }
        }
        Ok(())
    }

    /// (τ_{h,m−1}, τ_{h,m}) with the open ends at ±∞; `m` is 1-based.
    #[inline]
    pub fn cell_bounds(&self, h: usize, m: usize) -> (f64, f64) {
        let t = &self.thresholds[h];
        let lower = if m <= 1 { f64::NEG_INFINITY } else { t[m - 2] };
        let upper = if m > t.len() { f64::INFINITY } else { t[m - 1] };
        (lower, upper)
    }
}

/// Deterministic part of the indicator propensity, D_h·latent + ξ_h.
#[inline]
pub fn indicator_propensity(latent: &[f64], h: usize, params: &MeasurementParams) -> f64 {
    params.loadings[h] * latent[params.latent_of[h]] + params.intercepts[h]
}

/// Probability that indicator `h` falls in category `m` (1-based).
pub fn indicator_cell_prob(latent: &[f64], h: usize, m: usize, params: &MeasurementParams) -> f64 {
    let prop = indicator_propensity(latent, h, params);
    let sd = params.error_sd[h];
    let (lower, upper) = params.cell_bounds(h, m);
    std_normal_interval((lower - prop) / sd, (upper - prop) / sd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementLoglik {
    pub value: f64,
    /// Number of cells floored at `PROB_FLOOR`.
    pub floored: usize,
}

/// Σ_h ln P(I_h = m_h | latent). Missing responses contribute nothing when
/// `drop_missing` is set and are an error otherwise.
pub fn measurement_loglik(
    responses: &[Option<i64>],
    latent: &[f64],
    params: &MeasurementParams,
    drop_missing: bool,
) -> Result<MeasurementLoglik> {
    if responses.len() != params.n_indicators() {
        return Err(Error::dimension("indicator responses", params.n_indicators(), responses.len()));
    }
    let mut value = 0.0;
    let mut floored = 0;
    for (h, response) in responses.iter().enumerate() {
        let m = match response {
            Some(m) if *m >= 1 && (*m as usize) <= params.categories(h) => *m as usize,
            Some(m) => {
                return Err(Error::InvalidArgument(format!(
                    "indicator {h}: category {m} outside 1..={}",
                    params.categories(h)
                )))
            }
            None if drop_missing => continue,
            None => return Err(Error::InvalidArgument(format!("indicator {h}: missing response"))),
        };
        let p = indicator_cell_prob(latent, h, m, params);
        if p < PROB_FLOOR {
            floored += 1;
            value += PROB_FLOOR.ln();
        } else {
            value += p.ln();
        }
    }
    Ok(MeasurementLoglik { value, floored })
}
