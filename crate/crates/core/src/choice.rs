//! Logit choice kernel with optional normally distributed coefficients.
//!
//! Alternative 0 is the opt-out with utility fixed at zero; every other
//! alternative carries its own constant, covariate coefficients and latent
//! coefficients.

use crate::data::dataset::{ChoiceScenario, Respondent};
use crate::distributions::{log_logistic, log_softmax, softmax, PROB_FLOOR};
use crate::error::{Error, Result};

/// Where a utility covariate's value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateSource {
    /// Index into the respondent's explanatory covariates `x`.
    Respondent(usize),
    /// Index into the scenario's attribute vector.
    Scenario(usize),
}

impl CovariateSource {
    #[inline]
    pub fn value(self, x: &[f64], scenario: &ChoiceScenario) -> f64 {
        match self {
            CovariateSource::Respondent(k) => x[k],
            CovariateSource::Scenario(a) => scenario.attributes[a],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coef {
    Fixed(f64),
    Normal { mean: f64, sd: f64 },
}

impl Coef {
    pub fn is_random(&self) -> bool {
        matches!(self, Coef::Normal { .. })
    }
}

/// Utility of one non-opt-out alternative.
#[derive(Debug, Clone, PartialEq)]
pub struct AlternativeUtility {
    pub asc: f64,
    /// Aligned with `ChoiceParams::sources`.
    pub coefs: Vec<Coef>,
    /// Aligned with `ChoiceParams::latent_index`.
    pub latent_coefs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceParams {
    pub sources: Vec<CovariateSource>,
    /// Latent variables (by position in the latent vector) entering utility.
    pub latent_index: Vec<usize>,
    /// Alternatives 1..J.
    pub alternatives: Vec<AlternativeUtility>,
}

impl ChoiceParams {
    pub fn n_alternatives(&self) -> usize {
        self.alternatives.len() + 1
    }

    pub fn random_count(&self) -> usize {
        self.alternatives
            .iter()
            .map(|a| a.coefs.iter().filter(|c| c.is_random()).count())
            .sum()
    }

    pub fn check(&self) -> Result<()> {
        for (j, alt) in self.alternatives.iter().enumerate() {
            if alt.coefs.len() != self.sources.len() {
                return Err(Error::dimension(format!("alternative {} coefficients", j + 1), self.sources.len(), alt.coefs.len()));
            }
            if alt.latent_coefs.len() != self.latent_index.len() {
                return Err(Error::dimension(
                    format!("alternative {} latent coefficients", j + 1),
                    self.latent_index.len(),
                    alt.latent_coefs.len(),
                ));
            }
            for c in &alt.coefs {
                if let Coef::Normal { sd, .. } = c {
                    if !(*sd > 0.0) {
                        return Err(Error::InvalidArgument(format!("random coefficient sd {sd} must be > 0")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Realized random coefficients in alternative-major, declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefRealization {
    pub values: Vec<f64>,
}

/// β_p = μ_p + σ_p·z_p for every random coefficient.
pub fn realize_coefs(params: &ChoiceParams, std_draws: &[f64]) -> Result<CoefRealization> {
    let p = params.random_count();
    if std_draws.len() != p {
        return Err(Error::dimension("random coefficient draws", p, std_draws.len()));
    }
    let mut values = Vec::with_capacity(p);
    for alt in &params.alternatives {
        for c in &alt.coefs {
            if let Coef::Normal { mean, sd } = c {
                values.push(mean + sd * std_draws[values.len()]);
            }
        }
    }
    Ok(CoefRealization { values })
}

/// Deterministic utilities of all `J` alternatives, opt-out first at 0.
pub fn utility(
    scenario: &ChoiceScenario,
    x: &[f64],
    latent: &[f64],
    coefs: &CoefRealization,
    params: &ChoiceParams,
) -> Vec<f64> {
    let mut v = Vec::with_capacity(params.n_alternatives());
    v.push(0.0);
    let mut p = 0;
    for alt in &params.alternatives {
        let mut u = alt.asc;
        for (c, src) in alt.coefs.iter().zip(&params.sources) {
            let beta = match c {
                Coef::Fixed(b) => *b,
                Coef::Normal { .. } => {
                    p += 1;
                    coefs.values[p - 1]
                }
            };
            u += beta * src.value(x, scenario);
        }
        for (g, gamma) in params.latent_index.iter().zip(&alt.latent_coefs) {
            u += gamma * latent[*g];
        }
        v.push(u);
    }
    v
}

/// Logit probabilities of the utility vector.
pub fn choice_prob(v: &[f64]) -> Vec<f64> {
    softmax(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelLoglik {
    pub value: f64,
    /// Scenarios whose probability was floored at `PROB_FLOOR`.
    pub floored: usize,
}

/// Σ_t ln P(chosen_t) with the latent values and coefficients held fixed
/// across the respondent's scenarios.
pub fn panel_loglik_given_draw(
    respondent: &Respondent,
    latent: &[f64],
    coefs: &CoefRealization,
    params: &ChoiceParams,
) -> PanelLoglik {
    let floor = PROB_FLOOR.ln();
    let mut value = 0.0;
    let mut floored = 0;
    for s in &respondent.scenarios {
        let v = utility(s, &respondent.x, latent, coefs, params);
        let lp = if v.len() == 2 {
            let d = v[1] - v[0];
            if s.chosen == 1 {
                log_logistic(d)
            } else {
                log_logistic(-d)
            }
        } else {
            log_softmax(&v)[s.chosen]
        };
        if lp < floor {
            floored += 1;
            value += floor;
        } else {
            value += lp;
        }
    }
    PanelLoglik { value, floored }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::std_normal_cdf;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn binary(asc: f64, coefs: Vec<Coef>, latent: Vec<f64>) -> ChoiceParams {
        let sources = (0..coefs.len()).map(CovariateSource::Scenario).collect();
        let latent_index = (0..latent.len()).collect();
        ChoiceParams {
            sources,
            latent_index,
            alternatives: vec![AlternativeUtility {
                asc,
                coefs,
                latent_coefs: latent,
            }],
        }
    }

    fn person(scenarios: Vec<ChoiceScenario>) -> Respondent {
        Respondent {
            id: "p".into(),
            z: vec![],
            x: vec![],
            indicators: vec![],
            scenarios,
        }
    }

    fn scen(attrs: &[f64], chosen: usize) -> ChoiceScenario {
        ChoiceScenario { attributes: attrs.to_vec(), chosen }
    }

    #[test]
    fn realization_examples() {
        let p = binary(0.0, vec![Coef::Normal { mean: 0.125, sd: 0.35 }], vec![]);
        assert_eq!(realize_coefs(&p, &[0.0]).unwrap().values, vec![0.125]);
        assert_abs_diff_eq!(realize_coefs(&p, &[1.0]).unwrap().values[0], 0.475, epsilon = 1e-15);
        let p = binary(0.0, vec![Coef::Normal { mean: 0.331, sd: 0.154 }], vec![]);
        let z = -0.331 / 0.154;
        assert_abs_diff_eq!(z, -2.149, epsilon = 1e-3);
        assert_abs_diff_eq!(realize_coefs(&p, &[z]).unwrap().values[0], 0.0, epsilon = 1e-15);
        // erf-based tail: Φ(-2.149) = 0.5·erfc(2.149/√2)
        let tail = 0.5 * libm::erfc(2.149 / std::f64::consts::SQRT_2);
        assert_abs_diff_eq!(std_normal_cdf(-2.149), tail, epsilon = 1e-15);
        assert_abs_diff_eq!(tail, 0.0158, epsilon = 1e-4);
        assert!(realize_coefs(&p, &[]).is_err());
    }

    #[test]
    fn utility_examples() {
        let none = CoefRealization { values: vec![] };
        let p = binary(0.0, vec![Coef::Fixed(0.0)], vec![0.0]);
        assert_eq!(utility(&scen(&[3.0], 1), &[], &[2.0], &none, &p), vec![0.0, 0.0]);
        let p = binary(-0.372, vec![], vec![]);
        assert_eq!(utility(&scen(&[], 1), &[], &[], &none, &p), vec![0.0, -0.372]);
        let p2 = binary(-0.372, vec![], vec![0.938]);
        let v = utility(&scen(&[], 1), &[], &[1.0], &none, &p2);
        assert_abs_diff_eq!(v[1] - (-0.372), 0.938, epsilon = 1e-15);
    }

    #[test]
    fn probability_examples() {
        assert_eq!(choice_prob(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = choice_prob(&[0.0, -0.372]);
        assert_abs_diff_eq!(p[1], 0.408, epsilon = 1e-3);
        assert_abs_diff_eq!(p[0], 0.592, epsilon = 1e-3);
    }

    #[test]
    fn panel_examples() {
        let none = CoefRealization { values: vec![] };
        let p = binary(0.0, vec![], vec![]);
        let r = person((0..10).map(|t| scen(&[], t % 2)).collect());
        let ll = panel_loglik_given_draw(&r, &[], &none, &p);
        assert_abs_diff_eq!(ll.value, 10.0 * 0.5f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ll.value, -6.9315, epsilon = 1e-4);

        let p = binary(0.3, vec![Coef::Fixed(-0.2)], vec![]);
        let r = person(vec![scen(&[2.0], 0)]);
        let single = panel_loglik_given_draw(&r, &[], &none, &p).value;
        let v = utility(&r.scenarios[0], &[], &[], &none, &p);
        assert_abs_diff_eq!(single, choice_prob(&v)[0].ln(), epsilon = 1e-15);

        let p = binary(50.0, vec![], vec![]);
        let r = person((0..10).map(|_| scen(&[], 1)).collect());
        assert!(panel_loglik_given_draw(&r, &[], &none, &p).value.abs() < 1e-19);

        let p = binary(-1000.0, vec![], vec![]);
        let r = person(vec![scen(&[], 1)]);
        let ll = panel_loglik_given_draw(&r, &[], &none, &p);
        assert_eq!(ll.floored, 1);
        assert_eq!(ll.value, PROB_FLOOR.ln());
    }

    #[test]
    fn zero_sd_matches_fixed_bitwise() {
        let fixed = binary(0.2, vec![Coef::Fixed(-0.4), Coef::Fixed(0.7)], vec![0.5]);
        let mixed = binary(0.2, vec![Coef::Normal { mean: -0.4, sd: 0.0 }, Coef::Fixed(0.7)], vec![0.5]);
        let r = person((0..10).map(|t| scen(&[t as f64, 1.0 + t as f64 / 3.0], t % 2)).collect());
        for z in [-2.5, 0.0, 1.3] {
            let real = realize_coefs(&mixed, &[z]).unwrap();
            let a = panel_loglik_given_draw(&r, &[0.8], &real, &mixed).value;
            let b = panel_loglik_given_draw(&r, &[0.8], &CoefRealization { values: vec![] }, &fixed).value;
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one_and_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 2..6), c in -100.0f64..100.0) {
            let p = choice_prob(&v);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = choice_prob(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let argmax = |p: &[f64]| p.iter().enumerate().fold(0, |b, (i, x)| if *x > p[b] { i } else { b });
            let argmax_v = v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&p), argmax_v);
        }

        #[test]
        fn use_probability_increases_with_utility(v in -20.0f64..20.0, dv in 0.01f64..2.0) {
            let a = choice_prob(&[0.0, v])[1];
            let b = choice_prob(&[0.0, v + dv])[1];
            prop_assert!(b > a);
        }

        #[test]
        fn panel_is_sum_of_scenarios(
            asc in -2.0f64..2.0,
            b in -1.0f64..1.0,
            attrs in prop::collection::vec((0.0f64..5.0, 0usize..2), 1..12),
        ) {
            let p = binary(asc, vec![Coef::Fixed(b)], vec![]);
            let none = CoefRealization { values: vec![] };
            let r = person(attrs.iter().map(|(a, c)| scen(&[*a], *c)).collect());
            let whole = panel_loglik_given_draw(&r, &[], &none, &p).value;
            let parts: f64 = r.scenarios.iter()
                .map(|s| panel_loglik_given_draw(&person(vec![s.clone()]), &[], &none, &p).value)
                .sum();
            prop_assert!((whole - parts).abs() <= 1e-12);
        }
    }
}
