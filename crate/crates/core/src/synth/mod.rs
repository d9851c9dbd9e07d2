//! Synthetic data from known parameters, plus a quadrature oracle and a
//! parameter-recovery harness for checking the simulated likelihood.

pub mod quadrature;
pub mod recovery;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::choice::{realize_coefs, utility};
use crate::data::dataset::{ChoiceScenario, Dataset, DatasetMeta, Respondent};
use crate::data::scenario::ScenarioGrid;
use crate::data::spec::ModelSpec;
use crate::distributions::softmax;
use crate::error::{Error, Result};
use crate::measurement::indicator_propensity;
use crate::mixture::membership_probs;
use crate::params::{ParamLayout, ParameterSet};
use crate::structural::{latent_mean, realize_latents};

pub use quadrature::{gauss_hermite, quadrature_person_likelihood};
pub use recovery::{recovery_experiment, RecoveryReport, RecoveryRow};

/// Generator of one covariate or scenario attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum CovariateLaw {
    Bernoulli { p: f64 },
    Normal {
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        sd: f64,
    },
    /// Uniform over a finite set of values.
    Levels { values: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

impl CovariateLaw {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            CovariateLaw::Bernoulli { p } => {
                if rng.gen::<f64>() < *p {
                    1.0
                } else {
                    0.0
                }
            }
            CovariateLaw::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            CovariateLaw::Levels { values } => values[rng.gen_range(0..values.len())],
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("covariate `{name}`: {m}")));
        match self {
            CovariateLaw::Bernoulli { p } if !(0.0..=1.0).contains(p) => bad("p must lie in [0, 1]"),
            CovariateLaw::Normal { sd, .. } if !(*sd >= 0.0) => bad("sd must be >= 0"),
            CovariateLaw::Levels { values } if values.is_empty() => bad("no levels"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChoiceSampling {
    /// Inverse-CDF draw from the logit probabilities.
    #[default]
    Probability,
    /// Argmax of utilities plus standard Gumbel noise.
    Gumbel,
}

/// How scenario attributes are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeDesign {
    /// Scenario t shows combo t (cycling) of the grid; the first two scenario
    /// attributes receive the waiting-time and travel-time levels.
    Grid(ScenarioGrid),
    /// Independent draws per scenario.
    Laws(BTreeMap<String, CovariateLaw>),
}

fn default_t() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampling: ChoiceSampling,
    /// Laws of the membership and explanatory covariates, by column name.
    #[serde(default)]
    pub covariates: BTreeMap<String, CovariateLaw>,
    pub attributes: AttributeDesign,
    /// True natural parameter values by name; unnamed entries keep their
    /// neutral values.
    pub truth: BTreeMap<String, f64>,
    pub model: ModelSpec,
}

impl SynthConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: "<string>".into(),
            message: e.to_string(),
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SynthConfig = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("synthetic configuration serializes")
    }

    pub fn check(&self) -> Result<()> {
        self.model.check()?;
        if self.n == 0 || self.t == 0 {
            return Err(Error::InvalidArgument("n and t must be >= 1".into()));
        }
        for name in self.covariate_names() {
            match self.covariates.get(&name) {
                Some(law) => law.check(&name)?,
                None => return Err(Error::InvalidArgument(format!("no generator for covariate `{name}`"))),
            }
        }
        match &self.attributes {
            AttributeDesign::Grid(g) => {
                g.check()?;
                if self.model.scenario_attributes.len() != 2 {
                    return Err(Error::InvalidArgument(
                        "a grid design needs exactly two scenario attributes".into(),
                    ));
                }
            }
            AttributeDesign::Laws(laws) => {
                for a in &self.model.scenario_attributes {
                    laws.get(a)
                        .ok_or_else(|| Error::InvalidArgument(format!("no generator for attribute `{a}`")))?
                        .check(a)?;
                }
            }
        }
        self.theta_true().map(|_| ())
    }

    /// Distinct covariate columns, membership first, in declaration order.
    pub fn covariate_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in self.model.membership_covariates.iter().chain(&self.model.explanatory_covariates) {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }

    pub fn theta_true(&self) -> Result<ParameterSet> {
        ParamLayout::new(&self.model)?.from_named(&self.truth)
    }
}

/// A simulated dataset with the class each respondent was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Zero-based true classes.
    pub classes: Vec<usize>,
}

/// Independent stream of respondent `n`, unaffected by the sample size.
pub fn respondent_rng(seed: u64, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    rng
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws class, latent variables, indicators, random coefficients and
/// choices for every respondent.
pub fn simulate_dataset(config: &SynthConfig) -> Result<SyntheticData> {
    config.check()?;
    let spec = &config.model;
    let theta = config.theta_true()?;
    let names = config.covariate_names();
    let meta = DatasetMeta::for_spec(spec);
    let mut respondents = Vec::with_capacity(config.n);
    let mut classes = Vec::with_capacity(config.n);
    for n in 0..config.n {
        let mut rng = respondent_rng(config.seed, n);
        let values: BTreeMap<&str, f64> = names
            .iter()
            .map(|c| (c.as_str(), config.covariates[c].sample(&mut rng)))
            .collect();
        let z: Vec<f64> = spec.membership_covariates.iter().map(|c| values[c.as_str()]).collect();
        let x: Vec<f64> = spec.explanatory_covariates.iter().map(|c| values[c.as_str()]).collect();

        let prior = membership_probs(&z, &theta.membership);
        let q = sample_index(&prior, rng.gen::<f64>());
        let class = &theta.classes[q];

        let g = class.structural.n_latent();
        let eps: Vec<f64> = (0..g).map(|_| rng.sample(StandardNormal)).collect();
        let latent = realize_latents(&latent_mean(&x, &class.structural), &class.structural.psi, &eps)?;

        let m = &class.measurement;
        let indicators = (0..m.n_indicators())
            .map(|h| {
                let y = indicator_propensity(&latent, h, m) + m.error_sd[h] * rng.sample::<f64, _>(StandardNormal);
                Some(1 + m.thresholds[h].iter().filter(|&&t| t < y).count() as i64)
            })
            .collect();

        let p = class.choice.random_count();
        let zc: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let coefs = realize_coefs(&class.choice, &zc)?;

        let mut scenarios = Vec::with_capacity(config.t);
        for t in 0..config.t {
            let attributes = match &config.attributes {
                AttributeDesign::Grid(grid) => {
                    let (w, tt) = grid.combos[t % grid.combos.len()];
                    vec![grid.wt_levels[w], grid.tt_levels[tt]]
                }
                AttributeDesign::Laws(laws) => spec
                    .scenario_attributes
                    .iter()
                    .map(|a| laws[a].sample(&mut rng))
                    .collect(),
            };
            let mut s = ChoiceScenario { attributes, chosen: 0 };
            let v = utility(&s, &x, &latent, &coefs, &class.choice);
            s.chosen = match config.sampling {
                ChoiceSampling::Probability => sample_index(&softmax(&v), rng.gen::<f64>()),
                ChoiceSampling::Gumbel => {
                    let mut best = (0, f64::NEG_INFINITY);
                    for (j, vj) in v.iter().enumerate() {
                        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        let e = vj - (-u.ln()).ln();
                        if e > best.1 {
                            best = (j, e);
                        }
                    }
                    best.0
                }
            };
            scenarios.push(s);
        }
        respondents.push(Respondent {
            id: format!("r{:05}", n + 1),
            z,
            x,
            indicators,
            scenarios,
        });
        classes.push(q);
    }
    Ok(SyntheticData {
        dataset: Dataset { respondents, meta },
        classes,
    })
}
