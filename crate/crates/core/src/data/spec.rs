//! Declarative model specification, read from TOML.
//!
//! ```toml
//! classes = 2
//! membership_covariates = ["student"]
//! explanatory_covariates = ["age", "student"]
//! scenario_attributes = ["wt", "tt"]
//!
//! [[latent]]
//! name = "safety"
//! structural_covariates = ["age"]
//! indicators = [{ name = "S1", categories = 5 }, { name = "S2", categories = 5 }]
//!
//! [utility]
//! covariates = ["wt", "tt"]
//! latent = ["safety"]
//! random = ["wt"]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_alternatives() -> usize {
    2
}
fn default_draws() -> usize {
    crate::quasirandom::DEFAULT_DRAWS
}
fn default_skip() -> u64 {
    crate::quasirandom::DEFAULT_SKIP
}
fn default_true() -> bool {
    true
}
fn default_id_column() -> String {
    "id".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub classes: usize,
    #[serde(default = "default_alternatives")]
    pub alternatives: usize,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_skip")]
    pub skip: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scramble_seed: Option<u64>,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default = "default_true")]
    pub membership_intercept: bool,
    #[serde(default)]
    pub membership_covariates: Vec<String>,
    #[serde(default)]
    pub explanatory_covariates: Vec<String>,
    #[serde(default)]
    pub scenario_attributes: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<CategoricalSpec>,
    #[serde(default)]
    pub latent: Vec<LatentSpec>,
    pub utility: UtilitySpec,
    #[serde(default)]
    pub options: SpecOptions,
    #[serde(default)]
    pub fixed: BTreeMap<String, f64>,
}

/// A categorical respondent column expanded into `column=level` dummies for
/// every level except the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalSpec {
    pub column: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    pub name: String,
    #[serde(default)]
    pub structural_covariates: Vec<String>,
    pub indicators: Vec<IndicatorSpec>,
    /// Reference indicator name; defaults to the first indicator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicatorSpec {
    pub name: String,
    pub categories: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityTerms {
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub latent: Vec<String>,
    #[serde(default)]
    pub random: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassUtility {
    pub class: usize,
    #[serde(flatten)]
    pub terms: UtilityTerms,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySpec {
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub latent: Vec<String>,
    #[serde(default)]
    pub random: Vec<String>,
    /// Per-class replacements of the shared term lists (1-based class index).
    #[serde(default, rename = "class", skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<ClassUtility>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    #[default]
    Diagonal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriteriaUnits {
    #[default]
    Respondents,
    Observations,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecOptions {
    pub structural_covariance: CovarianceKind,
    /// Frees Θ_h for non-reference indicators; requires shared thresholds.
    pub free_error_sd: bool,
    /// One threshold vector per construct with free non-reference intercepts.
    pub shared_thresholds: bool,
    /// ψ_g = 1 with every loading free, instead of a unit reference loading.
    pub fix_latent_variance: bool,
    /// Missing indicator cells drop their likelihood term instead of failing.
    pub drop_missing_indicators: bool,
    pub criteria_units: CriteriaUnits,
}

/// One indicator in model order (latent-variable order, then declaration order).
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorInfo {
    pub name: String,
    pub categories: u32,
    pub latent: usize,
    pub is_reference: bool,
}

impl ModelSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| Error::Config {
            path: "<string>".into(),
            message: e.to_string(),
        })?;
        spec.check()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ModelSpec = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.into(),
            message: e.to_string(),
        })?;
        spec.check()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    pub fn with_classes(&self, classes: usize) -> Self {
        let mut spec = self.clone();
        spec.classes = classes;
        spec.utility.overrides.retain(|o| o.class <= classes);
        spec
    }

    pub fn n_latent(&self) -> usize {
        self.latent.len()
    }

    pub fn latent_index(&self, name: &str) -> Option<usize> {
        self.latent.iter().position(|l| l.name == name)
    }

    pub fn indicators(&self) -> Vec<IndicatorInfo> {
        let mut out = Vec::new();
        for (g, lat) in self.latent.iter().enumerate() {
            let reference = lat
                .reference
                .clone()
                .unwrap_or_else(|| lat.indicators[0].name.clone());
            for ind in &lat.indicators {
                out.push(IndicatorInfo {
                    name: ind.name.clone(),
                    categories: ind.categories,
                    latent: g,
                    is_reference: ind.name == reference,
                });
            }
        }
        out
    }

    pub fn n_indicators(&self) -> usize {
        self.latent.iter().map(|l| l.indicators.len()).sum()
    }

    /// Utility terms for class `q` (zero-based).
    pub fn class_utility(&self, q: usize) -> UtilityTerms {
        self.utility
            .overrides
            .iter()
            .find(|o| o.class == q + 1)
            .map(|o| o.terms.clone())
            .unwrap_or_else(|| UtilityTerms {
                covariates: self.utility.covariates.clone(),
                latent: self.utility.latent.clone(),
                random: self.utility.random.clone(),
            })
    }

    /// Random coefficients per class, counted across non-reference alternatives.
    pub fn random_count(&self, q: usize) -> usize {
        self.class_utility(q).random.len() * (self.alternatives - 1)
    }

    /// Width of each respondent's draw vector: latent dimensions first, then
    /// the largest per-class random-coefficient count.
    pub fn draw_dims(&self) -> usize {
        self.n_latent()
            + (0..self.classes)
                .map(|q| self.random_count(q))
                .max()
                .unwrap_or(0)
    }

    /// Membership terms in parameter order, intercept first when enabled.
    pub fn membership_terms(&self) -> Vec<String> {
        let mut terms = Vec::new();
        if self.membership_intercept {
            terms.push("intercept".to_string());
        }
        terms.extend(self.membership_covariates.iter().cloned());
        terms
    }

    pub fn check(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.classes < 1 {
            return err("classes must be >= 1".into());
        }
        if self.alternatives < 2 {
            return err("alternatives must be >= 2".into());
        }
        if self.draws < 1 {
            return err("draws must be >= 1".into());
        }
        unique("membership_covariates", &self.membership_covariates)?;
        unique("explanatory_covariates", &self.explanatory_covariates)?;
        unique("scenario_attributes", &self.scenario_attributes)?;
        let explanatory: BTreeSet<&str> =
            self.explanatory_covariates.iter().map(String::as_str).collect();
        for a in &self.scenario_attributes {
            if explanatory.contains(a.as_str()) {
                return err(format!("`{a}` is both a respondent covariate and a scenario attribute"));
            }
        }
        for c in &self.categorical {
            if !c.levels.is_empty() && !c.levels.contains(&c.reference) {
                return err(format!(
                    "categorical `{}`: reference `{}` is not among its levels",
                    c.column, c.reference
                ));
            }
        }
        let latent_names: Vec<String> = self.latent.iter().map(|l| l.name.clone()).collect();
        unique("latent", &latent_names)?;
        let mut all_indicators = Vec::new();
        for lat in &self.latent {
            if lat.indicators.is_empty() {
                return err(format!("latent `{}` has no indicators", lat.name));
            }
            for ind in &lat.indicators {
                if ind.categories < 2 {
                    return err(format!("indicator `{}` needs >= 2 categories", ind.name));
                }
                all_indicators.push(ind.name.clone());
            }
            if let Some(r) = &lat.reference {
                if !lat.indicators.iter().any(|i| &i.name == r) {
                    return err(format!(
                        "latent `{}`: reference `{r}` is not one of its indicators",
                        lat.name
                    ));
                }
            }
            for c in &lat.structural_covariates {
                if !explanatory.contains(c.as_str()) {
                    return err(format!(
                        "latent `{}`: structural covariate `{c}` is not an explanatory covariate",
                        lat.name
                    ));
                }
            }
            unique(&format!("latent `{}` structural covariates", lat.name), &lat.structural_covariates)?;
            if self.options.shared_thresholds {
                let c0 = lat.indicators[0].categories;
                if lat.indicators.iter().any(|i| i.categories != c0) {
                    return err(format!(
                        "shared thresholds need equal category counts within `{}`",
                        lat.name
                    ));
                }
            }
        }
        unique("indicators", &all_indicators)?;
        if self.options.free_error_sd && !self.options.shared_thresholds {
            return err(
                "free_error_sd requires shared_thresholds: per-indicator thresholds leave the indicator scale unidentified"
                    .into(),
            );
        }
        for o in &self.utility.overrides {
            if o.class < 1 || o.class > self.classes {
                return err(format!("utility override for class {} out of range", o.class));
            }
        }
        for q in 0..self.classes {
            let terms = self.class_utility(q);
            unique(&format!("class {} utility covariates", q + 1), &terms.covariates)?;
            unique(&format!("class {} utility latent", q + 1), &terms.latent)?;
            unique(&format!("class {} random coefficients", q + 1), &terms.random)?;
            for c in &terms.covariates {
                if !explanatory.contains(c.as_str()) && !self.scenario_attributes.contains(c) {
                    return err(format!(
                        "class {}: utility covariate `{c}` is neither an explanatory covariate nor a scenario attribute",
                        q + 1
                    ));
                }
            }
            for r in &terms.random {
                if !terms.covariates.contains(r) {
                    return err(format!(
                        "class {}: random coefficient `{r}` is not a utility covariate",
                        q + 1
                    ));
                }
            }
            for l in &terms.latent {
                if self.latent_index(l).is_none() {
                    return err(format!("class {}: unknown latent variable `{l}` in utility", q + 1));
                }
            }
        }
        if self.draw_dims() > crate::quasirandom::prime_table().len() {
            return err("too many draw dimensions for the Halton prime table".into());
        }
        Ok(())
    }
}

fn unique(what: &str, names: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Spec(format!("duplicate name `{n}` in {what}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
classes = 2
membership_covariates = ["student"]
explanatory_covariates = ["age", "student"]
scenario_attributes = ["wt", "tt"]

[[latent]]
name = "safety"
structural_covariates = ["age"]
indicators = [{ name = "S1", categories = 5 }, { name = "S2", categories = 5 }]

[utility]
covariates = ["wt", "tt", "age"]
latent = ["safety"]
random = ["wt"]

[[utility.class]]
class = 2
covariates = ["wt", "tt"]
random = ["wt", "tt"]
"#;

    #[test]
    fn parses_and_resolves() {
        let spec = ModelSpec::from_toml_str(BASIC).unwrap();
        assert_eq!(spec.classes, 2);
        assert_eq!(spec.draws, 2000);
        assert_eq!(spec.skip, 10);
        assert_eq!(spec.alternatives, 2);
        let inds = spec.indicators();
        assert_eq!(inds.len(), 2);
        assert!(inds[0].is_reference && !inds[1].is_reference);
        assert_eq!(spec.class_utility(0).random, vec!["wt"]);
        assert_eq!(spec.class_utility(1).random, vec!["wt", "tt"]);
        assert!(spec.class_utility(1).latent.is_empty());
        assert_eq!(spec.draw_dims(), 3);
        assert_eq!(spec.membership_terms(), vec!["intercept", "student"]);
    }

    #[test]
    fn round_trips_through_toml() {
        let spec = ModelSpec::from_toml_str(BASIC).unwrap();
        let back = ModelSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad_random = BASIC.replace("random = [\"wt\"]", "random = [\"price\"]");
        assert!(ModelSpec::from_toml_str(&bad_random).is_err());
        let no_ind = r#"
classes = 1
[[latent]]
name = "a"
indicators = []
[utility]
"#;
        assert!(ModelSpec::from_toml_str(no_ind).is_err());
        let zero = BASIC.replace("classes = 2", "classes = 0");
        assert!(ModelSpec::from_toml_str(&zero).is_err());
        let free_sd = format!("{BASIC}\n[options]\nfree_error_sd = true\n");
        assert!(ModelSpec::from_toml_str(&free_sd).is_err());
        let unknown = BASIC.replace("classes = 2", "classes = 2\nbogus = 1");
        assert!(ModelSpec::from_toml_str(&unknown).is_err());
    }

    #[test]
    fn with_classes_drops_out_of_range_overrides() {
        let spec = ModelSpec::from_toml_str(BASIC).unwrap().with_classes(1);
        spec.check().unwrap();
        assert!(spec.utility.overrides.is_empty());
    }
}
