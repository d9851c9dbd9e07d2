//! Expansion of stated waiting-time / travel-time thresholds into binary
//! panel scenarios.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::dataset::ChoiceScenario;
use crate::error::{Error, Result};

/// Attribute levels and the (waiting-time, travel-time) level pairs shown to
/// every respondent. Levels are the numeric codes entered into utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGrid {
    pub wt_levels: Vec<f64>,
    pub tt_levels: Vec<f64>,
    pub combos: Vec<(usize, usize)>,
}

impl Default for ScenarioGrid {
    /// Five level codes 1..=5 per attribute and the ten pairs
    /// `(i, i)` and `(i, (i+1) mod 5)` for `i = 0..5`.
    fn default() -> Self {
        let levels: Vec<f64> = (1..=5).map(f64::from).collect();
        let combos = (0..5).flat_map(|i| [(i, i), (i, (i + 1) % 5)]).collect();
        ScenarioGrid {
            wt_levels: levels.clone(),
            tt_levels: levels,
            combos,
        }
    }
}

impl ScenarioGrid {
    pub fn new(wt_levels: Vec<f64>, tt_levels: Vec<f64>, combos: Vec<(usize, usize)>) -> Result<Self> {
        let grid = ScenarioGrid {
            wt_levels,
            tt_levels,
            combos,
        };
        grid.check()?;
        Ok(grid)
    }

    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &(w, t) in &self.combos {
            if w >= self.wt_levels.len() || t >= self.tt_levels.len() {
                return Err(Error::InvalidArgument(format!(
                    "combo ({w}, {t}) references an undeclared level"
                )));
            }
            if !seen.insert((w, t)) {
                return Err(Error::InvalidArgument(format!("duplicate combo ({w}, {t})")));
            }
        }
        if self.combos.is_empty() {
            return Err(Error::InvalidArgument("scenario grid has no combos".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.combos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combos.is_empty()
    }
}

/// One scenario per grid combo; a combo is coded 1 ("willing") exactly when
/// both of its levels are at or below the respondent's stated thresholds.
pub fn expand_scenarios(
    stated_wt_threshold: usize,
    stated_tt_threshold: usize,
    grid: &ScenarioGrid,
) -> Result<Vec<ChoiceScenario>> {
    grid.check()?;
    if stated_wt_threshold >= grid.wt_levels.len() {
        return Err(Error::InvalidArgument(format!(
            "waiting-time threshold {stated_wt_threshold} outside 0..{}",
            grid.wt_levels.len()
        )));
    }
    if stated_tt_threshold >= grid.tt_levels.len() {
        return Err(Error::InvalidArgument(format!(
            "travel-time threshold {stated_tt_threshold} outside 0..{}",
            grid.tt_levels.len()
        )));
    }
    Ok(grid
        .combos
        .iter()
        .map(|&(w, t)| ChoiceScenario {
            attributes: vec![grid.wt_levels[w], grid.tt_levels[t]],
            chosen: usize::from(w <= stated_wt_threshold && t <= stated_tt_threshold),
        })
        .collect())
}
