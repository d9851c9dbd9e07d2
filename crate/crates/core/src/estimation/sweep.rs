//! Class-count selection and backward elimination of weak utility covariates.

use crate::data::dataset::Dataset;
use crate::data::spec::{ClassUtility, ModelSpec};
use crate::error::Result;
use crate::estimation::{estimate, EstimateOptions, EstimationResult};
use crate::params::{ParamLayout, Slot};

/// Solutions with a smaller class share are not eligible for selection.
pub const MIN_CLASS_SHARE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub classes: usize,
    pub loglik: f64,
    pub bic: f64,
    pub aic: f64,
    pub caic: f64,
    pub aicc: f64,
    pub hqic: f64,
    pub k: usize,
    pub shares: Vec<f64>,
    pub min_share: f64,
    pub converged: bool,
    pub qualified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Selected class count; `None` if every solution is disqualified.
    pub selected: Option<usize>,
    pub results: Vec<EstimationResult>,
}

/// One row per fitted class count, and the qualified count with the
/// smallest BIC (ties go to fewer classes).
pub fn sweep_table(results: &[&EstimationResult]) -> (Vec<SweepRow>, Option<usize>) {
    let rows: Vec<SweepRow> = results
        .iter()
        .map(|r| {
            let min_share = r.class_shares.iter().cloned().fold(f64::INFINITY, f64::min);
            SweepRow {
                classes: r.class_count(),
                loglik: r.loglik,
                bic: r.criteria.bic,
                aic: r.criteria.aic,
                caic: r.criteria.caic,
                aicc: r.criteria.aicc,
                hqic: r.criteria.hqic,
                k: r.criteria.k_params,
                shares: r.class_shares.clone(),
                min_share,
                converged: r.convergence.converged,
                qualified: r.class_count() == 1 || min_share >= MIN_CLASS_SHARE,
            }
        })
        .collect();
    let selected = select(&rows);
    (rows, selected)
}

fn select(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<&SweepRow> = None;
    for r in rows.iter().filter(|r| r.qualified && r.bic.is_finite()) {
        best = match best {
            Some(b) if b.bic < r.bic || (b.bic == r.bic && b.classes < r.classes) => Some(b),
            _ => Some(r),
        };
    }
    best.map(|r| r.classes)
}

/// Estimates the model for every class count in `classes`.
pub fn class_sweep(
    data: &Dataset,
    spec: &ModelSpec,
    classes: &[usize],
    options: &EstimateOptions,
) -> Result<SweepResult> {
    let mut results = Vec::with_capacity(classes.len());
    for &q in classes {
        results.push(estimate(data, &spec.with_classes(q), options)?);
    }
    let (rows, selected) = sweep_table(&results.iter().collect::<Vec<_>>());
    Ok(SweepResult {
        rows,
        selected,
        results,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub spec: ModelSpec,
    pub result: EstimationResult,
    /// (one-based class, covariate) in removal order.
    pub dropped: Vec<(usize, String)>,
}

/// Largest |t| of each (class, utility covariate) across alternatives,
/// using the mean of random coefficients. Latent terms are not candidates.
fn covariate_significance(result: &EstimationResult) -> Result<Vec<(usize, String, f64)>> {
    let layout = ParamLayout::new(&result.spec)?;
    let mut out: Vec<(usize, String, f64)> = Vec::new();
    for (p, &i) in layout.free.iter().enumerate() {
        let cov = match layout.entries[i].slot {
            Slot::Coef { class, cov, .. } | Slot::CoefMean { class, cov, .. } => (class, cov),
            _ => continue,
        };
        let name = result.spec.class_utility(cov.0).covariates[cov.1].clone();
        let t = result.estimates[p].t.abs();
        let t = if t.is_finite() { t } else { 0.0 };
        match out.iter_mut().find(|(c, n, _)| *c == cov.0 + 1 && *n == name) {
            Some(e) => e.2 = e.2.max(t),
            None => out.push((cov.0 + 1, name, t)),
        }
    }
    Ok(out)
}

/// Repeatedly removes the least significant utility covariate whose |t| is
/// below `critical` (from that class only) and refits, until every
/// remaining covariate clears the bar.
pub fn prune_insignificant(
    data: &Dataset,
    spec: &ModelSpec,
    options: &EstimateOptions,
    critical: f64,
) -> Result<PruneResult> {
    let mut spec = spec.clone();
    let mut result = estimate(data, &spec, options)?;
    let mut dropped = Vec::new();
    loop {
        let sig = covariate_significance(&result)?;
        let weakest = sig
            .into_iter()
            .filter(|(_, _, t)| *t < critical)
            .min_by(|a, b| a.2.total_cmp(&b.2));
        let Some((class, name, _)) = weakest else { break };
        let mut terms = spec.class_utility(class - 1);
        terms.covariates.retain(|c| *c != name);
        terms.random.retain(|c| *c != name);
        spec.utility.overrides.retain(|o| o.class != class);
        spec.utility.overrides.push(ClassUtility { class, terms });
        spec.utility.overrides.sort_by_key(|o| o.class);
        dropped.push((class, name));
        result = estimate(data, &spec, options)?;
    }
    Ok(PruneResult { spec, result, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(classes: usize, bic: f64, min_share: f64) -> SweepRow {
        SweepRow {
            classes,
            loglik: 0.0,
            bic,
            aic: 0.0,
            caic: 0.0,
            aicc: 0.0,
            hqic: 0.0,
            k: 1,
            shares: vec![],
            min_share,
            converged: true,
            qualified: classes == 1 || min_share >= MIN_CLASS_SHARE,
        }
    }

    #[test]
    fn small_class_is_disqualified() {
        let shares: [f64; 6] = [0.27, 0.20, 0.09, 0.14, 0.08, 0.22];
        let m = shares.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(!row(6, 1.0, m).qualified);
        assert_eq!(select(&[row(1, 10.0, 1.0), row(6, 1.0, m)]), Some(1));
    }

    #[test]
    fn minimum_bic_with_ties_to_fewer_classes() {
        assert_eq!(select(&[row(1, 10.0, 1.0), row(2, 8.0, 0.4), row(3, 9.0, 0.2)]), Some(2));
        assert_eq!(select(&[row(1, 8.0, 1.0), row(2, 8.0, 0.4)]), Some(1));
        assert_eq!(select(&[row(2, 8.0, 0.4), row(1, 8.0, 1.0)]), Some(1));
    }

    #[test]
    fn one_class_always_qualifies() {
        assert!(row(1, 5.0, 1.0).qualified);
    }
}
