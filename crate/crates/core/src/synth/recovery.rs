//! Simulate-then-estimate experiments with class label alignment.

use crate::error::Result;
use crate::estimation::{estimate, EstimateOptions, EstimationResult};
use crate::params::{ParamLayout, Slot};
use crate::synth::{simulate_dataset, SynthConfig, SyntheticData};

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryRow {
    /// Name in the true class labeling.
    pub name: String,
    pub truth: f64,
    pub estimate: f64,
    pub se: f64,
    /// |estimate − truth| / se; NaN without a standard error.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub rows: Vec<RecoveryRow>,
    pub within_2se: f64,
    pub within_3se: f64,
    /// `confusion[true][estimated]` counts of modal posterior assignments,
    /// with estimated classes relabeled by `permutation`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    /// Estimated class matched to each true class.
    pub permutation: Vec<usize>,
    pub result: EstimationResult,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Simulates from `config`, estimates with its model and compares.
pub fn recovery_experiment(config: &SynthConfig, options: &EstimateOptions) -> Result<RecoveryReport> {
    let sim = simulate_dataset(config)?;
    let result = estimate(&sim.dataset, &config.model, options)?;
    recovery_report(config, &sim, result)
}

/// Compares an estimate of `sim` against the truth of `config`, matching
/// estimated to true classes by the permutation with the best assignment
/// accuracy.
pub fn recovery_report(config: &SynthConfig, sim: &SyntheticData, result: EstimationResult) -> Result<RecoveryReport> {
    let q_count = result.class_count();
    let modal = result.modal_classes();
    let mut best: Option<(Vec<usize>, usize)> = None;
    for perm in permutations(q_count) {
        let hits = sim.classes.iter().zip(&modal).filter(|(t, e)| perm[**t] == **e).count();
        if best.as_ref().map_or(true, |b| hits > b.1) {
            best = Some((perm, hits));
        }
    }
    let (perm, hits) = best.expect("at least one permutation");
    let mut confusion = vec![vec![0; q_count]; q_count];
    for (t, e) in sim.classes.iter().zip(&modal) {
        let relabeled = perm.iter().position(|p| p == e).expect("permutation covers every class");
        confusion[*t][relabeled] += 1;
    }

    let layout = ParamLayout::new(&config.model)?;
    let truth = layout.natural_values(&config.theta_true()?)?;
    let est_layout = ParamLayout::new(&result.spec)?;
    let nat_hat = est_layout.natural_from_packed(&result.free)?;
    let pos_of = |i: usize| est_layout.free.iter().position(|&f| f == i);
    let cov = &result.standard_errors.cov_natural;
    let mut rows = Vec::new();
    for &i in &layout.free {
        let e = &layout.entries[i];
        let true_class = e.class - 1;
        let (estimate, var) = match e.slot {
            Slot::Gamma { class, term } => {
                // log-odds against the true reference class
                let target = perm[class];
                let reference = perm[0];
                let idx = |c: usize| (c > 0).then(|| est_layout.class_index[c].gamma[term]);
                let comb: Vec<(usize, f64)> = [(idx(target), 1.0), (idx(reference), -1.0)]
                    .into_iter()
                    .filter_map(|(i, s)| i.map(|i| (i, s)))
                    .collect();
                let estimate = comb.iter().map(|(i, s)| s * nat_hat[*i]).sum::<f64>();
                let mut var = 0.0;
                for (a, sa) in &comb {
                    for (b, sb) in &comb {
                        let (pa, pb) = (pos_of(*a).expect("free"), pos_of(*b).expect("free"));
                        var += sa * sb * cov[(pa, pb)];
                    }
                }
                (estimate, var)
            }
            _ => {
                let prefix = format!("class{}.", e.class);
                let name = format!("class{}.{}", perm[true_class] + 1, &e.name[prefix.len()..]);
                let j = est_layout.index_of(&name).expect("same model has the same entries");
                let p = pos_of(j).expect("free in both layouts");
                (nat_hat[j], cov[(p, p)])
            }
        };
        let se = if var >= 0.0 { var.sqrt() } else { f64::NAN };
        let z = (estimate - truth[i]).abs() / se;
        rows.push(RecoveryRow {
            name: e.name.clone(),
            truth: truth[i],
            estimate,
            se,
            z,
        });
    }
    let frac = |k: f64| rows.iter().filter(|r| r.z <= k).count() as f64 / rows.len().max(1) as f64;
    Ok(RecoveryReport {
        within_2se: frac(2.0),
        within_3se: frac(3.0),
        rows,
        confusion,
        accuracy: hits as f64 / sim.classes.len().max(1) as f64,
        permutation: perm,
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_complete_and_sorted() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![0, 1, 2]);
        assert_eq!(p[5], vec![2, 1, 0]);
    }
}
