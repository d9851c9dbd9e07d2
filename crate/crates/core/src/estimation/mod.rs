//! Maximum simulated likelihood estimation: multi-start BFGS over the packed
//! parameter vector, standard errors, fit criteria and class-count selection.

pub mod criteria;
pub mod logit;
pub mod optimizer;
pub mod start;
pub mod stderr;
pub mod sweep;

use crate::data::dataset::Dataset;
use crate::data::spec::{CriteriaUnits, ModelSpec};
use crate::error::{Error, Result};
use crate::mixture::{EvalRequest, Evaluator};
use crate::params::{Block, ParamLayout, ParameterSet};
use crate::quasirandom::{build_draws, DrawSet};

pub use criteria::{fit_criteria, fit_criteria_split, FitCriteria};
pub use logit::{fit_plain_logit, null_loglik, PlainLogit};
pub use optimizer::{maximize, maximize_from, OptimOptions, OptimResult, OptimStatus, TraceRow};
pub use stderr::{standard_errors, SeFlag, SeMethod, StandardErrors};
pub use sweep::{class_sweep, prune_insignificant, sweep_table, PruneResult, SweepResult, SweepRow, MIN_CLASS_SHARE};

/// Packed coordinates beyond this magnitude are reported as boundary
/// solutions (a log-sd of −15 is an sd of 3e-7).
pub const BOUNDARY: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOptions {
    /// Draws per respondent; `None` uses the model's `draws`.
    pub draws: Option<usize>,
    /// Seeds the perturbation of later starts.
    pub seed: u64,
    /// Overrides the model's Halton scrambling seed.
    pub scramble: Option<u64>,
    pub skip: Option<u64>,
    pub max_iter: usize,
    pub gtol: f64,
    pub ftol: f64,
    pub starts: usize,
    pub jitter_sd: f64,
    pub se_method: SeMethod,
    pub threads: Option<usize>,
    /// Optimize every start with this many draws first; only the best
    /// start is then refined with the full draw count.
    pub warmup_draws: Option<usize>,
    /// Replaces the computed first start.
    pub initial: Option<ParameterSet>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            draws: None,
            seed: 1,
            scramble: None,
            skip: None,
            max_iter: 500,
            gtol: 1e-5,
            ftol: 1e-9,
            starts: 5,
            jitter_sd: 0.25,
            se_method: SeMethod::Hessian,
            threads: None,
            warmup_draws: None,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub name: String,
    pub block: Block,
    /// One-based class label.
    pub class: usize,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub flag: SeFlag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Convergence {
    pub status: OptimStatus,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_max: f64,
}

/// Final state of one start.
#[derive(Debug, Clone, PartialEq)]
pub struct StartSummary {
    pub start: usize,
    pub draws: usize,
    /// NaN when the start could not be evaluated.
    pub loglik: f64,
    pub status: Option<OptimStatus>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub start: usize,
    pub draws: usize,
    pub row: TraceRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub spec: ModelSpec,
    pub theta_hat: ParameterSet,
    /// Packed free coordinates at the optimum.
    pub free: Vec<f64>,
    pub estimates: Vec<EstimateRow>,
    pub standard_errors: StandardErrors,
    pub loglik: f64,
    pub criteria: FitCriteria,
    pub class_shares: Vec<f64>,
    pub posterior: Vec<Vec<f64>>,
    pub respondent_ids: Vec<String>,
    pub convergence: Convergence,
    pub starts: Vec<StartSummary>,
    pub trace: Vec<TraceEntry>,
    pub draws: usize,
    pub underflow: usize,
    pub boundary: Vec<String>,
}

impl EstimationResult {
    pub fn class_count(&self) -> usize {
        self.class_shares.len()
    }

    pub fn row(&self, name: &str) -> Option<&EstimateRow> {
        self.estimates.iter().find(|r| r.name == name)
    }

    /// Modal posterior class of every respondent, zero-based.
    pub fn modal_classes(&self) -> Vec<usize> {
        self.posterior
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect()
    }
}

/// Draw set for a dataset under `spec` with the option overrides applied.
pub fn draws_for(data: &Dataset, spec: &ModelSpec, draws: usize, options: &EstimateOptions) -> Result<DrawSet> {
    build_draws(
        data.n_respondents(),
        draws,
        spec.draw_dims(),
        options.skip.unwrap_or(spec.skip),
        options.scramble.or(spec.scramble_seed),
    )
}

fn make_evaluator<'a>(
    layout: &'a ParamLayout,
    data: &'a Dataset,
    draws: &'a DrawSet,
    spec: &ModelSpec,
    threads: Option<usize>,
) -> Result<Evaluator<'a>> {
    let ev = Evaluator::new(layout, data, draws, spec.options.drop_missing_indicators)?;
    match threads {
        Some(t) => ev.with_threads(t),
        None => Ok(ev),
    }
}

fn objective<'a>(ev: &'a Evaluator<'a>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a {
    move |x: &[f64]| {
        let e = ev.evaluate(x, EvalRequest::GRADIENT)?;
        if !e.loglik.is_finite() || e.gradient.iter().any(|g| !g.is_finite()) {
            let who = e
                .worst_person()
                .map(|(i, v)| format!("respondent {} (log-likelihood {v})", ev.dataset().respondents[i].id))
                .unwrap_or_default();
            let param = e
                .gradient
                .iter()
                .position(|g| !g.is_finite())
                .map(|p| format!(", gradient of `{}` not finite", ev.layout().entries[ev.layout().free[p]].name))
                .unwrap_or_default();
            return Err(Error::NonFinite(format!(
                "log-likelihood {} is not finite: {who}{param}",
                e.loglik
            )));
        }
        Ok((e.loglik, e.gradient))
    }
}

/// Number of units used by the information criteria.
pub fn criteria_units(data: &Dataset, spec: &ModelSpec) -> usize {
    match spec.options.criteria_units {
        CriteriaUnits::Respondents => data.n_respondents(),
        CriteriaUnits::Observations => data.observation_count(),
    }
}

/// Estimates the model by maximum simulated likelihood.
pub fn estimate(data: &Dataset, spec: &ModelSpec, options: &EstimateOptions) -> Result<EstimationResult> {
    estimate_with_progress(data, spec, options, |_| {})
}

/// As [`estimate`], reporting every accepted iteration.
pub fn estimate_with_progress(
    data: &Dataset,
    spec: &ModelSpec,
    options: &EstimateOptions,
    mut progress: impl FnMut(&TraceEntry),
) -> Result<EstimationResult> {
    let layout = ParamLayout::new(spec)?;
    let r_full = options.draws.unwrap_or(spec.draws);
    if r_full == 0 {
        return Err(Error::InvalidArgument("draws must be >= 1".into()));
    }
    if options.starts == 0 {
        return Err(Error::InvalidArgument("starts must be >= 1".into()));
    }
    let base_theta = match &options.initial {
        Some(t) => layout.apply_fixed(t)?,
        None => start::initial_theta(&layout, spec, data)?,
    };
    let base = layout.pack(&base_theta)?;
    let opt = OptimOptions {
        max_iter: options.max_iter,
        gtol: options.gtol,
        ftol: options.ftol,
        ..OptimOptions::default()
    };

    let full_draws = draws_for(data, spec, r_full, options)?;
    let full_ev = make_evaluator(&layout, data, &full_draws, spec, options.threads)?;
    let warm = options.warmup_draws.filter(|&w| w < r_full && w > 0);
    let warm_draws = match warm {
        Some(w) => Some(draws_for(data, spec, w, options)?),
        None => None,
    };
    let warm_ev = match &warm_draws {
        Some(d) => Some(make_evaluator(&layout, data, d, spec, options.threads)?),
        None => None,
    };
    let stage_ev = warm_ev.as_ref().unwrap_or(&full_ev);
    let stage_r = warm.unwrap_or(r_full);

    let mut trace = Vec::new();
    let mut starts = Vec::with_capacity(options.starts);
    let mut best: Option<(usize, OptimResult)> = None;
    for s in 0..options.starts {
        let x0 = start::jittered_start(&base, s, options.seed, options.jitter_sd)?;
        let mut rows = Vec::new();
        let res = maximize(objective(stage_ev), &x0, &opt, |row| {
            let entry = TraceEntry {
                start: s + 1,
                draws: stage_r,
                row: row.clone(),
            };
            progress(&entry);
            rows.push(entry);
        });
        trace.extend(rows);
        match res {
            Ok(r) => {
                starts.push(StartSummary {
                    start: s + 1,
                    draws: stage_r,
                    loglik: r.loglik,
                    status: Some(r.status),
                    message: None,
                });
                if best.as_ref().map_or(true, |(_, b)| r.loglik > b.loglik) {
                    best = Some((s, r));
                }
            }
            Err(e) if s == 0 => return Err(e),
            Err(e) => starts.push(StartSummary {
                start: s + 1,
                draws: stage_r,
                loglik: f64::NAN,
                status: None,
                message: Some(e.to_string()),
            }),
        }
    }
    let (best_start, mut fit) = best.expect("the first start either succeeds or returns early");
    if warm.is_some() {
        let mut rows = Vec::new();
        let refined = maximize_from(objective(&full_ev), &fit.x, Some(&fit.inverse_hessian), &opt, |row| {
            let entry = TraceEntry {
                start: best_start + 1,
                draws: r_full,
                row: row.clone(),
            };
            progress(&entry);
            rows.push(entry);
        })?;
        trace.extend(rows);
        starts.push(StartSummary {
            start: best_start + 1,
            draws: r_full,
            loglik: refined.loglik,
            status: Some(refined.status),
            message: None,
        });
        fit = OptimResult {
            iterations: fit.iterations + refined.iterations,
            evaluations: fit.evaluations + refined.evaluations,
            ..refined
        };
    }

    summarize(data, spec, &layout, &full_ev, fit, starts, trace, options.se_method, r_full)
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    data: &Dataset,
    spec: &ModelSpec,
    layout: &ParamLayout,
    ev: &Evaluator<'_>,
    fit: OptimResult,
    starts: Vec<StartSummary>,
    trace: Vec<TraceEntry>,
    se_method: SeMethod,
    draws: usize,
) -> Result<EstimationResult> {
    let free = fit.x.clone();
    let final_eval = ev.evaluate(&free, EvalRequest::VALUE)?;
    let choice_eval = ev.evaluate(
        &free,
        EvalRequest {
            gradient: false,
            scores: false,
            measurement: false,
        },
    )?;
    let mut se = standard_errors(ev, &free, se_method)?;
    let mut boundary = Vec::new();
    for (p, &v) in free.iter().enumerate() {
        if v.abs() > BOUNDARY {
            se.flags[p] = SeFlag::Boundary;
            boundary.push(layout.entries[layout.free[p]].name.clone());
        }
    }
    let nat = layout.natural_from_packed(&free)?;
    let estimates = layout
        .free
        .iter()
        .enumerate()
        .map(|(p, &i)| {
            let e = &layout.entries[i];
            let s = se.se[p];
            EstimateRow {
                name: e.name.clone(),
                block: e.block,
                class: e.class,
                estimate: nat[i],
                se: s,
                t: if s > 0.0 { nat[i] / s } else { f64::NAN },
                flag: se.flags[p],
            }
        })
        .collect();
    let q = layout.n_classes();
    let n = data.n_respondents().max(1) as f64;
    let class_shares = (0..q)
        .map(|c| final_eval.posterior.iter().map(|p| p[c]).sum::<f64>() / n)
        .collect();
    let criteria = fit_criteria_split(
        final_eval.loglik,
        choice_eval.loglik,
        null_loglik(data, spec.alternatives),
        layout.n_free(),
        criteria_units(data, spec),
    );
    Ok(EstimationResult {
        spec: spec.clone(),
        theta_hat: layout.unpack(&free)?,
        free,
        estimates,
        standard_errors: se,
        loglik: final_eval.loglik,
        criteria,
        class_shares,
        posterior: final_eval.posterior,
        respondent_ids: data.respondents.iter().map(|r| r.id.clone()).collect(),
        convergence: Convergence {
            status: fit.status,
            converged: fit.status.converged(),
            iterations: fit.iterations,
            evaluations: fit.evaluations,
            grad_max: fit.gradient.iter().fold(0.0, |m, g| m.max(g.abs())),
        },
        starts,
        trace,
        draws,
        underflow: final_eval.underflow,
        boundary,
    })
}
