//! Result bundles: CSV tables, the optimizer trace, a plain-text summary
//! and prediction from a saved bundle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::choice::{realize_coefs, utility, Coef};
use crate::data::dataset::Dataset;
use crate::data::spec::ModelSpec;
use crate::distributions::{softmax, std_normal_pdf};
use crate::error::{Error, Result};
use crate::estimation::{EstimationResult, SweepRow, TraceEntry};
use crate::mixture::{EvalRequest, Evaluator};
use crate::params::{ParamLayout, ParameterSet};
use crate::quasirandom::build_draws;
use crate::structural::{latent_mean, realize_latents};

pub const ESTIMATES_CSV: &str = "estimates.csv";
pub const FIT_CSV: &str = "fit.csv";
pub const POSTERIOR_CSV: &str = "posterior.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const STARTS_CSV: &str = "starts.csv";
pub const DENSITIES_CSV: &str = "coefficient_densities.csv";
pub const TRACE_LOG: &str = "trace.log";
pub const MODEL_TOML: &str = "model.toml";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const PREDICTIONS_CSV: &str = "predictions.csv";

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Shortest round-trip text of a float; NaN and infinities spelled out.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v}")
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

pub fn write_estimates(result: &EstimationResult, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = result
        .estimates
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.block.as_str().to_string(),
                r.class.to_string(),
                fmt_f64(r.estimate),
                fmt_f64(r.se),
                fmt_f64(r.t),
                r.flag.as_str().to_string(),
            ]
        })
        .collect();
    write_rows(path, &strings(&["parameter", "block", "class", "estimate", "se", "t", "flag"]), &rows)
}

pub fn write_fit(result: &EstimationResult, path: &Path) -> Result<()> {
    let c = &result.criteria;
    let header = strings(&[
        "ll",
        "aic",
        "bic",
        "caic",
        "aicc",
        "hqic",
        "ll_choice",
        "ll_null",
        "lr_vs_null",
        "mcfadden_rho2_adj",
        "k_params",
        "n_units",
        "draws",
        "status",
        "iterations",
        "grad_max",
    ]);
    let row = vec![
        fmt_f64(c.ll),
        fmt_f64(c.aic),
        fmt_f64(c.bic),
        fmt_f64(c.caic),
        fmt_f64(c.aicc),
        fmt_f64(c.hqic),
        fmt_f64(c.ll_choice),
        fmt_f64(c.ll_null),
        fmt_f64(c.lr_vs_null),
        fmt_f64(c.mcfadden_rho2_adj),
        c.k_params.to_string(),
        c.n_units.to_string(),
        result.draws.to_string(),
        result.convergence.status.as_str().to_string(),
        result.convergence.iterations.to_string(),
        fmt_f64(result.convergence.grad_max),
    ];
    write_rows(path, &header, &[row])
}

pub fn write_posterior(result: &EstimationResult, path: &Path) -> Result<()> {
    let mut header = vec!["respondent_id".to_string()];
    header.extend((1..=result.class_count()).map(|q| format!("class{q}")));
    let rows: Vec<Vec<String>> = result
        .respondent_ids
        .iter()
        .zip(&result.posterior)
        .map(|(id, p)| {
            let mut row = vec![id.clone()];
            row.extend(p.iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}

pub fn write_starts(result: &EstimationResult, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = result
        .starts
        .iter()
        .map(|s| {
            vec![
                s.start.to_string(),
                s.draws.to_string(),
                fmt_f64(s.loglik),
                s.status.map_or("error", |st| st.as_str()).to_string(),
                s.message.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_rows(path, &strings(&["start", "draws", "loglik", "status", "message"]), &rows)
}

pub fn write_sweep(rows: &[SweepRow], selected: Option<usize>, path: &Path) -> Result<()> {
    let max_q = rows.iter().map(|r| r.classes).max().unwrap_or(0);
    let mut header = strings(&["classes", "ll", "bic", "aic", "caic", "aicc", "hqic", "k"]);
    header.extend((1..=max_q).map(|q| format!("share{q}")));
    header.extend(strings(&["min_share", "qualified", "converged", "selected"]));
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.classes.to_string(),
                fmt_f64(r.loglik),
                fmt_f64(r.bic),
                fmt_f64(r.aic),
                fmt_f64(r.caic),
                fmt_f64(r.aicc),
                fmt_f64(r.hqic),
                r.k.to_string(),
            ];
            row.extend((0..max_q).map(|q| r.shares.get(q).map_or(String::new(), |v| fmt_f64(*v))));
            row.push(fmt_f64(r.min_share));
            row.push(r.qualified.to_string());
            row.push(r.converged.to_string());
            row.push((selected == Some(r.classes)).to_string());
            row
        })
        .collect();
    write_rows(path, &header, &out)
}

pub fn trace_text(trace: &[TraceEntry]) -> String {
    let mut s = String::new();
    for e in trace {
        let _ = writeln!(
            s,
            "start={} draws={} iter={} loglik={} grad_max={} step={} evals={}",
            e.start,
            e.draws,
            e.row.iteration,
            fmt_f64(e.row.loglik),
            fmt_f64(e.row.grad_max),
            fmt_f64(e.row.step),
            e.row.evaluations
        );
    }
    s
}

/// Normal density grids (mean ± 4 sd, 101 points) of every random coefficient.
pub fn write_coefficient_densities(result: &EstimationResult, path: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for (q, class) in result.theta_hat.classes.iter().enumerate() {
        let names = result.spec.class_utility(q).covariates;
        for (j, alt) in class.choice.alternatives.iter().enumerate() {
            for (c, coef) in alt.coefs.iter().enumerate() {
                if let Coef::Normal { mean, sd } = coef {
                    for i in 0..=100 {
                        let x = mean + sd * (-4.0 + 8.0 * i as f64 / 100.0);
                        rows.push(vec![
                            (q + 1).to_string(),
                            (j + 1).to_string(),
                            names[c].clone(),
                            fmt_f64(x),
                            fmt_f64(std_normal_pdf((x - mean) / sd) / sd),
                        ]);
                    }
                }
            }
        }
    }
    write_rows(path, &strings(&["class", "alternative", "coefficient", "x", "density"]), &rows)
}

fn fmt_cell(v: f64, t: f64) -> String {
    if t.is_finite() {
        format!("{v:.3} ({t:.2})")
    } else {
        format!("{v:.3} (-)")
    }
}

/// Coefficients with t-statistics per class, then the fit block.
pub fn summary_text(result: &EstimationResult) -> String {
    let q_count = result.class_count();
    let mut order: Vec<(String, String)> = Vec::new();
    let mut cells: BTreeMap<(String, usize), String> = BTreeMap::new();
    for r in &result.estimates {
        let prefix = format!("class{}.", r.class);
        let short = r.name.strip_prefix(&prefix).unwrap_or(&r.name).to_string();
        if !order.iter().any(|(_, s)| *s == short) {
            order.push((r.block.as_str().to_string(), short.clone()));
        }
        cells.insert((short, r.class), fmt_cell(r.estimate, r.t));
    }
    order.sort_by_key(|(b, _)| match b.as_str() {
        "membership" => 0,
        "choice" => 1,
        "structural" => 2,
        _ => 3,
    });
    let label_w = order.iter().map(|(_, s)| s.len()).max().unwrap_or(10).max(26);
    let col_w = 18;
    let mut s = String::new();
    let _ = write!(s, "{:label_w$}", "parameter");
    for q in 1..=q_count {
        let _ = write!(s, " {:>col_w$}", format!("class {q}"));
    }
    s.push('\n');
    let mut last_block = String::new();
    for (block, name) in &order {
        if *block != last_block {
            let _ = writeln!(s, "[{block}]");
            last_block = block.clone();
        }
        let _ = write!(s, "{name:label_w$}");
        for q in 1..=q_count {
            let cell = cells.get(&(name.clone(), q)).map_or("", String::as_str);
            let cell = if cell.is_empty() && block == "membership" && q == 1 {
                "0 (reference)"
            } else {
                cell
            };
            let _ = write!(s, " {cell:>col_w$}");
        }
        s.push('\n');
    }
    let c = &result.criteria;
    let _ = write!(s, "{:label_w$}", "class share");
    for share in &result.class_shares {
        let _ = write!(s, " {:>col_w$}", format!("{share:.3}"));
    }
    s.push('\n');
    s.push('\n');
    let rows = [
        ("log-likelihood", format!("{:.3}", c.ll)),
        ("choice log-likelihood", format!("{:.3}", c.ll_choice)),
        ("null log-likelihood", format!("{:.3}", c.ll_null)),
        ("likelihood ratio vs null", format!("{:.3}", c.lr_vs_null)),
        ("adjusted McFadden rho2", format!("{:.4}", c.mcfadden_rho2_adj)),
        ("AIC", format!("{:.3}", c.aic)),
        ("BIC", format!("{:.3}", c.bic)),
        ("CAIC", format!("{:.3}", c.caic)),
        ("AICc", format!("{:.3}", c.aicc)),
        ("HQIC", format!("{:.3}", c.hqic)),
        ("parameters", c.k_params.to_string()),
        ("units", c.n_units.to_string()),
        ("draws", result.draws.to_string()),
        (
            "convergence",
            format!(
                "{} after {} iterations (max |g| = {:.2e})",
                result.convergence.status.as_str(),
                result.convergence.iterations,
                result.convergence.grad_max
            ),
        ),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "{k:label_w$} {v}");
    }
    if !result.boundary.is_empty() {
        let _ = writeln!(s, "{:label_w$} {}", "boundary estimates", result.boundary.join(", "));
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every bundle file except the run manifest.
pub fn write_bundle(result: &EstimationResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_estimates(result, &dir.join(ESTIMATES_CSV))?;
    write_fit(result, &dir.join(FIT_CSV))?;
    write_posterior(result, &dir.join(POSTERIOR_CSV))?;
    write_starts(result, &dir.join(STARTS_CSV))?;
    write_coefficient_densities(result, &dir.join(DENSITIES_CSV))?;
    write_text(&dir.join(TRACE_LOG), &trace_text(&result.trace))?;
    write_text(&dir.join(MODEL_TOML), &result.spec.to_toml_string())?;
    write_text(&dir.join(SUMMARY_TXT), &summary_text(result))?;
    Ok(())
}

/// Model specification and point estimates read back from a bundle.
pub fn read_bundle(dir: &Path) -> Result<(ModelSpec, ParameterSet)> {
    let spec = ModelSpec::from_file(&dir.join(MODEL_TOML))?;
    let path = dir.join(ESTIMATES_CSV);
    let mut rdr = csv::Reader::from_path(&path).map_err(|source| Error::Csv {
        path: path.clone(),
        source,
    })?;
    let mut values = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|source| Error::Csv {
            path: path.clone(),
            source,
        })?;
        let v: f64 = rec[3].parse().map_err(|_| Error::Row {
            table: path.display().to_string(),
            row: rec.position().map_or(0, |p| p.line() as usize),
            message: format!("estimate `{}` is not a number", &rec[3]),
        })?;
        values.insert(rec[0].to_string(), v);
    }
    let theta = ParamLayout::new(&spec)?.from_named(&values)?;
    Ok((spec, theta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub respondent: String,
    pub scenario: usize,
    pub chosen: usize,
    /// Probability of every alternative.
    pub probs: Vec<f64>,
}

/// Choice probabilities averaged over draws within each class and weighted
/// by the posterior class probabilities.
pub fn predict(data: &Dataset, spec: &ModelSpec, theta: &ParameterSet, draws: usize) -> Result<Vec<Prediction>> {
    let layout = ParamLayout::new(spec)?;
    let ds = build_draws(data.n_respondents(), draws, spec.draw_dims(), spec.skip, spec.scramble_seed)?;
    let ev = Evaluator::new(&layout, data, &ds, spec.options.drop_missing_indicators)?;
    let posterior = ev.evaluate_theta(theta, EvalRequest::VALUE)?.posterior;
    let dims = ds.dims();
    let mut out = Vec::with_capacity(data.observation_count());
    for (n, r) in data.respondents.iter().enumerate() {
        let mut acc = vec![vec![0.0; spec.alternatives]; r.scenarios.len()];
        for (q, class) in theta.classes.iter().enumerate() {
            let g = class.structural.n_latent();
            let p = class.choice.random_count();
            let mean = latent_mean(&r.x, &class.structural);
            let w = posterior[n][q] / draws as f64;
            for d in 0..draws {
                let row = &ds.respondent(n)[d * dims..(d + 1) * dims];
                let latent = realize_latents(&mean, &class.structural.psi, &row[..g])?;
                let coefs = realize_coefs(&class.choice, &row[g..g + p])?;
                for (t, s) in r.scenarios.iter().enumerate() {
                    let probs = softmax(&utility(s, &r.x, &latent, &coefs, &class.choice));
                    for (a, pr) in acc[t].iter_mut().zip(probs) {
                        *a += w * pr;
                    }
                }
            }
        }
        for (t, (s, probs)) in r.scenarios.iter().zip(acc).enumerate() {
            out.push(Prediction {
                respondent: r.id.clone(),
                scenario: t + 1,
                chosen: s.chosen,
                probs,
            });
        }
    }
    Ok(out)
}

pub fn write_predictions(preds: &[Prediction], alternatives: usize, path: &Path) -> Result<()> {
    let mut header = strings(&["respondent_id", "scenario_index", "chosen"]);
    header.extend((0..alternatives).map(|j| format!("p{j}")));
    let rows: Vec<Vec<String>> = preds
        .iter()
        .map(|p| {
            let mut row = vec![p.respondent.clone(), p.scenario.to_string(), p.chosen.to_string()];
            row.extend(p.probs.iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}
