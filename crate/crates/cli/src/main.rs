//! `lciclv`: batch frontend for estimating latent class ICLV models.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lciclv::data::dataset::{RESPONDENT_TABLE, SCENARIO_TABLE};
use lciclv::data::{load_dataset_dir, read_dataset, validate, write_dataset, ModelSpec};
use lciclv::estimation::{
    class_sweep, estimate_with_progress, EstimateOptions, EstimationResult, SeMethod, TraceEntry,
};
use lciclv::measurement::reliability::reliability_report;
use lciclv::report;
use lciclv::synth::{simulate_dataset, SynthConfig};

use manifest::Manifest;

/// Exit status of a run that completed but did not converge.
const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "lciclv", version, about = "Latent class ICLV estimation by maximum simulated likelihood")]
struct Cli {
    /// Worker threads for likelihood evaluation (default: all cores).
    #[arg(long, global = true, env = "LCICLV_THREADS")]
    threads: Option<usize>,
    /// Suppress per-iteration progress on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a dataset against a model specification.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Estimate a model and write a result bundle.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Override the class count of the model.
        #[arg(long)]
        classes: Option<usize>,
        #[command(flatten)]
        est: EstimateArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate 1..=max classes and select the class count.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        max_classes: usize,
        #[command(flatten)]
        est: EstimateArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset from known parameters.
    Simulate {
        #[arg(long)]
        synth_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scale reliability and discriminant validity tables.
    Reliability {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Fitted bundle supplying standardized loadings.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-observation choice probabilities from a fitted bundle.
    Predict {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct EstimateArgs {
    /// Draws per respondent (default: the model file's `draws`).
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    starts: usize,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Gradient tolerance (max absolute component).
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Relative log-likelihood change tolerance; 0 disables.
    #[arg(long, default_value_t = 1e-9)]
    ftol: f64,
    /// Standard errors: `hessian` or `bhhh`.
    #[arg(long, default_value = "hessian")]
    se: SeMethod,
    /// Optimize all starts with this many draws before refining the best.
    #[arg(long)]
    warmup_draws: Option<usize>,
}

impl EstimateArgs {
    fn options(&self, threads: Option<usize>) -> EstimateOptions {
        EstimateOptions {
            draws: self.draws,
            seed: self.seed,
            max_iter: self.max_iter,
            gtol: self.tol,
            ftol: self.ftol,
            starts: self.starts,
            se_method: self.se,
            threads,
            warmup_draws: self.warmup_draws,
            ..EstimateOptions::default()
        }
    }
}

fn load_spec(path: &Path) -> Result<ModelSpec> {
    ModelSpec::from_file(path).with_context(|| format!("reading model specification {}", path.display()))
}

fn progress(quiet: bool) -> impl FnMut(&TraceEntry) {
    move |e: &TraceEntry| {
        if !quiet {
            eprintln!(
                "start {} draws {} iter {:>4}  ll {:.6}  max|g| {:.3e}",
                e.start, e.draws, e.row.iteration, e.row.loglik, e.row.grad_max
            );
        }
    }
}

fn warn_draws(spec: &ModelSpec, draws: Option<usize>) {
    if draws.unwrap_or(spec.draws) == 1 {
        eprintln!("warning: R = 1 draw gives a crude simulation; use it for smoke tests only");
    }
}

fn run(cli: &Cli, manifest: &mut Manifest) -> Result<u8> {
    match &cli.command {
        Command::Validate { config, data_dir } => {
            let spec = load_spec(config)?;
            let data = read_dataset(&data_dir.join(RESPONDENT_TABLE), &data_dir.join(SCENARIO_TABLE), &spec)?;
            let rep = validate(&data, &spec);
            println!("{} violations", rep.violations.len());
            for v in &rep.violations {
                println!("{v}");
            }
            Ok(if rep.is_clean() { 0 } else { 1 })
        }
        Command::Estimate {
            config,
            data_dir,
            classes,
            est,
            out,
        } => {
            let mut spec = load_spec(config)?;
            if let Some(q) = classes {
                spec = spec.with_classes(*q);
            }
            manifest.config = Some(config.clone());
            manifest.data = vec![data_dir.clone()];
            manifest.seed = Some(est.seed);
            manifest.draws = Some(est.draws.unwrap_or(spec.draws));
            manifest.out = Some(out.clone());
            warn_draws(&spec, est.draws);
            let data = load_dataset_dir(data_dir, &spec)?;
            let opts = est.options(cli.threads);
            let result = estimate_with_progress(&data, &spec, &opts, progress(cli.quiet))?;
            report::write_bundle(&result, out)?;
            print!("{}", report::summary_text(&result));
            Ok(status_code(&result))
        }
        Command::Sweep {
            config,
            data_dir,
            max_classes,
            est,
            out,
        } => {
            if *max_classes == 0 {
                bail!("--max-classes must be >= 1");
            }
            let spec = load_spec(config)?;
            manifest.config = Some(config.clone());
            manifest.data = vec![data_dir.clone()];
            manifest.seed = Some(est.seed);
            manifest.draws = Some(est.draws.unwrap_or(spec.draws));
            manifest.out = Some(out.clone());
            warn_draws(&spec, est.draws);
            let data = load_dataset_dir(data_dir, &spec)?;
            let opts = est.options(cli.threads);
            let classes: Vec<usize> = (1..=*max_classes).collect();
            let sweep = class_sweep(&data, &spec, &classes, &opts)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            report::write_sweep(&sweep.rows, sweep.selected, &out.join(report::SWEEP_CSV))?;
            for r in &sweep.results {
                report::write_bundle(r, &out.join(format!("classes{}", r.class_count())))?;
            }
            println!("{:>7} {:>14} {:>12} {:>12} {:>12} {:>12} {:>4}  shares", "classes", "LL", "BIC", "AIC", "CAIC", "HQIC", "k");
            for r in &sweep.rows {
                let shares: Vec<String> = r.shares.iter().map(|s| format!("{s:.3}")).collect();
                println!(
                    "{:>7} {:>14.3} {:>12.3} {:>12.3} {:>12.3} {:>12.3} {:>4}  {}{}",
                    r.classes,
                    r.loglik,
                    r.bic,
                    r.aic,
                    r.caic,
                    r.hqic,
                    r.k,
                    shares.join("/"),
                    if r.qualified { "" } else { "  (share < 10%)" }
                );
            }
            match sweep.selected {
                Some(q) => println!("selected classes: {q}"),
                None => println!("selected classes: none (every solution has a class below 10%)"),
            }
            let all_converged = sweep.results.iter().all(|r| r.convergence.converged);
            Ok(if all_converged { 0 } else { EXIT_NOT_CONVERGED })
        }
        Command::Simulate { synth_config, out } => {
            let cfg = SynthConfig::from_file(synth_config)
                .with_context(|| format!("reading synthetic configuration {}", synth_config.display()))?;
            manifest.config = Some(synth_config.clone());
            manifest.seed = Some(cfg.seed);
            manifest.out = Some(out.clone());
            let sim = simulate_dataset(&cfg)?;
            let classes: Vec<String> = sim.classes.iter().map(|q| (q + 1).to_string()).collect();
            write_dataset(&sim.dataset, out, Some(("true_class", &classes)))?;
            std::fs::write(out.join(report::MODEL_TOML), cfg.model.to_toml_string())
                .with_context(|| format!("writing {}", out.join(report::MODEL_TOML).display()))?;
            println!(
                "{} respondents, {} observations written to {}",
                sim.dataset.n_respondents(),
                sim.dataset.observation_count(),
                out.display()
            );
            Ok(0)
        }
        Command::Reliability {
            config,
            data_dir,
            bundle,
            out,
        } => {
            let spec = load_spec(config)?;
            manifest.config = Some(config.clone());
            manifest.data = vec![data_dir.clone()];
            manifest.out = Some(out.clone());
            let data = load_dataset_dir(data_dir, &spec)?;
            let loadings = match bundle {
                Some(b) => Some(bundle_std_loadings(b, &spec)?),
                None => None,
            };
            let rep = reliability_report(&data, &spec, loadings.as_deref())?;
            rep.write_csv(out)?;
            println!("{:<16} {:>7} {:>7} {:>7} {:>7}", "construct", "alpha", "AVE", "CR", "sqrtAVE");
            for (g, name) in rep.constructs.iter().enumerate() {
                println!(
                    "{:<16} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
                    name, rep.alpha[g], rep.ave[g], rep.cr[g], rep.sqrt_ave[g]
                );
            }
            Ok(0)
        }
        Command::Predict {
            bundle,
            data_dir,
            draws,
            out,
        } => {
            let (spec, theta) = report::read_bundle(bundle)?;
            manifest.config = Some(bundle.join(report::MODEL_TOML));
            manifest.data = vec![data_dir.clone(), bundle.clone()];
            let r = draws.unwrap_or(spec.draws);
            manifest.draws = Some(r);
            manifest.out = Some(out.clone());
            let data = load_dataset_dir(data_dir, &spec)?;
            let preds = report::predict(&data, &spec, &theta, r)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            report::write_predictions(&preds, spec.alternatives, &out.join(report::PREDICTIONS_CSV))?;
            let n = preds.len().max(1) as f64;
            for j in 1..spec.alternatives {
                let predicted = preds.iter().map(|p| p.probs[j]).sum::<f64>() / n;
                let observed = preds.iter().filter(|p| p.chosen == j).count() as f64 / n;
                println!("alternative {j}: mean predicted {predicted:.4}, observed share {observed:.4}");
            }
            Ok(0)
        }
    }
}

fn status_code(result: &EstimationResult) -> u8 {
    if result.convergence.converged {
        0
    } else {
        eprintln!(
            "warning: estimation did not converge ({}); the bundle is still written",
            result.convergence.status.as_str()
        );
        EXIT_NOT_CONVERGED
    }
}

/// Class-share weighted standardized loadings D·√ψ / √(D²ψ + s²) from a
/// fitted bundle, grouped by construct.
fn bundle_std_loadings(bundle: &Path, spec: &ModelSpec) -> Result<Vec<Vec<f64>>> {
    let (_, theta) = report::read_bundle(bundle)?;
    let shares = read_shares(&bundle.join(report::POSTERIOR_CSV), theta.classes.len())?;
    let inds = spec.indicators();
    let mut out = vec![Vec::new(); spec.n_latent()];
    for (h, info) in inds.iter().enumerate() {
        let mut v = 0.0;
        for (class, w) in theta.classes.iter().zip(&shares) {
            let m = &class.measurement;
            let psi = class.structural.psi.variance(info.latent);
            let d = m.loadings[h];
            let s = m.error_sd[h];
            v += w * d * psi.sqrt() / (d * d * psi + s * s).sqrt();
        }
        out[info.latent].push(v);
    }
    Ok(out)
}

fn read_shares(path: &Path, q: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut sums = vec![0.0; q];
    let mut n = 0usize;
    for line in text.lines().skip(1) {
        for (k, field) in line.split(',').skip(1).take(q).enumerate() {
            sums[k] += field.parse::<f64>().with_context(|| format!("bad posterior value in {}", path.display()))?;
        }
        n += 1;
    }
    if n == 0 {
        bail!("{} has no rows", path.display());
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate { .. } => "validate",
        Command::Estimate { .. } => "estimate",
        Command::Sweep { .. } => "sweep",
        Command::Simulate { .. } => "simulate",
        Command::Reliability { .. } => "reliability",
        Command::Predict { .. } => "predict",
    }
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut manifest = Manifest::start(command_name(&cli.command));
    let code = match run(&cli, &mut manifest) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            1
        }
    };
    if let Some(out) = manifest.out.clone() {
        if out.is_dir() {
            if let Err(e) = manifest.finish(code).write(&out) {
                eprintln!("error: writing run manifest: {e:#}");
                return ExitCode::from(1);
            }
        }
    }
    ExitCode::from(code)
}
