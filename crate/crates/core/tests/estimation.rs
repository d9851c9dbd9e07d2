use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lciclv::choice::CovariateSource;
use lciclv::data::ModelSpec;
use lciclv::estimation::{estimate, fit_plain_logit, EstimateOptions, SeFlag, SeMethod};
use lciclv::mixture::{EvalRequest, Evaluator};
use lciclv::params::ParamLayout;
use lciclv::quasirandom::build_draws;
use lciclv::synth::{simulate_dataset, SynthConfig};

fn fixture(n: usize) -> SynthConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/recovery.toml");
    let mut cfg = SynthConfig::from_file(&path).unwrap();
    cfg.n = n;
    cfg
}

/// One class, no latent effects in utility, fixed coefficients: the choice
/// block is a plain binary logit.
fn collapsed(spec: &ModelSpec) -> ModelSpec {
    let mut s = spec.with_classes(1);
    s.utility.latent.clear();
    s.utility.random.clear();
    s
}

fn tight(se: SeMethod) -> EstimateOptions {
    EstimateOptions {
        draws: Some(40),
        starts: 1,
        gtol: 1e-7,
        ftol: 0.0,
        max_iter: 2000,
        se_method: se,
        ..EstimateOptions::default()
    }
}

const CHOICE: [&str; 3] = ["class1.choice.asc", "class1.choice.wt", "class1.choice.tt"];

#[test]
fn logit_standard_errors_match_analytic_information() {
    let cfg = fixture(600);
    let sim = simulate_dataset(&cfg).unwrap();
    let spec = collapsed(&cfg.model);
    let hess = estimate(&sim.dataset, &spec, &tight(SeMethod::Hessian)).unwrap();
    let bhhh = estimate(&sim.dataset, &spec, &tight(SeMethod::Bhhh)).unwrap();

    let logit = fit_plain_logit(&sim.dataset, &[CovariateSource::Scenario(0), CovariateSource::Scenario(1)], 2).unwrap();
    let b = DVector::from_vec(logit.coefs[0].clone());
    let mut info = DMatrix::zeros(3, 3);
    for r in &sim.dataset.respondents {
        for s in &r.scenarios {
            let x = DVector::from_vec(vec![1.0, s.attributes[0], s.attributes[1]]);
            let p = 1.0 / (1.0 + (-x.dot(&b)).exp());
            info += &x * x.transpose() * (p * (1.0 - p));
        }
    }
    let cov = info.try_inverse().unwrap();
    for (k, name) in CHOICE.iter().enumerate() {
        let analytic = cov[(k, k)].sqrt();
        let se_h = hess.row(name).unwrap().se;
        let se_b = bhhh.row(name).unwrap().se;
        assert!(
            (se_h / analytic - 1.0).abs() < 0.05,
            "{name}: Hessian SE {se_h} vs analytic {analytic}"
        );
        let ratio = se_b / se_h;
        assert!((0.8..1.25).contains(&ratio), "{name}: BHHH/Hessian SE ratio {ratio}");
    }
}

#[test]
fn constant_attribute_gets_no_information_flag() {
    let cfg = fixture(300);
    let mut sim = simulate_dataset(&cfg).unwrap();
    for r in &mut sim.dataset.respondents {
        for s in &mut r.scenarios {
            s.attributes[0] = 0.0;
        }
    }
    let spec = collapsed(&cfg.model);
    let res = estimate(&sim.dataset, &spec, &tight(SeMethod::Hessian)).unwrap();
    let wt = res.row("class1.choice.wt").unwrap();
    assert_eq!(wt.flag, SeFlag::NoInformation);
    assert!(wt.se.is_nan());
    let tt = res.row("class1.choice.tt").unwrap();
    assert_eq!(tt.flag, SeFlag::Ok);
    assert!(tt.se.is_finite() && tt.se > 0.0);
}

#[test]
fn estimation_is_reproducible() {
    let cfg = fixture(150);
    let sim = simulate_dataset(&cfg).unwrap();
    let opts = EstimateOptions {
        draws: Some(20),
        starts: 2,
        se_method: SeMethod::Bhhh,
        ..EstimateOptions::default()
    };
    let a = estimate(&sim.dataset, &cfg.model, &opts).unwrap();
    let b = estimate(&sim.dataset, &cfg.model, &EstimateOptions { threads: Some(3), ..opts.clone() }).unwrap();
    assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.free), bits(&b.free));
    assert_eq!(bits(&a.standard_errors.se), bits(&b.standard_errors.se));
}

const TWO_LATENT: &str = r#"
n = 80
t = 6
seed = 5

[covariates]
income = { law = "normal", mean = 0.0, sd = 1.0 }
urban = { law = "bernoulli", p = 0.4 }

[attributes.laws]
wt = { law = "normal", mean = 2.0, sd = 1.0 }
tt = { law = "levels", values = [1.0, 2.0, 3.0] }

[truth]
"class2.membership.intercept" = 0.3
"class1.choice.asc" = 1.0
"class1.choice.wt" = -0.5
"class1.choice.tt.mean" = -0.4
"class1.choice.latent.comfort" = 0.6
"class2.choice.asc" = -0.5
"class2.choice.latent.safety" = -0.4

[model]
classes = 2
draws = 30
membership_covariates = ["urban"]
explanatory_covariates = ["income", "urban"]
scenario_attributes = ["wt", "tt"]

[[model.latent]]
name = "comfort"
structural_covariates = ["income"]
indicators = [
    { name = "C1", categories = 4 },
    { name = "C2", categories = 4 },
    { name = "C3", categories = 4 },
]

[[model.latent]]
name = "safety"
structural_covariates = ["urban"]
indicators = [
    { name = "S1", categories = 4 },
    { name = "S2", categories = 4 },
]

[model.utility]
covariates = ["wt", "tt", "income"]
latent = ["comfort", "safety"]
random = ["tt"]

[model.options]
structural_covariance = "full"
shared_thresholds = true
free_error_sd = true
"#;

#[test]
fn gradient_matches_forward_differences_with_full_covariance() {
    let cfg = SynthConfig::from_toml_str(TWO_LATENT).unwrap();
    let sim = simulate_dataset(&cfg).unwrap();
    let spec = &cfg.model;
    let layout = ParamLayout::new(spec).unwrap();
    let draws = build_draws(sim.dataset.n_respondents(), 30, spec.draw_dims(), spec.skip, None).unwrap();
    let ev = Evaluator::new(&layout, &sim.dataset, &draws, false).unwrap();
    let base = layout.pack(&cfg.theta_true().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let x: Vec<f64> = base.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
        let e = ev.evaluate(&x, EvalRequest::GRADIENT).unwrap();
        for k in 0..x.len() {
            let h = 1e-7 * x[k].abs().max(1.0);
            let mut up = x.clone();
            up[k] += h;
            let fd = (ev.evaluate(&up, EvalRequest::VALUE).unwrap().loglik - e.loglik) / h;
            let tol = 1e-3 * fd.abs().max(1.0);
            assert!(
                (e.gradient[k] - fd).abs() < tol,
                "{}: analytic {} vs forward difference {fd}",
                layout.free_names()[k],
                e.gradient[k]
            );
        }
    }
}

#[test]
fn choice_only_likelihood_excludes_indicators() {
    let cfg = fixture(100);
    let sim = simulate_dataset(&cfg).unwrap();
    let layout = ParamLayout::new(&cfg.model).unwrap();
    let draws = build_draws(100, 25, cfg.model.draw_dims(), cfg.model.skip, None).unwrap();
    let ev = Evaluator::new(&layout, &sim.dataset, &draws, false).unwrap();
    let theta = cfg.theta_true().unwrap();
    let joint = ev.evaluate_theta(&theta, EvalRequest::VALUE).unwrap().loglik;
    let choice = ev
        .evaluate_theta(&theta, EvalRequest { measurement: false, ..EvalRequest::VALUE })
        .unwrap()
        .loglik;
    assert!(choice > joint, "choice-only {choice} should exceed joint {joint}");
    assert!(choice < 0.0);
}
