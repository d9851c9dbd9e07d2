use std::path::Path;

use lciclv::data::dataset::{RESPONDENT_TABLE, SCENARIO_TABLE};
use lciclv::data::{load_dataset_dir, read_dataset, validate, write_dataset};
use lciclv::estimation::EstimateOptions;
use lciclv::report;
use lciclv::synth::{simulate_dataset, SynthConfig};
use lciclv::Error;

fn fixture(n: usize) -> SynthConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/recovery.toml");
    let mut cfg = SynthConfig::from_file(&path).unwrap();
    cfg.n = n;
    cfg
}

#[test]
fn written_dataset_reloads_identically() {
    let cfg = fixture(40);
    let sim = simulate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<String> = sim.classes.iter().map(|q| (q + 1).to_string()).collect();
    write_dataset(&sim.dataset, dir.path(), Some(("true_class", &labels))).unwrap();
    let back = load_dataset_dir(dir.path(), &cfg.model).unwrap();
    assert_eq!(back, sim.dataset);
}

#[test]
fn simulation_is_reproducible_and_seed_sensitive() {
    let cfg = fixture(30);
    let a = simulate_dataset(&cfg).unwrap();
    let b = simulate_dataset(&cfg).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.classes, b.classes);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(simulate_dataset(&other).unwrap().dataset, a.dataset);
}

#[test]
fn respondents_do_not_depend_on_sample_size() {
    let small = simulate_dataset(&fixture(10)).unwrap();
    let large = simulate_dataset(&fixture(25)).unwrap();
    assert_eq!(small.dataset.respondents[..], large.dataset.respondents[..10]);
}

#[test]
fn synth_config_round_trips_through_toml() {
    let cfg = fixture(12);
    let back = SynthConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn out_of_range_indicator_is_reported_with_respondent() {
    let cfg = fixture(20);
    let sim = simulate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&sim.dataset, dir.path(), None).unwrap();
    let rpath = dir.path().join(RESPONDENT_TABLE);
    let text = std::fs::read_to_string(&rpath).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut fields: Vec<String> = lines[3].split(',').map(String::from).collect();
    let a1 = lines[0].split(',').position(|h| h == "A1").unwrap();
    fields[a1] = "9".into();
    let id = fields[0].clone();
    lines[3] = fields.join(",");
    std::fs::write(&rpath, lines.join("\n") + "\n").unwrap();

    let data = read_dataset(&rpath, &dir.path().join(SCENARIO_TABLE), &cfg.model).unwrap();
    let rep = validate(&data, &cfg.model);
    assert_eq!(rep.violations.len(), 1);
    assert_eq!(rep.violations[0].respondent, id);
    assert_eq!(rep.violations[0].field, "A1");
    match load_dataset_dir(dir.path(), &cfg.model) {
        Err(Error::Row { row, .. }) => assert_eq!(row, 3),
        other => panic!("expected a row error, got {other:?}"),
    }
}

#[test]
fn missing_column_is_a_schema_error() {
    let cfg = fixture(5);
    let sim = simulate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&sim.dataset, dir.path(), None).unwrap();
    let rpath = dir.path().join(RESPONDENT_TABLE);
    let text = std::fs::read_to_string(&rpath).unwrap();
    std::fs::write(&rpath, text.replacen("A2", "B2", 1)).unwrap();
    match load_dataset_dir(dir.path(), &cfg.model) {
        Err(Error::MissingColumn { column, .. }) => assert_eq!(column, "A2"),
        other => panic!("expected a missing column, got {other:?}"),
    }
}

#[test]
fn bundle_round_trips_model_and_parameters() {
    let cfg = fixture(60);
    let sim = simulate_dataset(&cfg).unwrap();
    let opts = EstimateOptions {
        draws: Some(10),
        starts: 1,
        max_iter: 15,
        se_method: lciclv::estimation::SeMethod::Bhhh,
        ..EstimateOptions::default()
    };
    let res = lciclv::estimation::estimate(&sim.dataset, &cfg.model, &opts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    report::write_bundle(&res, dir.path()).unwrap();
    let (spec, theta) = report::read_bundle(dir.path()).unwrap();
    assert_eq!(spec, res.spec);
    let layout = lciclv::params::ParamLayout::new(&spec).unwrap();
    let a = layout.natural_values(&theta).unwrap();
    let b = layout.natural_values(&res.theta_hat).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
    }
    let preds = report::predict(&sim.dataset, &spec, &theta, 10).unwrap();
    assert_eq!(preds.len(), sim.dataset.observation_count());
    for p in &preds {
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
