use super::*;

const BOUNDS: &str = r#"
schema_version = 1
id = "bounds-small"

[ensemble]
gamma = "free"
gamma_prime = "periodic"
beta = 1.0
n = 6
seed = 42

[ensemble.geometry]
window = [2, 2]
margin = [1, 1]

[ensemble.bootstrap]
resamples = 100
seed = 1

[experiment]
kind = "bounds"
betas = [0.5, 2.0]
"#;

fn cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

#[test]
fn config_round_trips() {
    let c = cfg(BOUNDS);
    assert_eq!(c.experiment, Experiment::Bounds { betas: vec![0.5, 2.0], lemma: true });
    let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(again, c);
    for kind in [
        "fe", "domain-wall", "ensemble", "martingale", "edge-martingale", "lindeberg", "bounds", "mgf", "probe",
        "scaling", "identity", "covariance", "oracle-verify",
    ] {
        let mut d = ExperimentConfig::default();
        d.experiment = default_experiment(kind).unwrap();
        d.ensemble.as_mut().unwrap().geometry = crate::fluctuation::Geometry::centered(&[4, 4], 1);
        let t = d.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&t).unwrap(), d, "{kind}");
    }
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    let typo = BOUNDS.replace("betas", "betaz");
    assert!(matches!(ExperimentConfig::from_toml(&typo), Err(Error::Config(_))));
    let extra = BOUNDS.replace("n = 6", "n = 6\nnn = 3");
    assert!(ExperimentConfig::from_toml(&extra).is_err());
    let version = BOUNDS.replace("schema_version = 1", "schema_version = 9");
    assert!(ExperimentConfig::from_toml(&version).is_err());
    let beta = BOUNDS.replace("beta = 1.0", "beta = -1.0");
    assert!(ExperimentConfig::from_toml(&beta).is_err());
}

#[test]
fn single_realization_gives_degenerate_report() {
    let mut c = ExperimentConfig::default();
    c.ensemble.as_mut().unwrap().n = 1;
    c.ensemble.as_mut().unwrap().geometry = crate::fluctuation::Geometry::centered(&[2, 2], 1);
    let (records, rep) = run_in_memory(&c, Some(1)).unwrap();
    assert_eq!(records.len(), 1);
    let flags = rep.report["flags"].as_array().unwrap();
    assert!(flags[0].as_str().unwrap().contains("degenerate"));
}

#[test]
fn reruns_and_worker_counts_give_identical_bytes() {
    let c = cfg(BOUNDS);
    let dir = tempfile::tempdir().unwrap();
    let a = run(&c, &dir.path().join("a"), Some(1)).unwrap();
    let b = run(&c, &dir.path().join("b"), Some(8)).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    for f in ["report.json", "records.jsonl", "summary.csv", "slack_histogram.csv"] {
        let x = fs::read(dir.path().join("a").join(f)).unwrap();
        let y = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let slack = a.table("summary.csv").unwrap();
    assert!(slack.starts_with("realization,beta,f,bound,slack,lemma_slack"));
    assert_eq!(a.report["violations"], 0);
}

#[test]
fn interrupted_run_resumes_to_the_same_report() {
    let c = cfg(BOUNDS);
    let dir = tempfile::tempdir().unwrap();
    let full = run(&c, &dir.path().join("full"), Some(2)).unwrap();

    let part = dir.path().join("part");
    run(&c, &part, Some(2)).unwrap();
    let text = fs::read_to_string(part.join("records.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // keep five records and half of a sixth
    let mut torn = lines[..5].join("\n");
    torn.push('\n');
    torn.push_str(&lines[5][..lines[5].len() / 2]);
    fs::write(part.join("records.jsonl"), torn).unwrap();
    assert!(matches!(report_dir(&part), Err(Error::IncompleteRun(_))));
    let resumed = run(&c, &part, Some(3)).unwrap();
    assert_eq!(full.to_json().unwrap(), resumed.to_json().unwrap());
    assert_eq!(
        fs::read(dir.path().join("full/summary.csv")).unwrap(),
        fs::read(part.join("summary.csv")).unwrap()
    );
}

#[test]
fn mismatched_config_in_output_dir_is_refused() {
    let c = cfg(BOUNDS);
    let dir = tempfile::tempdir().unwrap();
    run(&c, dir.path(), Some(1)).unwrap();
    let mut other = c.clone();
    other.ensemble.as_mut().unwrap().seed = 43;
    assert!(matches!(run(&other, dir.path(), Some(1)), Err(Error::Config(_))));
}

#[test]
fn empty_records_are_an_incomplete_run() {
    let c = cfg(BOUNDS);
    assert!(matches!(report(&c, &[]), Err(Error::IncompleteRun(_))));
}

#[test]
fn oracle_checks_caps_and_passes_at_beta_zero() {
    let mut o = match default_experiment("oracle-verify").unwrap() {
        Experiment::OracleVerify(o) => o,
        _ => unreachable!(),
    };
    o.instances = 3;
    o.betas = vec![0.0];
    let (_, rep) = oracle_verify(&o).unwrap();
    assert!(rep.pass);
    assert!(rep.max_log_z_deviation <= 1e-12 && rep.max_correlation_deviation <= 1e-12);

    o.geometries = vec![vec![13, 13]];
    assert!(matches!(oracle_verify(&o), Err(Error::Unsupported(_))));
    o.geometries = vec![vec![2, 2, 2]];
    assert!(matches!(oracle_verify(&o), Err(Error::Unsupported(_))));
}

#[test]
fn worker_env_is_parsed() {
    // only the parser; the variable itself is left alone
    assert!(env_workers().is_ok());
}
