use rmpc_core::experiment::{
    emit_table, initial_states, run_experiment, strip_timing, system_seed, ExperimentConfig, ResultTable, TableFormat,
};
use rmpc_core::catalog::load_system;
use rmpc_core::strategies::Strategy;

fn small(systems: &[&str], strategies: &[Strategy], n: usize) -> ExperimentConfig {
    ExperimentConfig {
        systems: systems.iter().map(|s| s.to_string()).collect(),
        strategies: strategies.to_vec(),
        n_starts: n,
        threads: 2,
        ..ExperimentConfig::default()
    }
}

#[test]
fn origin_start_has_no_reusability() {
    let cfg = ExperimentConfig {
        initial_states: Some(vec![vec![0.0, 0.0]]),
        ..small(&["DI6"], &[Strategy::Basic], 1)
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].steps, 0);
    let cell = out.table.cell("basic", "DI6").unwrap();
    assert_eq!(cell.reusability, None);
    assert_eq!(cell.trajectories, 1);
    assert!(out.table.to_csv().lines().any(|l| l == "basic,reusability_pct,n/a,n/a"));
}

#[test]
fn strategies_share_initial_states() {
    let cfg = small(&["SISO20", "US12"], &[Strategy::Basic, Strategy::Closeq, Strategy::Asu], 12);
    for name in &cfg.systems {
        let sys = load_system(name).unwrap();
        assert_eq!(initial_states(&cfg, &sys).unwrap(), initial_states(&cfg, &sys).unwrap());
    }
    // Identical starts give identical closed loops, so step counts line up.
    let out = run_experiment(&cfg).unwrap();
    for sys in ["SISO20", "US12"] {
        let steps = |s: &str| {
            out.records.iter().filter(|r| r.system == sys && r.strategy == s).map(|r| (r.start, r.steps)).collect::<Vec<_>>()
        };
        assert_eq!(steps("basic"), steps("closeq"));
        assert_eq!(steps("basic"), steps("asu"));
        assert_eq!(steps("basic").len(), 12);
    }
    assert_ne!(system_seed(1, "SISO20"), system_seed(1, "US12"));
    assert_eq!(system_seed(1, "us12"), system_seed(1, "US12"));
}

#[test]
fn emitted_files_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    for run in 0..2 {
        let out_dir = dir.path().join(format!("run{run}"));
        let cfg = ExperimentConfig {
            output: Some(out_dir.clone()),
            threads: 1 + run,
            ..small(&["DI6", "US12"], &Strategy::ALL, 8)
        };
        run_experiment(&cfg).unwrap();
        let read = |f: &str| std::fs::read_to_string(out_dir.join(f)).unwrap();
        texts.push((strip_timing(&read("trajectories.csv")), strip_timing(&read("table.csv")), read("table.md")));
    }
    assert_eq!(texts[0].0, texts[1].0);
    assert_eq!(texts[0].1, texts[1].1);
    assert!(!texts[0].0.contains("wall_ms"));
    assert!(!texts[0].1.contains("step_ms"));
    assert!(texts[0].2.contains("| approach | DI6 | US12 | average |"));
}

#[test]
fn table_round_trip_and_layout() {
    let out = run_experiment(&small(&["DI6"], &[Strategy::Basic], 5)).unwrap();
    let csv = out.table.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("approach,metric,DI6,average"));
    assert!(lines.all(|l| l.starts_with("basic,")));
    let parsed = ResultTable::from_csv(&csv).unwrap();
    assert_eq!(parsed.to_csv(), csv);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.md");
    emit_table(&out.table, TableFormat::Markdown, &path).unwrap();
    let md = std::fs::read_to_string(path).unwrap();
    assert!(md.contains("### reusability_pct"));
    assert!(md.contains("| basic |"));

    // A tampered average is caught.
    let tampered = csv.replacen("basic,requests,", "basic,requests,9", 1);
    assert!(ResultTable::from_csv(&tampered).is_err());
}

#[test]
fn config_rejects_unknown_fields_and_systems() {
    assert!(ExperimentConfig::from_json(r#"{"systems": ["DI6"], "strategies": ["basic"], "n_starts": 3}"#).is_ok());
    assert!(ExperimentConfig::from_json(r#"{"systems": ["XYZ"]}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"systems": ["DI6"], "colour": 1}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"strategies": ["greedy"]}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"n_starts": 0}"#).is_err());
    let desk = ExperimentConfig::desk_scale(7);
    assert_eq!(desk.starts_for("MIMO75"), 100);
    assert_eq!(desk.starts_for("DI6"), 1000);
    assert_eq!(desk.strategies.len(), 5);
}
