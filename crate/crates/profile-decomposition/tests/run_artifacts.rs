use std::fs;
use std::path::Path;

use profile_decomposition::cli::{emit_report, report_json, run_decomposition, traces_csv, ScenarioConfig};

const SMALL_RUNAWAY: &str = r#"{
  "name": "small-runaway",
  "manifold": {"kind": "euclidean"},
  "sequence": {
    "generator": "runaway-bump",
    "bumps": [{"radius": 0.25, "start": [0.0, 0.0], "step": [0.4, 0.0]}]
  },
  "params": {"p": 4.0, "k_max": 16, "grid_res": 32, "compatibility_tol": 0.02},
  "expect": {"bubbles": 1, "vanishing": false, "profile_recovery": true}
}"#;

fn small() -> ScenarioConfig {
    ScenarioConfig::from_json(SMALL_RUNAWAY).unwrap()
}

fn schema() -> serde_json::Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/report.schema.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn config_round_trips_through_json() {
    let c = small();
    let again = ScenarioConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(c, again);
    assert_eq!(c.hash(), again.hash());
}

#[test]
fn shipped_scenarios_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        profile_decomposition::cli::load_scenario(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert_eq!(n, 8);
}

#[test]
fn same_config_gives_identical_artifacts() {
    let a = run_decomposition(&small()).unwrap();
    let b = run_decomposition(&small()).unwrap();
    assert!(a.file.passed, "{:?} {:?}", a.file.errors, a.file.verdicts.iter().filter(|v| !v.passed).collect::<Vec<_>>());
    assert_eq!(report_json(&a.file), report_json(&b.file));
    assert_eq!(traces_csv(&a.file).unwrap(), traces_csv(&b.file).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&a, dir.path()).unwrap();
    for name in ["report.json", "traces.csv", "glued_1.json", "timing.json"] {
        assert!(files.contains(&dir.path().join(name)), "{name} missing");
    }

    // one row per k and stage, stage 0 being the sequence itself
    let report = a.file.report.as_ref().unwrap();
    let mut rows = csv::Reader::from_path(dir.path().join("traces.csv")).unwrap();
    let header: Vec<String> = rows.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["k", "stage", "lp_residual", "h12_residual"]);
    assert_eq!(rows.records().count(), report.k_max * (report.bubbles.len() + 1));

    let instance: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema()).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| format!("{e} at {}", e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn schema_rejects_unknown_fields() {
    let validator = jsonschema::validator_for(&schema()).unwrap();
    let mut file: serde_json::Value = serde_json::from_str(&report_json(&run_decomposition(&small()).unwrap().file)).unwrap();
    assert!(validator.is_valid(&file));
    file["unexpected"] = serde_json::json!(1);
    assert!(!validator.is_valid(&file));
}
