use loopmem::scenario::{run, write_report, Command, Figure, Scenario, ScenarioError};

const IDEAL: &str = r#"
name = "ideal"
seed = 3
input_states = ["R"]
n_range = [1, 4]

[source]
pair_rate_hz = 1000.0
noiseless = true

[tomo]
mc_samples = 50

[memory]
delta_tau_ns = 36.5
pass_through_ns = 10.7
herald_latency_ns = 240.0
delay_line_compensation_ns = 505.0
rise_time_ns = 10.0

[[memory.components]]
kind = "CIRCULATOR_ARM"

[[memory.components]]
kind = "POCKELS_CELL"

[[memory.components]]
kind = "RETROREFLECTOR"

[[memory.components]]
kind = "FPC"

[[memory.components]]
kind = "COUPLER"
path = "C1-C3"

[[memory.components]]
kind = "COUPLER"
path = "C1-C2"

[[memory.components]]
kind = "COUPLER"
path = "C2-C2"

[[memory.components]]
kind = "COUPLER"
path = "C2-C3"
"#;

fn csv_rows(bytes: &[u8]) -> Vec<csv::StringRecord> {
    csv::Reader::from_reader(bytes).records().map(|r| r.unwrap()).collect()
}

fn header(bytes: &[u8]) -> Vec<String> {
    csv::Reader::from_reader(bytes)
        .headers()
        .unwrap()
        .iter()
        .map(str::to_string)
        .collect()
}

#[test]
fn ideal_tomography_is_perfect() {
    let s = Scenario::from_toml_str(IDEAL, None).unwrap();
    let report = run(&s, Command::Tomo).unwrap();
    let f = report.summary["reconstructions"][0]["result"]["fidelity"]
        .as_f64()
        .unwrap();
    assert!(f > 0.99995, "{f}");
    assert_eq!(format!("{f:.4}"), "1.0000");
}

#[test]
fn fig2c_on_the_short_preset_matches_the_closed_form() {
    let mut s = Scenario::preset("paper-short").unwrap();
    s.source.noiseless = true;
    s.input_states = vec!["H".into()];
    let report = run(&s, Command::Reproduce(Figure::Fig2c)).unwrap();
    let table = report.file("fig2c.csv").unwrap();
    let rows = csv_rows(&table.contents);
    assert_eq!(rows.len(), 8);
    for row in rows {
        let n: i32 = row[1].parse().unwrap();
        let sim: f64 = row[2].parse().unwrap();
        assert!((sim - 0.419 * 0.5f64.powi(n - 1) * 0.662).abs() < 1e-12);
    }
    let gamma = report.summary["decay_fits"]["H"]["gamma_2_2"].as_f64().unwrap();
    assert!((gamma - 0.5).abs() < 1e-9);
    assert!((report.summary["eta_0"].as_f64().unwrap() - 0.541).abs() < 1e-12);
}

#[test]
fn every_table_carries_hash_and_seed() {
    let mut s = Scenario::preset("paper-short").unwrap();
    s.tomo.mc_samples = 20;
    s.n_range = [1, 3];
    for cmd in [
        Command::Simulate,
        Command::Decay,
        Command::Malus,
        Command::Tomo,
        Command::Budget,
    ] {
        let report = run(&s, cmd).unwrap();
        for file in report.files.iter().filter(|f| f.name.ends_with(".csv")) {
            let h = header(&file.contents);
            assert_eq!(&h[h.len() - 2..], ["scenario_hash", "seed"], "{}", file.name);
            for row in csv_rows(&file.contents) {
                assert_eq!(&row[row.len() - 2], s.hash());
                assert_eq!(&row[row.len() - 1], "1");
            }
        }
        assert_eq!(report.summary["scenario_hash"], s.hash());
    }
}

#[test]
fn reproduce_is_bit_identical_per_seed() {
    let mut s = Scenario::preset("paper-short").unwrap();
    s.tomo.mc_samples = 100;
    let a = run(&s, Command::Reproduce(Figure::Fig3)).unwrap();
    let b = run(&s, Command::Reproduce(Figure::Fig3)).unwrap();
    assert_eq!(a.files, b.files);
    s.seed = Some(2);
    let c = run(&s, Command::Reproduce(Figure::Fig3)).unwrap();
    assert_ne!(a.file("fig3_malus.csv"), c.file("fig3_malus.csv"));
}

#[test]
fn reports_land_on_disk_with_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::preset("paper-improved").unwrap();
    let report = run(&s, Command::Budget).unwrap();
    let written = write_report(dir.path(), &report).unwrap();
    assert_eq!(written.len(), 3);
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("metadata.json")).unwrap()).unwrap();
    assert!(meta["created_unix_s"].as_u64().unwrap() > 0);
    assert_eq!(meta["scenario_hash"], s.hash());
    let on_disk = std::fs::read(dir.path().join("budget.csv")).unwrap();
    assert_eq!(on_disk, report.file("budget.csv").unwrap().contents);
    let leftovers = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp"))
        .count();
    assert_eq!(leftovers, 0);
    let per_cycle = report.summary["budget"]["per_cycle"].as_f64().unwrap();
    assert!((per_cycle - 0.9).abs() < 0.02);
}

#[test]
fn scenario_files_load_from_disk_with_a_preset_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("long.toml");
    std::fs::write(&path, "preset = \"paper-long\"\nseed = 11\n").unwrap();
    let s = Scenario::load(&path, None).unwrap();
    assert_eq!(s.memory.delta_tau_ns, 526.0);
    assert_eq!(s.seed, Some(11));
    let forced = Scenario::load(&path, Some("paper-short")).unwrap();
    assert_eq!(forced.memory.delta_tau_ns, 36.5);
    assert!(matches!(
        Scenario::load(&dir.path().join("missing.toml"), None),
        Err(ScenarioError::Io { .. })
    ));
}

#[test]
fn injection_sets_the_fpc_error() {
    let src = "[inject]\nfidelity = 0.9\nstate = \"R\"\nn_cycles = 3\n";
    let s = Scenario::from_toml_str(src, Some("paper-short")).unwrap();
    let eps = s.injected_fpc_error.unwrap();
    assert!(((3.0 * eps).cos().powi(2) - 0.9).abs() < 1e-9);
    let both = "[inject]\nfidelity = 0.9\nvisibility = 0.8\nstate = \"R\"\n";
    assert!(Scenario::from_toml_str(both, Some("paper-short")).is_err());
}

#[test]
fn slow_switch_is_rejected() {
    let src = "[memory]\nrise_time_ns = 40.0\n";
    let err = Scenario::from_toml_str(src, Some("paper-short")).unwrap_err();
    assert_eq!(err.kind(), "unschedulable");
    let mut s = Scenario::preset("paper-short").unwrap();
    s.memory.rise_time_ns = 36.5;
    assert_eq!(run(&s, Command::Decay).unwrap_err().kind(), "unschedulable");
}
