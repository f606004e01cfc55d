use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
schema_version = 1
seed = 7
h = 4
t = 8
alpha = 0.1
n_prefixes = 120
n_train = 60
n_calib = 40
n_test = 20
mc_continuations = 4
search_samples = 5
ridge_lambda = 0.001
eps_bias_grid = [0.1, 0.2, 0.3]

[env]
k = 3
m = 3
accel = 0.5
sigma_act = 0.02
sigma_sensor = 0.05
arena_half_width = 1.0

[behavioural]
eps_greedy = 0.1

[target]
eps_greedy = 0.1
eps_bias = 0.2
"#;

fn macopp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_macopp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_field_fails_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &SMALL.replace("alpha = 0.1\n", ""));
    let out = dir.path().join("out");
    let o = macopp(&["sweep", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("alpha"), "{err}");
    assert!(err.contains("config.toml"), "{err}");
}

#[test]
fn nested_missing_field_names_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &SMALL.replace("sigma_sensor = 0.05\n", ""));
    let o = macopp(&[
        "gen-data",
        "--config",
        &config,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("sigma_sensor") && err.contains("env"), "{err}");
}

#[test]
fn invalid_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &SMALL.replace("n_train = 60", "n_train = 61"));
    let o = macopp(&[
        "gen-data",
        "--config",
        &config,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("n_prefixes"), "{}", stderr(&o));
}

#[test]
fn sweep_and_report_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let o = macopp(&["sweep", "--config", &config, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));

    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("mode,eps_bias,marginal_coverage,"));
    let mut cells: Vec<(String, String)> = lines
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap().to_string(), f.next().unwrap().to_string())
        })
        .collect();
    assert_eq!(cells.len(), 12);
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), 12, "one row per (mode, eps_bias)");

    let o = macopp(&["report", "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next(),
        Some("mode,eps_bias,coverage,mean_cv,prop_unbounded")
    );
    assert_eq!(lines.count(), 12);
}

#[test]
fn staged_pipeline_matches_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let run = |out: &Path, seed: &str| {
        let out_s = out.to_str().unwrap();
        for cmd in ["gen-data", "train", "calibrate", "evaluate"] {
            let o = macopp(&[cmd, "--config", &config, "--out", out_s, "--seed", seed]);
            assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        }
        fs::read_to_string(out.join("coverage.csv")).unwrap()
    };
    let a = run(&dir.path().join("a"), "11");
    let b = run(&dir.path().join("b"), "11");
    let c = run(&dir.path().join("c"), "12");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 5);
    for f in ["train.jsonl", "calib.jsonl", "test.jsonl"] {
        assert_eq!(
            fs::read(dir.path().join("a/data").join(f)).unwrap(),
            fs::read(dir.path().join("b/data").join(f)).unwrap()
        );
    }
    assert!(dir.path().join("a/calibration/macopp_true.csv").exists());
    assert!(dir.path().join("a/outcomes/b_to_t.csv").exists());
}

#[test]
fn later_stages_explain_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = macopp(&["train", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));
}
