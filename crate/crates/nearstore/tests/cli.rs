use std::path::Path;
use std::process::{Command, Output};

fn nearstore(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nearstore"))
        .args(args)
        .env_remove(nearstore::config::OUT_DIR_ENV)
        .current_dir(out)
        .output()
        .expect("binary runs")
}

fn summary_field(dir: &Path, name: &str) -> String {
    let mut r = csv::Reader::from_path(dir.join("summary.csv")).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    r.records().next().unwrap().unwrap()[idx].to_string()
}

#[test]
fn deterministic_training_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let o = nearstore(&["train", "--mode", "su_o", "--devices", "3", "--steps", "4", "--deterministic", "--out", run], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(o.stdout);
    }
    for name in ["iterations", "summary", "traffic", "timeline", "breakdown", "events"] {
        let a = std::fs::read(dir.path().join("a").join(format!("{name}.csv"))).unwrap();
        let b = std::fs::read(dir.path().join("b").join(format!("{name}.csv"))).unwrap();
        assert_eq!(a, b, "{name}.csv differs");
    }
    assert_eq!(summary_field(&dir.path().join("a"), "applied_steps"), "4");
}

#[test]
fn compressed_run_reports_gradient_bytes_under_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let o = nearstore(&["train", "--mode", "su_o_c", "--compression-pct", "2", "--devices", "2", "--steps", "2", "--out", "c"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pct: f64 = summary_field(&dir.path().join("c"), "grad_effective_pct").parse().unwrap();
    assert!(pct > 0.0 && pct <= 2.0, "{pct}");
}

#[test]
fn env_var_redirects_output() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_nearstore"))
        .args(["train", "--mode", "su", "--devices", "1", "--steps", "1", "--out", "ignored"])
        .env(nearstore::config::OUT_DIR_ENV, &target)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(target.join("summary.csv").exists());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn bad_inputs_exit_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "mode = \"su\"\nstpes = 3\n").unwrap();
    let o = nearstore(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stpes"));

    let o = nearstore(&["train", "--mode", "su", "--topology", "missing.toml", "--steps", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = nearstore(&["train", "--mode", "su_o_c", "--steps", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2), "compressed mode needs a ratio");

    let o = nearstore(&["train", "--mode", "su", "--compression-pct", "150", "--steps", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_passes_and_detects_a_corrupted_store() {
    let dir = tempfile::tempdir().unwrap();
    let o = nearstore(&["verify", "--steps", "2", "--devices", "2"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = nearstore(&["verify", "--steps", "2", "--devices", "2", "--corrupt-store"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn simulate_writes_timeline_and_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let o = nearstore(&["simulate", "--mode", "base", "--devices", "2", "--out", "s"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let b = std::fs::read_to_string(dir.path().join("s/breakdown.csv")).unwrap();
    assert!(b.lines().last().unwrap().starts_with("Total,"));
    assert!(dir.path().join("s/timeline.csv").exists());
}
