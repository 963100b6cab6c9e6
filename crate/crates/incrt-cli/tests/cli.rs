use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
n_tokens = 150
dim = 12
n_blocks = 6
rho = 0.5
theta_w = 0.35
k_protos = 3
n_min = 60
max_heads = 5
max_steps = 1500
signal_weighting = unweighted
";

fn incrt(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incrt"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_config_key_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus = 1\n");
    let out = incrt(&["exp1", "--config", &cfg], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn gradcheck_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = incrt(&["gradcheck"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("criterion 1: PASS"));
    assert!(dir.path().join("report.json").is_file());
    assert!(!dir.path().join("events.csv").exists());
}

#[test]
fn same_seed_and_config_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    incrt(&["exp1", "--config", &cfg, "--seed", "5"], &a);
    incrt(&["exp1", "--config", &cfg, "--seed", "5"], &b);
    for name in ["events.csv", "temps.csv", "forces.csv", "report.json"] {
        let (x, y) = (fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn failing_criteria_are_named_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}theta_w = 2.5\n").replace("theta_w = 0.35\n", ""));
    let out = incrt(&["exp2", "--config", &cfg], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("failing criteria: 4"), "{stderr}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("criterion 4: FAIL"));
}

#[test]
fn seed_sweep_writes_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = incrt(&["gradcheck", "--seeds", "2", "--seed", "10"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    for seed in [10, 11] {
        assert!(dir.path().join(format!("seed_{seed}")).join("report.json").is_file());
    }
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary, "seed,passed,failing\n10,true,\n11,true,\n");
}
