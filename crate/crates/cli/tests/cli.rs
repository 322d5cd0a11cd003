use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BASE: &str = r#"
name = "cli-test"
seed = 4
threads = 1
output = "out"

[schedule]
variance = "edm"
grid = "poly"
rho = 7.0
sigma_min = 0.002
sigma_max = 80.0
steps = 4

[data]
source = "gaussian"
d = 4
n = 8
sigma = 1.0

[net]
m = 256
L = 2
"#;

const ORACLE: &str = r#"
name = "cli-oracle"
seed = 2
output = "out"

[schedule]
variance = "song"
grid = "exp"
sigma_min = 0.002
sigma_max = 80.0
steps = 100

[data]
source = "gaussian"
d = 2
n = 1
mean = [1.0, -1.0]
sigma = 0.2
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vesde"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

/// Data rows of a CSV artifact, after the hash line and the column header.
fn csv_rows(path: &Path) -> (String, Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let meta = lines.next().unwrap().to_string();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (meta, header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

fn f(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn train_writes_artifacts_and_reduces_loss() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{BASE}\n[train]\nmax_steps = 200\neps_train = 1e-12\n"));
    let out = run(&cfg, &["train"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = dir.path().join("out");
    assert!(out_dir.join("checkpoint.bin").exists());
    let (meta, header, rows) = csv_rows(&out_dir.join("loss_trace.csv"));
    assert!(meta.starts_with("# config_hash=") && meta.ends_with("seed=4"));
    assert_eq!(header, ["step", "loss"]);
    assert_eq!(rows.len(), 201);
    assert!(f(&rows[200][1]) < f(&rows[0][1]));
    let (_, header, rows) = csv_rows(&out_dir.join("decay_ratio.csv"));
    assert_eq!(header, ["step", "loss", "ratio", "j_star", "rate_factor"]);
    assert_eq!(rows.len(), 200);
}

#[test]
fn infinite_eps_train_succeeds_after_one_step() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{BASE}\n[train]\nmax_steps = 50\neps_train = inf\n"));
    let out = run(&cfg, &["train"]);
    assert_eq!(out.status.code(), Some(0));
    let (_, _, rows) = csv_rows(&dir.path().join("out/loss_trace.csv"));
    assert_eq!(rows.len(), 2);
}

#[test]
fn invalid_pairing_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let text = BASE.replace("grid = \"poly\"", "grid = \"exp\"");
    let cfg = write_config(dir.path(), &format!("{text}\n[train]\nmax_steps = 5\neps_train = 1e-12\n"));
    let out = run(&cfg, &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pairing"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{BASE}\n[train]\nmax_step = 5\neps_train = 1e-12\n"));
    let out = run(&cfg, &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn oracle_rows_match_crosscheck() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{ORACLE}\n[oracle]\nsteps = [25, 50, 100]\n"));
    let out = run(&cfg, &["oracle"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, header, rows) = csv_rows(&dir.path().join("out/oracle.csv"));
    assert_eq!(rows.len(), 3);
    let (kl, cc) = (col(&header, "exact_kl"), col(&header, "kl_crosscheck"));
    for r in &rows {
        let (a, b) = (f(&r[kl]), f(&r[cc]));
        assert!((a - b).abs() <= 1e-10 * a.abs(), "{a} vs {b}");
    }
    assert!(dir.path().join("out/report.txt").exists());
}

#[test]
fn empty_oracle_list_gives_header_only() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{ORACLE}\n[oracle]\nsteps = []\n"));
    assert!(run(&cfg, &["oracle"]).status.success());
    let (_, header, rows) = csv_rows(&dir.path().join("out/oracle.csv"));
    assert_eq!(header[0], "N");
    assert!(rows.is_empty());
}

#[test]
fn oracle_needs_gaussian_data() {
    let dir = TempDir::new().unwrap();
    let text = ORACLE.replace("source = \"gaussian\"", "source = \"mixture\"");
    let cfg = write_config(dir.path(), &format!("{text}\n[oracle]\nsteps = [10]\n"));
    let out = run(&cfg, &["oracle"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn compare_schedules_reports_winners() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{ORACLE}\n[compare]\nsteps = [1, 100]\nrho_sweep = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]\n"),
    );
    let out = run(&cfg, &["compare-schedules"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, header, rows) = csv_rows(&dir.path().join("out/compare.csv"));
    let (samp, score) = (col(&header, "sampling_dominant_winner"), col(&header, "score_dominant_winner"));
    assert_eq!((rows[0][samp].as_str(), rows[0][score].as_str()), ("none", "none"));
    assert_eq!((rows[1][samp].as_str(), rows[1][score].as_str()), ("exp", "poly"));

    let (_, _, sweep) = csv_rows(&dir.path().join("out/rho_sweep.csv"));
    let best = sweep
        .iter()
        .min_by(|a, b| f(&a[1]).total_cmp(&f(&b[1])))
        .unwrap();
    assert!((f(&best[0]) - f(&best[2])).abs() <= 1.0);
}

#[test]
fn oracle_sampling_moments_have_reference_columns() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{ORACLE}\n[sample]\ntrajectories = 20000\nscore = \"oracle\"\n"));
    let out = run(&cfg, &["sample"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, _, samples) = csv_rows(&dir.path().join("out/samples.csv"));
    assert_eq!(samples.len(), 20000);
    let (_, header, rows) = csv_rows(&dir.path().join("out/moments.csv"));
    let (m, se, rm, v, rv) = (
        col(&header, "mean"),
        col(&header, "mean_se"),
        col(&header, "ref_mean"),
        col(&header, "var"),
        col(&header, "ref_var"),
    );
    for r in &rows {
        assert!((f(&r[m]) - f(&r[rm])).abs() <= 4.0 * f(&r[se]));
        assert!((f(&r[v]) - f(&r[rv])).abs() <= 0.05 * f(&r[rv]));
    }
}

#[test]
fn zero_trajectories_gives_empty_samples() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{ORACLE}\n[sample]\ntrajectories = 0\nscore = \"oracle\"\n"));
    assert!(run(&cfg, &["sample"]).status.success());
    let (_, _, rows) = csv_rows(&dir.path().join("out/samples.csv"));
    assert!(rows.is_empty());
}

#[test]
fn checkpoint_dimension_mismatch_is_an_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{BASE}\n[train]\nmax_steps = 1\neps_train = inf\n"));
    assert!(run(&cfg, &["train"]).status.success());
    let text = ORACLE.replace("output = \"out\"", "output = \"out2\"");
    let cfg = write_config(
        dir.path(),
        &format!("{text}\n[sample]\ntrajectories = 10\nscore = \"checkpoint\"\ncheckpoint = \"out/checkpoint.bin\"\n"),
    );
    let out = run(&cfg, &["sample"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
}

#[test]
fn checkpoint_sampling_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{BASE}\n[train]\nmax_steps = 1\neps_train = inf\n"));
    assert!(run(&cfg, &["train"]).status.success());
    let cfg = write_config(
        dir.path(),
        &format!("{BASE}\n[sample]\ntrajectories = 5\nscore = \"checkpoint\"\ncheckpoint = \"out/checkpoint.bin\"\nformat = \"binary\"\n"),
    );
    assert!(run(&cfg, &["sample"]).status.success());
    let bytes = fs::read(dir.path().join("out/samples.bin")).unwrap();
    assert_eq!(bytes.len(), 5 * 4 * 8);
}

#[test]
fn probe_bell_shape() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{BASE}\n[probe]\nsigma_grid = [1e-4, 1.0, 80.0]\n"));
    assert!(run(&cfg, &["probe-bell"]).status.success());
    let (_, header, rows) = csv_rows(&dir.path().join("out/probe.csv"));
    assert_eq!(header, ["sigma_bar", "residual_norm"]);
    assert_eq!(rows.len(), 3);
    assert!(f(&rows[2][1]) > f(&rows[1][1]));
}

#[test]
fn runs_are_reproducible_and_seed_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{ORACLE}\n[sample]\ntrajectories = 50\nscore = \"oracle\"\n"));
    let read = |sub: &str| fs::read_to_string(dir.path().join(sub).join("samples.csv")).unwrap();
    for sub in ["a", "b"] {
        let o = dir.path().join(sub);
        assert!(run(&cfg, &["sample", "--out", o.to_str().unwrap(), "--threads", "1"]).status.success());
    }
    assert_eq!(read("a"), read("b"));
    let o = dir.path().join("c");
    assert!(run(&cfg, &["sample", "--out", o.to_str().unwrap(), "--seed", "99"]).status.success());
    let c = read("c");
    assert!(c.lines().next().unwrap().ends_with("seed=99"));
    assert_ne!(read("a").lines().nth(2), c.lines().nth(2));
}

#[test]
fn thread_count_does_not_change_samples() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{ORACLE}\n[sample]\ntrajectories = 200\nscore = \"oracle\"\n"));
    let mut outputs = Vec::new();
    for t in ["1", "4"] {
        let o = dir.path().join(t);
        assert!(run(&cfg, &["sample", "--out", o.to_str().unwrap(), "--threads", t]).status.success());
        outputs.push(fs::read_to_string(o.join("samples.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
