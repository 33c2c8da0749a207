use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"
seed = 3
[synthetic]
n_series = 10
length = 10
[model]
ref_dim = 4
static_dim = 4
hidden_dim = 4
channels = 4
embed_dim = 8
diffusion_steps = 8
k_refs = 2
[train]
max_steps = 30
enforce_every = 10
[protocol]
horizon = 10
samples = 8
bands = [[1, 5], [6, 10]]
[stability]
series = 3
rollouts = 1
[oracle]
horizon = 20
rollouts = 200
kappas = [0.3, 0.6]
"#;

fn cdlf(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cdlf"))
        .args(["--config", dir.join("run.toml").to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    dir
}

#[test]
fn full_workflow() {
    let dir = setup();
    let d = dir.path();
    let panel = d.join("panel.csv");
    let model = d.join("model.json");
    let (p, m) = (panel.to_str().unwrap(), model.to_str().unwrap());

    assert!(cdlf(d, &["gen-synthetic"]).status.success());
    assert!(panel.exists());
    let o = cdlf(d, &["train", "--panel", p]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(model.exists() && d.join("train_log.json").exists());

    let o = cdlf(d, &["evaluate", "--model", m, "--panel", p]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("climatology"));
    for f in ["metrics.json", "baseline_metrics.json", "windows.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }

    assert!(cdlf(d, &["forecast", "--model", m, "--panel", p]).status.success());
    let q = std::fs::read_to_string(d.join("quantiles.csv")).unwrap();
    assert!(q.starts_with("series_id,t,u,value\n"));

    let o = cdlf(d, &["stability-check", "--model", m, "--panel", p]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rho_bar"));
}

#[test]
fn ablation_and_oracle_commands() {
    let dir = setup();
    let d = dir.path();
    let o = cdlf(d, &["ablate-fusion"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(table.contains("(A) Multiplicative scaling") && table.contains("(B) Concat + proj (ReLU)"));
    assert!(table.contains("MAE 1-5") && table.contains("MCRPS 6-10"));

    assert!(cdlf(d, &["oracle-sim"]).status.success());
    assert!(d.join("oracle_rollouts.csv").exists());
    let o = cdlf(d, &["kappa-sweep", "--seed", "9"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(d.join("kappa_sweep.csv")).unwrap().lines().count(), 3);
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[model]\nwindw = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cdlf"))
        .args(["--config", d.join("bad.toml").to_str().unwrap(), "--out", d.to_str().unwrap(), "gen-synthetic"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));

    let dup = d.join("dup.csv");
    std::fs::write(&dup, "series_id,t,value\na,1,1\na,1,2\nb,1,1\n").unwrap();
    let o = cdlf(d, &["train", "--panel", dup.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 3"));
}
