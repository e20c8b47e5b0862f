use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use causal_qcd::CausalModel;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_causal-qcd"));
    c.env_remove("CAUSAL_QCD_OUT");
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn chain_model(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("chain.json");
    fs::write(
        &path,
        r#"{"p": 2, "A": [[0, 0], [1, 0]], "mu": [0, 0], "sigma2": [1, 1]}"#,
    )
    .unwrap();
    path
}

#[test]
fn gen_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = run(&["gen", "--preset", "multi-change-1", "--seed", "7"], dir);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["model.json", "change.json", "plan.json"] {
        let x = fs::read(a.join(name)).unwrap();
        let y = fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    assert!(a.join("effective_config.toml").exists());
}

#[test]
fn gen_random_model_validates() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["gen", "--p", "6", "--d", "2", "--seed", "1"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("model.json")).unwrap();
    let model: CausalModel = serde_json::from_str(&text).unwrap();
    model.validate().unwrap();
    assert_eq!(model.p(), 6);
    let (indeg, outdeg) = model.degrees();
    assert!(indeg.iter().chain(&outdeg).all(|&x| x <= 2));
}

#[test]
fn unknown_preset_is_config_error() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["gen", "--preset", "sim-p5"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("sim-p4") && err.contains("psych5"), "{err}");
}

#[test]
fn plan_chain_values() {
    let tmp = TempDir::new().unwrap();
    let model = chain_model(tmp.path());
    let m = model.to_str().unwrap();
    let o = run(
        &["plan", "--model", m, "--rule", "ancestors-only", "--gap", "1", "--delta-min", "0.1"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("c_1 (X1) = 14.1421"), "{}", stdout(&o));

    let o = run(&["plan", "--model", m, "--gap", "1", "--delta-min", "0.1", "--verify"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("c_1 (X1) = 14.1774"), "{text}");
    assert!(text.contains("edge X1 -> X2: min realized gap 1.000000"), "{text}");
}

#[test]
fn zero_gap_rejected() {
    let tmp = TempDir::new().unwrap();
    let model = chain_model(tmp.path());
    let o = run(&["plan", "--model", model.to_str().unwrap(), "--gap", "0"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gap must be positive"));
    assert!(!tmp.path().join("plan.json").exists());
}

#[test]
fn budget_and_delta_min_rejected() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["sweep", "--preset", "sim-p4", "--w", "10", "--q", "10"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["gen", "--delta-min", "-1"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("results.csv").exists());
}

#[test]
fn failing_plan_is_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let model = chain_model(tmp.path());
    let plan = tmp.path().join("weak.json");
    fs::write(&plan, r#"{"C": [1.0, 1.0], "gap": 1.0, "delta_min": 0.1}"#).unwrap();
    let o = run(
        &["verify", "--model", model.to_str().unwrap(), "--plan", plan.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn sweep_schema_and_rerun() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "sweep", "--preset", "sim-p4", "--methods", "MAX-AI,MULTI-NI", "--runs", "20",
        "--b-grid", "1,2", "--seed", "5",
    ];
    let o = run(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read_to_string(tmp.path().join("results.csv")).unwrap();
    let mut lines = first.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scenario_id,method,b,n_runs,arl_mean,arl_se,edd_mean,edd_se,censor_rate"
    );
    assert_eq!(lines.count(), 4);
    let o = run(&args, tmp.path());
    assert!(o.status.success());
    let second = fs::read_to_string(tmp.path().join("results.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn config_file_and_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "preset = \"sim-p4\"\nseed = 3\nw = 30\nq = 12\n").unwrap();
    let o = run(&["gen", "--config", cfg.to_str().unwrap(), "--q", "15"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let echo: toml::Table =
        toml::from_str(&fs::read_to_string(tmp.path().join("effective_config.toml")).unwrap())
            .unwrap();
    assert_eq!(echo["w"].as_integer(), Some(30));
    assert_eq!(echo["q"].as_integer(), Some(15));
    assert_eq!(echo["seed"].as_integer(), Some(3));

    fs::write(&cfg, "windw = 30\n").unwrap();
    let o = run(&["gen", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_dir_from_environment() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("from-env");
    let o = bin()
        .args(["gen", "--preset", "psych5"])
        .env("CAUSAL_QCD_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("model.json").exists());
}

#[test]
fn trace_columns() {
    let tmp = TempDir::new().unwrap();
    let o = run(
        &["trace", "--preset", "sim-p4", "--variant", "multi", "--b", "4", "--pre-change"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("trace.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,arm,explored,statistic,alarmed,lambda_1,w_1"
    );
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert!(!rows.is_empty());
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i + 1).to_string());
        if i < 20 {
            assert_eq!(r[2], "1");
            assert_eq!(r[3], "0");
        }
    }
}
