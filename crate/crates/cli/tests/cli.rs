use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gantrack::checkpoint::Container;
use gantrack::nets::GanModel;
use gantrack_cli::config::{
    BaselineConfig, EvalConfig, GenDataConfig, SmoothConfig, TrackConfig, TrainConfig,
};
use serde_json::Value;

fn gantrack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gantrack"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = gantrack(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_dataset(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["gen-data", "--cases", "12", "--horizon-steps", "50", "--out", name];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

fn small_model(dir: &Path, dataset: &str, out: &str) {
    ok(
        dir,
        &[
            "train", "--dataset", dataset, "--iterations", "6", "--log-every", "3", "--validation-size", "40",
            "--out-dir", out,
        ],
    );
}

fn shown_default(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::Array(a) => Some(a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")),
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

fn check_help(sub: &str, defaults: Value) {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &[sub, "--help"]);
    let help = String::from_utf8(out.stdout).unwrap();
    for (key, value) in defaults.as_object().unwrap() {
        let flag = format!("--{}", key.replace('_', "-"));
        // an entry runs from its flag line to the next flag line
        let lines: Vec<&str> = help.lines().collect();
        let start = lines
            .iter()
            .position(|l| l.trim_start().starts_with(&format!("{flag} ")))
            .unwrap_or_else(|| panic!("{sub}: {flag} missing from help"));
        let end = (start + 1..lines.len())
            .find(|&i| lines[i].trim_start().starts_with('-'))
            .unwrap_or(lines.len());
        let line = lines[start..end].iter().map(|l| l.trim()).collect::<Vec<_>>().join(" ");
        let shown = line
            .split("[default: ")
            .nth(1)
            .and_then(|s| s.split(']').next())
            .unwrap_or_else(|| panic!("{sub}: {flag} has no default in help"));
        match shown_default(value) {
            None => assert_eq!(shown, "none"),
            Some(expect) => match (expect.parse::<f64>(), shown.parse::<f64>()) {
                (Ok(a), Ok(b)) => assert_eq!(a, b, "{sub} {flag}"),
                _ => {
                    let norm = |s: &str| s.replace(".0,", ",").trim_end_matches(".0").to_string();
                    assert_eq!(norm(&expect), norm(shown), "{sub} {flag}")
                }
            },
        }
    }
}

#[test]
fn help_documents_every_key_and_default() {
    check_help("gen-data", serde_json::to_value(GenDataConfig::default()).unwrap());
    check_help("train", serde_json::to_value(TrainConfig::default()).unwrap());
    check_help("eval", serde_json::to_value(EvalConfig::default()).unwrap());
    check_help("track", serde_json::to_value(TrackConfig::default()).unwrap());
    check_help("baseline", serde_json::to_value(BaselineConfig::default()).unwrap());
    check_help("smooth", serde_json::to_value(SmoothConfig::default()).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gantrack(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(gantrack(dir.path(), &["train", "--alpha", "fast"]).status.code(), Some(1));
    let out = gantrack(dir.path(), &["gen-data", "--param-min", "5", "--param-max", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds max"));
    assert!(!dir.path().join("dataset.json").exists());
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = gantrack(dir.path(), &["train", "--dataset", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn gen_data_is_deterministic_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), "a.json", &["--seed", "5"]);
    small_dataset(dir.path(), "b.json", &["--seed", "5"]);
    small_dataset(dir.path(), "c.json", &["--seed", "6"]);
    let a = fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.json")).unwrap());
    assert_ne!(a, fs::read(dir.path().join("c.json")).unwrap());
    let m = read_json(&dir.path().join("a.manifest.json"));
    assert_eq!(m["config"]["seed"], 5);
    assert_eq!(m["cases"], 12);
    assert_eq!(m["config"]["param_min"], 3.0);
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("exp.toml"),
        "[gen-data]\ncases = 7\nseed = 3\nhorizon_steps = 20\nout = \"from_file.json\"\n",
    )
    .unwrap();
    ok(dir.path(), &["gen-data", "--config", "exp.toml", "--seed", "4"]);
    let m = read_json(&dir.path().join("from_file.manifest.json"));
    assert_eq!(m["cases"], 7);
    assert_eq!(m["config"]["seed"], 4);

    fs::write(dir.path().join("bad.toml"), "[gen-data]\ncasez = 7\n").unwrap();
    let out = gantrack(dir.path(), &["gen-data", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("casez"));
}

#[test]
fn train_logs_checkpoints_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), "ds.json", &[]);
    small_model(dir.path(), "ds.json", "r1");
    small_model(dir.path(), "ds.json", "r2");
    let log = fs::read_to_string(dir.path().join("r1/log.csv")).unwrap();
    // 6 iterations logged every 3
    assert_eq!(log.lines().count(), 1 + 2);
    assert_eq!(log, fs::read_to_string(dir.path().join("r2/log.csv")).unwrap());
    let model = GanModel::load(&dir.path().join("r1/model.ckpt")).unwrap();
    assert_eq!(model.meta.iteration, 6);
    assert_eq!(
        fs::read(dir.path().join("r1/model.ckpt")).unwrap(),
        fs::read(dir.path().join("r2/model.ckpt")).unwrap()
    );
}

#[test]
fn sweep_emits_three_curves() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), "ds.json", &[]);
    ok(
        dir.path(),
        &[
            "train", "--dataset", "ds.json", "--sweep", "--iterations", "4", "--log-every", "2",
            "--validation-size", "40", "--out-dir", "sw",
        ],
    );
    let mut curves: Vec<String> = fs::read_dir(dir.path().join("sw"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("curve"))
        .collect();
    curves.sort();
    assert_eq!(curves, ["curve_gamma_0.00.csv", "curve_gamma_0.33.csv", "curve_gamma_1.00.csv"]);
    for g in ["0.00", "0.33", "1.00"] {
        let m = GanModel::load(&dir.path().join(format!("sw/gamma_{g}/model.ckpt"))).unwrap();
        assert_eq!(format!("{:.2}", m.meta.gamma), g);
    }
}

#[test]
fn eval_reports_two_variables_and_oracle_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["eval", "--oracle", "--m", "4", "--n", "3", "--out-dir", "o"]);
    let s = read_json(&dir.path().join("o/summary.json"));
    let vars = s["variables"].as_array().unwrap();
    assert_eq!(vars.len(), 2);
    assert_eq!(vars[0]["variable"], "x");
    assert_eq!(vars[1]["variable"], "y");
    for v in vars {
        assert_eq!(v["wasserstein1"].as_f64(), Some(0.0));
    }

    small_dataset(dir.path(), "ds.json", &[]);
    small_model(dir.path(), "ds.json", "r");
    let args = |out: &'static str| ["eval", "--checkpoint", "r/model.ckpt", "--m", "3", "--n", "4", "--out-dir", out];
    ok(dir.path(), &args("e1"));
    ok(dir.path(), &args("e2"));
    for f in ["summary.json", "violin.csv", "rollouts.csv"] {
        assert_eq!(
            fs::read(dir.path().join("e1").join(f)).unwrap(),
            fs::read(dir.path().join("e2").join(f)).unwrap(),
            "{f}"
        );
    }
    let out = gantrack(
        dir.path(),
        &["eval", "--checkpoint", "r/model.ckpt", "--profile", "full", "--m", "2", "--out-dir", "e3"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn track_writes_one_row_per_measurement() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), "ds.json", &[]);
    small_model(dir.path(), "ds.json", "r");
    ok(
        dir.path(),
        &["track", "--checkpoint", "r/model.ckpt", "--dataset", "ds.json", "--steps", "15", "--out-dir", "t"],
    );
    let rows = fs::read_to_string(dir.path().join("t/track.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 15);
    let s = read_json(&dir.path().join("t/summary.json"));
    assert_eq!(s["particles"], 100);
    assert!(s["tracking_rmse"].as_f64().unwrap() >= 0.0);
    assert!(s["open_loop_rmse"].as_f64().unwrap() >= 0.0);
}

#[test]
fn baseline_table_shape_and_exact_cam() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), "ca.json", &["--system", "constant-acceleration"]);
    small_model(dir.path(), "ca.json", "r");
    ok(
        dir.path(),
        &[
            "baseline", "--dataset", "ca.json", "--gan-checkpoint", "r/model.ckpt", "--pnet-iterations", "20",
            "--pnet-width", "8", "--gmr-components", "2", "--out-dir", "b",
        ],
    );
    let mut rdr = csv::Reader::from_path(dir.path().join("b/table.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["horizon_s", "steps", "gan", "gmr", "p_mlp", "p_lstm", "cam"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r[1].parse::<usize>().unwrap(), 10 * (k + 1));
        assert_eq!(&r[6], "0.000000");
        for v in r.iter().skip(2) {
            assert!(v.parse::<f64>().unwrap() >= 0.0);
        }
    }
    // reuse the fitted baselines
    ok(
        dir.path(),
        &[
            "baseline", "--dataset", "ca.json", "--gan-checkpoint", "r/model.ckpt", "--gmr-checkpoint", "b/gmr.ckpt",
            "--p-mlp-checkpoint", "b/p_mlp.ckpt", "--p-lstm-checkpoint", "b/p_lstm.ckpt", "--out-dir", "b2",
        ],
    );
    assert_eq!(
        fs::read(dir.path().join("b/table.csv")).unwrap(),
        fs::read(dir.path().join("b2/table.csv")).unwrap()
    );
    assert!(Container::load(&dir.path().join("b/gmr.ckpt")).is_ok());
}

#[test]
fn smooth_reads_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("agent_id,t,x,y\n");
    for k in 0..30 {
        let t = k as f64 * 0.1;
        text.push_str(&format!("car,{t},{},{}\n", 2.0 * t, -t));
    }
    fs::write(dir.path().join("in.csv"), text).unwrap();
    ok(dir.path(), &["smooth", "--input", "in.csv", "--output", "out.csv"]);
    let out = fs::read_to_string(dir.path().join("out.csv")).unwrap();
    assert_eq!(out.lines().next(), Some("agent_id,t,x,y,vx,vy,ax,ay"));
    assert_eq!(out.lines().count(), 31);

    fs::write(dir.path().join("bad.csv"), "agent_id,t,x,y\ncar,1,0,0\ncar,0.5,0,0\n").unwrap();
    let out = gantrack(dir.path(), &["smooth", "--input", "bad.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("car"));
}
