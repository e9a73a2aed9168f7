use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn teca(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teca"))
        .args(args)
        .env("TECA_OUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = teca(&["train", "--config", s(&missing)], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.cfg"), "{}", stderr(&o));
}

#[test]
fn bad_key_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\n# comment\nlearning_rat = 0.1\n").unwrap();
    let o = teca(&["train", "--config", s(&cfg)], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 3") && err.contains("learning_rat"), "{err}");
}

fn telemetry_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn smoke_train_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = teca(&["train", "--config", s(&smoke_config()), "--iters", "50", "--out", s(&a)], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = telemetry_lines(&a.join("cer/telemetry.jsonl"));
    assert_eq!(lines.len(), 50);
    for l in &lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for key in ["mean_length", "clip_ratio", "mean_reward", "accuracy", "kl_mean"] {
            assert!(v[key].as_f64().unwrap().is_finite(), "{key} in {l}");
        }
    }
    for f in ["manifest.json", "summary.json", "cer/final.json", "cer/eval_report.json", "cer/eval_traces.jsonl"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let again = teca(&["train", "--config", s(&smoke_config()), "--iters", "5", "--out", s(&a)], dir.path());
    assert_eq!(again.status.code(), Some(2), "refuses to overwrite a run");

    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for out in [&b, &c] {
        let o = teca(
            &["train", "--config", s(&smoke_config()), "--iters", "8", "--seed", "7", "--out", s(out)],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(
        telemetry_lines(&b.join("cer/telemetry.jsonl")),
        telemetry_lines(&c.join("cer/telemetry.jsonl"))
    );
    assert_ne!(
        telemetry_lines(&b.join("cer/telemetry.jsonl")),
        telemetry_lines(&a.join("cer/telemetry.jsonl"))[..8].to_vec()
    );
}

#[test]
fn analyze_single_trace_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces.jsonl");
    std::fs::write(
        &traces,
        "{\"entropies\":[1.0,2.0,0.5,0.25],\"correct\":true}\n{\"entropies\":[3.0,1.0],\"correct\":false}\n",
    )
    .unwrap();
    let out = dir.path().join("analysis");
    let o = teca(&["analyze", s(&traces), "--out", s(&out), "--correct-only"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["curves"][0]["traces"], 1);
    let csv = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    assert_eq!(first[1].parse::<f64>().unwrap(), 1.0);
    assert!((last[1].parse::<f64>().unwrap() - 0.9375).abs() < 1e-12);

    let again = teca(&["analyze", s(&out.join("curve.csv"))], dir.path());
    assert_eq!(again.status.code(), Some(2), "{}", stderr(&again));

    let missing = teca(&["analyze", s(&dir.path().join("absent.jsonl"))], dir.path());
    assert_eq!(missing.status.code(), Some(3));
}

fn write_report(path: &Path, name: &str, acc: f64, len: f64) {
    let body = serde_json::json!({
        "name": name,
        "problems": 100,
        "accuracy": acc,
        "mean_length": len,
        "delta_length_pct": null,
        "baseline": null,
        "by_difficulty": [],
    });
    std::fs::write(path, body.to_string()).unwrap();
}

#[test]
fn report_table_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.json");
    let cer = dir.path().join("cer.json");
    write_report(&base, "baseline", 0.9, 100.0);
    write_report(&cer, "cer", 0.88, 29.0);
    let tel = dir.path().join("telemetry.jsonl");
    let rec = |i: usize| {
        serde_json::json!({
            "iteration": i, "epoch": 0, "mean_reward": 1.0, "accuracy": 0.5,
            "mean_length": 20.0 - i as f64, "min_length": 5, "clip_ratio": 0.1,
            "mean_teca_last": 0.4, "objective": 0.0, "kl_mean": 0.0, "grad_norm": 1.0,
            "active_groups": 3
        })
        .to_string()
    };
    std::fs::write(&tel, format!("{}\n{}\n", rec(0), rec(1))).unwrap();
    let out = dir.path().join("report");
    let o = teca(
        &["report", "--eval", s(&base), "--eval", s(&cer), "--telemetry", &format!("cer={}", s(&tel)), "--out", s(&out)],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("71.00%"), "{table}");
    let svg = std::fs::read_to_string(out.join("mean_length.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("<title>mean_length</title>"));
    assert!(svg.contains("class=\"x-axis\"") && svg.contains("class=\"y-axis\""));
    assert_eq!(svg.matches("<polyline class=\"series\" data-label=\"cer\"").count(), 1);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name":"x","accuracy":"high"}"#).unwrap();
    let o = teca(&["report", "--eval", s(&base), "--eval", s(&bad)], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn response_limit_must_fit_the_warm_start() {
    let dir = tempfile::tempdir().unwrap();
    let o = teca(
        &["train", "--config", s(&smoke_config()), "--set", "max_response_length=20"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("warm-start"), "{}", stderr(&o));
}
