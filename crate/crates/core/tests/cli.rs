use std::path::Path;

use sensewatch::eval::cli::cli_main;

const SMALL: &str = r#"{"model": {"epochs": 2}, "synth": {"duration_hours": 24.0}}"#;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["sensewatch"];
    argv.extend_from_slice(args);
    cli_main(argv)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn small_config(dir: &Path) -> String {
    let path = p(dir, "config.json");
    std::fs::write(&path, SMALL).unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["no-such-command"]), 1);
    assert_eq!(run(&["evaluate", "--bogus-flag"]), 1);
    assert_eq!(run(&["evaluate", "--mode", "triple"]), 1);
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["--out", out, "calibrate", "--trace", &p(dir.path(), "missing.log")]), 2);
    let bad = p(dir.path(), "bad.json");
    std::fs::write(&bad, r#"{"modle": {}}"#).unwrap();
    assert_eq!(run(&["--config", &bad, "--out", out, "gen-trace"]), 2);
    let garbage = p(dir.path(), "garbage.log");
    std::fs::write(&garbage, "not a trace line\n").unwrap();
    assert_eq!(run(&["--out", out, "calibrate", "--trace", &garbage]), 2);
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.to_str().unwrap();
    let cfg = small_config(d);
    assert_eq!(run(&["--config", &cfg, "--seed", "4", "--out", out, "gen-trace"]), 0);
    for f in ["trace.log", "schema.json", "activity.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let (trace, schema) = (p(d, "trace.log"), p(d, "schema.json"));
    assert_eq!(run(&["--out", out, "calibrate", "--trace", &trace, "--schema", &schema]), 0);
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats.as_object().unwrap().len(), 10);

    let stats_path = p(d, "stats.json");
    let train_args = ["--config", &cfg, "--out", out, "train", "--trace", &trace, "--schema", &schema, "--stats", &stats_path];
    assert_eq!(run(&train_args), 0);
    let ckpt = p(d, "model.ckpt");
    assert_eq!(run(&["--out", out, "calibrate-thresholds", "--trace", &trace, "--checkpoint", &ckpt]), 0);
    let baselines = p(d, "baselines.json");
    assert_eq!(run(&["--out", out, "run", "--trace", &trace, "--checkpoint", &ckpt, "--baselines", &baselines]), 0);
    // replaying the threshold stream is verdict-free
    let verdicts = std::fs::read_to_string(d.join("verdicts.csv")).unwrap();
    assert_eq!(verdicts.lines().count(), 1);

    let act = p(d, "activity.json");
    assert_eq!(run(&["--out", out, "coactivation-gap", "--trace", &trace, "--activity", &act, "--max-len", "6"]), 0);
    let gaps: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(d.join("coactivation_gap.json")).unwrap()).unwrap();
    assert_eq!(gaps.len(), 6);
}

#[test]
fn evaluate_writes_reports_and_inject_run_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.to_str().unwrap();
    let cfg = small_config(d);
    assert_eq!(run(&["--config", &cfg, "--seed", "2", "--out", out, "gen-trace"]), 0);
    let (trace, schema) = (p(d, "trace.log"), p(d, "schema.json"));
    let eval_args = ["--config", &cfg, "--seed", "2", "--out", out, "evaluate", "--mode", "multi", "--trace", &trace, "--schema", &schema];
    assert_eq!(run(&eval_args), 0);

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    for key in ["mode", "seed", "scaled", "protocol", "metrics", "segments", "timing"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert_eq!(report["scaled"], true);
    assert_eq!(report["segments"].as_array().unwrap().len(), 60);
    for key in ["detection", "localization", "mean_localization_time_min", "per_fault_type"] {
        assert!(report["metrics"].get(key).is_some(), "{key}");
    }
    let csv = std::fs::read_to_string(d.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
    assert!(csv.starts_with("segment_id,copy,mode,injected_sensors,flagged_sensors,tp,fp,fn,first_correct_delay_min\n"));

    // the segment copy with the most verdicts, replayed through inject + run
    let verdicts = std::fs::read_to_string(d.join("verdicts.csv")).unwrap();
    let mut per_segment = std::collections::BTreeMap::<usize, usize>::new();
    for line in verdicts.lines().skip(1) {
        let label = line.split(',').next().unwrap();
        if let Some(seg) = label.strip_suffix("/injected") {
            *per_segment.entry(seg.parse().unwrap()).or_default() += 1;
        }
    }
    let segment = per_segment.iter().max_by_key(|(_, n)| **n).map(|(s, _)| *s).unwrap_or(0);
    let label = format!("{segment}/injected");
    let expected: Vec<&str> = verdicts.lines().skip(1).filter(|l| l.starts_with(&format!("{label},"))).collect();

    assert!(!expected.is_empty());
    let sub = d.join("replay");
    let sub_out = sub.to_str().unwrap();
    let plan = p(d, "plan.json");
    let seg = segment.to_string();
    let inject_args = ["--config", &cfg, "--out", sub_out, "inject", "--trace", &trace, "--schema", &schema, "--plan", &plan, "--segment", &seg];
    assert_eq!(run(&inject_args), 0);
    let (injected, ckpt, baselines) = (p(&sub, "trace.log"), p(d, "model.ckpt"), p(d, "baselines.json"));
    let run_args = ["--out", sub_out, "run", "--trace", &injected, "--checkpoint", &ckpt, "--baselines", &baselines, "--label", &label];
    assert_eq!(run(&run_args), 0);
    let replayed = std::fs::read_to_string(sub.join("verdicts.csv")).unwrap();
    let replayed: Vec<&str> = replayed.lines().skip(1).collect();
    assert_eq!(replayed, expected);
}

#[test]
fn gradcheck_reports_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--out", dir.path().to_str().unwrap(), "gradcheck", "--models", "2"]), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);
}
