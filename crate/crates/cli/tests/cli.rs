use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn quadgrasp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadgrasp"))
        .current_dir(root())
        .args(args)
        .output()
        .unwrap()
}

fn run_script(script: &str, out: &Path) -> Output {
    quadgrasp(&[
        "--scenario",
        "scenarios/lab_floor9.json",
        "--mode",
        "run",
        "--seed",
        "7",
        "--script",
        &format!("scenarios/scripts/{script}.jsonl"),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn result(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("result.json")).unwrap()).unwrap()
}

fn eval(scenario: &str, extra: &[&str], out: &Path) -> (Output, String) {
    let mut args = vec!["--scenario", scenario, "--mode", "eval", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = quadgrasp(&args);
    let text = std::fs::read_to_string(out.join("metrics.ndjson")).unwrap_or_default();
    (o, text)
}

fn summary(metrics: &str) -> Value {
    let last = metrics.lines().last().unwrap();
    serde_json::from_str::<Value>(last).unwrap()["summary"].clone()
}

#[test]
fn happy_path_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_script("pick_charger", dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = result(dir.path());
    assert_eq!(r["state"], "Done");
    assert_eq!(r["grasps"][0]["status"], "success");
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let states: Vec<String> = trace
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["to"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(
        states,
        [
            "NavigateToRoom",
            "Scanning",
            "Approaching",
            "Sitting",
            "ArmSurvey",
            "AwaitGraspSelection",
            "Planning",
            "Grasping",
            "Returning",
            "Placing",
            "Done"
        ]
    );
    let metrics = std::fs::read_to_string(dir.path().join("metrics.ndjson")).unwrap();
    assert_eq!(summary(&metrics)["successes"], 1);
}

#[test]
fn replays_are_time_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_script("pick_charger_drag", a.path());
    run_script("pick_charger_drag", b.path());
    let read = |d: &Path| std::fs::read(d.join("trace.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn missing_confirmation_times_out_with_reason() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_script("drag_without_confirm", dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("timed out") && err.contains("AwaitDragConfirm"), "{err}");
    assert_eq!(result(dir.path())["state"], "AwaitDragConfirm");
}

#[test]
fn stop_mid_approach_records_idle() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_script("stop_mid_approach", dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(result(dir.path())["state"], "Idle");
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let last: Value = serde_json::from_str(trace.lines().last().unwrap()).unwrap();
    assert_eq!((last["from"].as_str(), last["to"].as_str()), (Some("Approaching"), Some("Idle")));
}

#[test]
fn config_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["--scenario", "scenarios/lab_floor9.json", "--mode", "run", "--out", out],
        vec!["--scenario", "scenarios/missing.json", "--mode", "eval", "--out", out],
        vec!["--scenario", "scenarios/lab_floor9.json", "--mode", "eval", "--trials", "0", "--out", out],
        vec!["--scenario", "scenarios/lab_floor9.json", "--mode", "fly"],
        vec!["--scenario", "scenarios/lab_floor9.json", "--mode", "eval", "--noise-sigma", "-1", "--out", out],
    ] {
        assert_eq!(quadgrasp(&args).status.code(), Some(3), "{args:?}");
    }
}

#[test]
fn bad_script_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.jsonl");
    std::fs::write(&script, "{\"t\": 0, \"type\": \"go_to_room\", \"payload\": {\"room\": \"Nowhere\"}}\n").unwrap();
    let o = quadgrasp(&[
        "--scenario",
        "scenarios/lab_floor9.json",
        "--mode",
        "run",
        "--script",
        script.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown room"));
}

#[test]
fn eval_twelve_trials_lands_in_band_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--trials", "12", "--seed", "42"];
    let (o, ma) = eval("scenarios/lab_floor9.json", &args, a.path());
    assert_eq!(o.status.code(), Some(0));
    let (_, mb) = eval("scenarios/lab_floor9.json", &args, b.path());
    assert_eq!(ma, mb, "metrics files differ");
    let s = summary(&ma);
    assert_eq!(s["trials"], 12);
    let rate = s["success_rate"].as_f64().unwrap();
    assert!((0.58..=0.92).contains(&rate), "rate {rate}");
}

#[test]
fn noiseless_charger_always_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let (o, m) = eval(
        "scenarios/lab_floor9_charger.json",
        &["--trials", "12", "--seed", "42", "--noise-sigma", "0"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(summary(&m)["success_rate"], 1.0);
}

#[test]
fn one_trial_gives_one_record() {
    let dir = tempfile::tempdir().unwrap();
    let (o, m) = eval("scenarios/lab_floor9.json", &["--trials", "1"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(m.lines().count(), 2);
    assert_eq!(summary(&m)["trials"], 1);
}
