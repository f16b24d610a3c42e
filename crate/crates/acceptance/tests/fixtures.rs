use quadgrasp::grasp::{filter_stage1_topk, filter_stage2_center, read_replay, write_replay, ReplayProvider, STAGE1_K};
use quadgrasp::world::Scenario;
use quadgrasp_acceptance::repo_root;
use serde_json::Value;

fn scenario_validator() -> jsonschema::Validator {
    let text = std::fs::read_to_string(repo_root().join("scenarios/scenario.schema.json")).unwrap();
    let schema: Value = serde_json::from_str(&text).unwrap();
    jsonschema::validator_for(&schema).expect("scenario schema compiles")
}

fn scenario_files() -> Vec<std::path::PathBuf> {
    let mut files: Vec<_> = std::fs::read_dir(repo_root().join("scenarios"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json") && !p.to_string_lossy().ends_with(".schema.json"))
        .collect();
    files.sort();
    files
}

#[test]
fn shipped_scenarios_match_schema_and_load() {
    let v = scenario_validator();
    let files = scenario_files();
    assert!(files.len() >= 2);
    for path in files {
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let errors: Vec<String> = v.iter_errors(&doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
        assert!(errors.is_empty(), "{}: {errors:?}", path.display());
        Scenario::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn schema_rejects_what_the_loader_rejects() {
    let v = scenario_validator();
    let base: Value =
        serde_json::from_str(&std::fs::read_to_string(repo_root().join("scenarios/lab_floor9.json")).unwrap()).unwrap();
    let mutations: [(&str, fn(&mut Value)); 5] = [
        ("version 2", |d| d["version"] = 2.into()),
        ("unknown top-level key", |d| d["extra"] = true.into()),
        ("bad grid cell", |d| d["grid"]["rows"][0] = "..x..".into()),
        ("unknown shape kind", |d| d["objects"][0]["shape"] = serde_json::json!({"kind": "cone", "radius": 0.1})),
        ("two rotations", |d| {
            d["objects"][0]["pose"]["yaw"] = 0.3.into();
            d["objects"][0]["pose"]["quaternion"] = serde_json::json!([1.0, 0.0, 0.0, 0.0]);
        }),
    ];
    for (name, mutate) in mutations {
        let mut doc = base.clone();
        mutate(&mut doc);
        assert!(!v.is_valid(&doc), "schema accepted: {name}");
        assert!(Scenario::from_json(&doc.to_string()).is_err(), "loader accepted: {name}");
    }
}

#[test]
fn replay_fixture_round_trips_bit_exact() {
    let path = repo_root().join("scenarios/replay/charger_gripper.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let file = read_replay(&text).unwrap();
    assert_eq!(file.records.len(), 5);
    assert_eq!(write_replay(&file), text);
    let again = read_replay(&write_replay(&file)).unwrap();
    assert_eq!(again, file);
}

#[test]
fn replay_fixture_feeds_the_filter() {
    let provider = ReplayProvider::from_path(repo_root().join("scenarios/replay/charger_gripper.jsonl")).unwrap();
    let set = provider.file.to_set();
    let top = filter_stage1_topk(&set, STAGE1_K);
    assert_eq!(top.candidates.len(), 5);
    assert!(top.candidates.windows(2).all(|w| w[0].score >= w[1].score));
    let best = filter_stage2_center(&top).unwrap();
    let c = set.object_centroid_camera;
    let d = |t: nalgebra::Vector3<f64>| (t - c).norm();
    assert!(set.candidates.iter().all(|g| d(best.pose.translation) <= d(g.pose.translation) + 1e-12));
}
