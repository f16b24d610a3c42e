use proptest::prelude::*;

use quadgrasp::arm::GraspStatus;
use quadgrasp::metrics::{MetricsRecord, SelectionMethod};
use quadgrasp_bridge::{read_metrics, write_metrics};

fn record(trial: u32, status: GraspStatus) -> MetricsRecord {
    MetricsRecord {
        trial,
        object_class: ["charger", "golf_ball", "battery"][(trial as usize - 1) % 3].into(),
        method: if trial % 4 == 0 { SelectionMethod::Drag } else { SelectionMethod::Click },
        duration: 3.25 + trial as f64 * 0.1,
        status,
        final_position: [0.251, 0.1],
    }
}

#[test]
fn nine_of_twelve_is_three_quarters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ndjson");
    let records: Vec<_> = (1..=12)
        .map(|i| record(i, if i <= 9 { GraspStatus::Success } else { GraspStatus::FailSlip }))
        .collect();
    write_metrics(&records, &path).unwrap();
    let (back, summary) = read_metrics(&path).unwrap();
    assert_eq!(back, records);
    assert_eq!((summary.trials, summary.successes), (12, 9));
    assert_eq!(summary.success_rate, Some(0.75));
}

#[test]
fn empty_file_has_null_rate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ndjson");
    write_metrics(&[], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "{\"summary\":{\"trials\":0,\"successes\":0,\"success_rate\":null}}\n");
    let (back, summary) = read_metrics(&path).unwrap();
    assert!(back.is_empty());
    assert_eq!(summary.success_rate, None);
}

#[test]
fn unwritable_path_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(write_metrics(&[], dir.path().join("missing/m.ndjson")).is_err());
    assert!(read_metrics(dir.path().join("none.ndjson")).is_err());
}

fn status() -> impl Strategy<Value = GraspStatus> {
    prop_oneof![
        Just(GraspStatus::Success),
        Just(GraspStatus::FailSlip),
        Just(GraspStatus::FailDrop),
        Just(GraspStatus::FailPlan),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn write_then_read_is_identity(
        rows in prop::collection::vec((status(), 0.0f64..1e3, -1.0f64..1.0, -1.0f64..1.0), 0..30)
    ) {
        let records: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, (s, d, x, y))| MetricsRecord { duration: *d, final_position: [*x, *y], ..record(i as u32 + 1, *s) })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ndjson");
        write_metrics(&records, &path).unwrap();
        let (back, _) = read_metrics(&path).unwrap();
        prop_assert_eq!(back, records);
    }
}
