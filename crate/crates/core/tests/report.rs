use std::path::PathBuf;

use msx::harness::report::Report;

fn fixture() -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/report.kv");
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn fixture_parses_and_round_trips() {
    let text = fixture();
    let report = Report::from_kv(&text).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert_eq!(report.params, 5057);
    assert_eq!(report.runs[0].counts.tp, 40);
    assert_eq!(report.runs[1].counts.r#fn, 2);
    assert!((report.metric("accuracy").mean - 0.915).abs() < 1e-12);
    assert!((report.metric("mcc").std - 0.181898).abs() < 1e-6);
    assert_eq!(report.to_kv(), text);
}

#[test]
fn fixture_renders_table() {
    let text = Report::from_kv(&fixture()).unwrap().render_text();
    assert!(text.starts_with("fixture (cls task, 2 runs, 5057 learnable parameters)"));
    for cell in [
        "85.0%",
        "98.0%",
        "70.4%",
        "96.1%",
        "91.5%±9.2",
        "94.4%±7.9",
        "83.2%±18.2",
        "7/30",
    ] {
        assert!(text.contains(cell), "missing {cell} in\n{text}");
    }
    assert!(text.contains("seed 11"));
    assert!(!text.contains("training time"));
}

#[test]
fn tampered_metric_is_rejected() {
    let text = fixture().replace("run.1.f1=0.842105", "run.1.f1=0.942105");
    let err = Report::from_kv(&text).unwrap_err().to_string();
    assert!(err.contains("f1"), "{err}");
}

#[test]
fn tampered_count_is_rejected() {
    let text = fixture().replace("run.2.fp=0", "run.2.fp=3");
    assert!(Report::from_kv(&text).is_err());
}
