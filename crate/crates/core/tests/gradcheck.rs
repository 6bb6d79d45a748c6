use anrlab::gradsuite::{run_suite, suite_csv};

#[test]
fn every_check_passes() {
    let entries = run_suite(7).unwrap();
    for e in &entries {
        println!("{:<36} {:.3e}", e.op, e.report.max_rel_err());
    }
    let failing: Vec<String> = entries.iter().filter(|e| !e.passed()).map(|e| format!("{}\n{}", e.op, e.report)).collect();
    assert!(failing.is_empty(), "{}", failing.join("\n"));
}

#[test]
fn csv_lists_each_op_once() {
    let entries = run_suite(1).unwrap();
    let csv = suite_csv(&entries);
    assert_eq!(csv.lines().count(), entries.len() + 1);
    assert!(csv.lines().any(|l| l.starts_with("hypernet_anr_pipeline,")));
}
