use nestor_core::gradsuite::{run_suite, CHECKS, TOLERANCE};
use nestor_core::Error;

#[test]
fn every_check_passes() {
    let report = run_suite(None).unwrap();
    assert_eq!(report.checks.len(), CHECKS.len());
    for c in &report.checks {
        assert!(c.error <= TOLERANCE, "{}: {:.3e} at {}", c.name, c.error, c.worst);
    }
    assert!(report.passed());
    assert!(report.elapsed.as_secs() < 60, "{:?}", report.elapsed);
}

#[test]
fn corrupted_op_is_reported() {
    let report = run_suite(Some("log_prior")).unwrap();
    assert!(!report.passed());
    let failed: Vec<&str> = report.failures().iter().map(|c| c.name).collect();
    for name in ["tape_ops", "sma_heads", "head", "pipeline"] {
        assert!(failed.contains(&name), "{name} not among {failed:?}");
    }
    // checks that never build the op are unaffected
    assert!(!failed.contains(&"linear_affine"));
    let text = report.to_string();
    assert!(text.contains("log_prior") && text.contains("FAIL"), "{text}");
}

#[test]
fn unknown_op_is_a_config_error() {
    assert!(matches!(run_suite(Some("no_such_op")), Err(Error::Config { .. })));
}
