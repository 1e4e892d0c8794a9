mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    let rep = common::gradient_suite(20, 11);
    assert_eq!(rep.scenes, 20);
    assert!(rep.checks > 20 * 20, "{} derivatives checked", rep.checks);
    assert!(rep.failures.is_empty(), "{:#?}", rep.failures);
}
