mod common;

use common::{gradient_suite, FD_TOLERANCE};

#[test]
fn autodiff_matches_central_differences() {
    let suite = gradient_suite();
    assert_eq!(suite.len(), 12);
    for (name, report, all) in suite {
        assert!(all, "{name}: not every parameter checked");
        assert!(report.max_rel < FD_TOLERANCE, "{name}: {report:?}");
    }
}
