use sfanet::gradcheck::{fault, standard_suite, SuiteKind};

#[test]
fn every_suite_entry_passes() {
    let suite = standard_suite();
    assert!(suite.iter().any(|e| e.kind == SuiteKind::Model));
    for entry in &suite {
        let report = entry.run().unwrap();
        assert!(report.passed(), "{}: {report:?}", entry.name);
        assert!(report.checked > 0);
    }
}

#[test]
fn perturbed_conv_backward_is_caught() {
    let suite = standard_suite();
    let _armed = fault::arm_conv_backward();
    for name in ["conv2d", "cbr", "seg_head"] {
        let entry = suite.iter().find(|e| e.name == name).unwrap();
        assert!(!entry.run().unwrap().passed(), "{name}");
    }
}
