use tea_core::selfcheck::run;

#[test]
fn fresh_build_passes_every_property() {
    let report = run(0, false);
    for p in &report.properties {
        println!("{} {}::{} {}", if p.passed { "ok  " } else { "FAIL" }, p.module, p.name, p.detail);
    }
    assert!(report.all_passed(), "{} properties failed", report.failed);
    assert!(report.claim_checks > 0);
}

#[test]
fn sign_fault_is_caught_by_gradient_checks() {
    let report = run(0, true);
    let failed: Vec<&str> = report.properties.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect();
    assert!(failed.contains(&"me_gradients"), "{failed:?}");
    assert!(failed.contains(&"tea_block_gradients"), "{failed:?}");
    assert!(failed.iter().all(|n| n.ends_with("gradients")), "{failed:?}");
    // the fault must not leak past the run
    assert!(run(1, false).properties.iter().filter(|p| p.name.ends_with("gradients")).all(|p| p.passed));
}
