use sgdse::acceptance::{self, CriterionReport};

fn check(r: sgdse::Result<CriterionReport>) {
    let r = r.expect("criterion could not be evaluated");
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn criterion_1_partial_observer_settling() {
    check(acceptance::partial_observer_settling());
}

#[test]
fn criterion_2_regression_residual() {
    check(acceptance::regression_residual());
}

#[test]
fn criterion_3_full_observer_convergence() {
    check(acceptance::full_observer_convergence());
}

#[test]
fn criterion_4_projection_bound() {
    check(acceptance::projection_bound());
}

#[test]
fn criterion_5_extension_identities() {
    check(acceptance::extension_identities());
}

#[test]
fn criterion_6_electrical_relations() {
    check(acceptance::electrical_relations());
}

#[test]
fn criterion_7_integrator_order() {
    check(acceptance::integrator_order());
}

#[test]
fn criterion_8_determinism() {
    check(acceptance::determinism());
}
