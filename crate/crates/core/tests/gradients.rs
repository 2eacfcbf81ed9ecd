use downpour::gradcheck::{check_end_to_end, check_renderer, check_victim, GradcheckSpec};
use downpour::oracles::OracleTolerance;
use downpour::particles::BlendMode;

#[test]
fn renderer_adjoint_additive() {
    let r = check_renderer(&GradcheckSpec::default(), BlendMode::Additive, &OracleTolerance::default()).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn renderer_adjoint_meshkin() {
    let r = check_renderer(&GradcheckSpec::default(), BlendMode::Meshkin, &OracleTolerance::default()).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn victim_adjoint() {
    let r = check_victim(&GradcheckSpec::default(), 10, &OracleTolerance::default()).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn end_to_end_gradient() {
    let r = check_end_to_end(&GradcheckSpec::default(), 5, &OracleTolerance::default()).unwrap();
    assert!(r.passed(), "{r:?}");
}
