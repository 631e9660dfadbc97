//! Deterministic oracle suites at their stated tolerances.

use twinbeam::channels::FockDensityMatrix;
use twinbeam::validate::{self, COMPLETENESS_ETAS};

#[test]
fn full_validation_report_passes() {
    let report = validate::run_all(&COMPLETENESS_ETAS, None).unwrap();
    for c in &report.checks {
        println!("{:<55} err {:.3e} tol {:.0e} {}", c.name, c.max_error, c.tolerance, if c.passed { "ok" } else { "FAIL" });
    }
    assert!(report.all_passed());
}

#[test]
fn estimator_average_reproduces_twin_beam_matrix() {
    // deterministic kernel average over the exact joint density, n, m <= 6
    let err = validate::twin_beam_kernel_average(1.0, 6).unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn thermal_state_recovered_at_reduced_efficiency() {
    let rho = FockDensityMatrix::thermal(3.0, 100).unwrap();
    let err = validate::completeness_error(&rho, 0.85, 6).unwrap();
    assert!(err < 1e-4, "{err}");
}
