use std::time::Instant;

use comoto_core::gradcheck::{loss_checks, op_checks, TOLERANCE};

#[test]
fn loss_gradients_match_central_differences() {
    let start = Instant::now();
    let checks = loss_checks(100, 2024).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    for c in &checks {
        println!("{:<24} n={} max_rel={:.3e}", c.name, c.instances, c.max_rel_error);
        assert!(c.instances >= 100);
        assert!(c.max_rel_error <= TOLERANCE, "{c:?}");
    }
    assert!(elapsed < 60.0, "gradient suite took {elapsed:.1}s");
}

#[test]
fn op_gradients_match_central_differences() {
    for c in op_checks(20, 7).unwrap() {
        assert!(c.passed(), "{c:?}");
    }
}
