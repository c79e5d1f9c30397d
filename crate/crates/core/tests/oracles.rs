mod support {
    pub mod identities;
    pub mod oracles;
}

use std::time::Instant;

use support::{identities, oracles};

#[test]
fn brute_force_oracles_agree() {
    let start = Instant::now();
    for r in oracles::run_all(500, 90) {
        println!("{:<24} n={} mismatches={}", r.name, r.instances, r.mismatches);
        assert!(r.passed(), "{r:?}");
    }
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn loss_identities_hold() {
    for r in identities::run_all(300, 4) {
        println!("{:<48} n={} worst={:.3e}", r.name, r.instances, r.worst);
        assert!(r.passed(), "{r:?}");
    }
}
