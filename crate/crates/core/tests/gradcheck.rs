mod common;

use std::time::Instant;

use common::gradsuite::{run_all, INSTANCES, TOLERANCE};

#[test]
fn every_loss_and_layer_matches_central_differences() {
    let t = Instant::now();
    let results = run_all();
    let secs = t.elapsed().as_secs_f64();
    for r in &results {
        eprintln!(
            "{:<24} n={:<3} entries={:<7} max_rel_err={:.2e} {}",
            r.name, r.instances, r.checked, r.max_rel_err, r.worst
        );
    }
    for r in &results {
        assert_eq!(r.instances, INSTANCES, "{}: {}", r.name, r.worst);
        assert!(
            r.max_rel_err <= TOLERANCE,
            "{} max rel err {:.3e} at {}",
            r.name,
            r.max_rel_err,
            r.worst
        );
    }
    assert!(secs < 120.0, "gradient suite took {secs:.1}s");
}
