mod common;

use common::check_solve_step;
use fcpo::cpo::DualCase;

#[test]
fn solve_step_matches_dense_oracle() {
    let cases: Vec<DualCase> = (0..60).map(|seed| check_solve_step(seed, (seed % 3) as usize)).collect();
    for want in [DualCase::Slack, DualCase::Active, DualCase::Recovery] {
        assert!(cases.contains(&want), "no {want:?} instance among {cases:?}");
    }
}
