mod support;

use support::grad_cases;

#[test]
fn every_op_matches_finite_differences() {
    let worst = grad_cases::run(0..20);
    let bad: Vec<_> = worst.iter().filter(|(_, g)| !(g.max_rel_err < grad_cases::TOL)).collect();
    assert!(bad.is_empty(), "gradient mismatches: {bad:?}");
    assert!(worst.len() > 30);
}
