mod common;

use common::grad::{check_op, check_toy_model, op_cases};

#[test]
fn every_op_matches_finite_differences() {
    for c in op_cases() {
        for seed in 0..5 {
            let r = check_op(&c, seed).unwrap();
            assert!(r.passed(), "{} seed {seed}: {:e}", c.name, r.max_rel_error);
        }
    }
}

#[test]
fn toy_model_matches_finite_differences() {
    for seed in 0..5 {
        let c = check_toy_model(seed).unwrap();
        let r = c.result;
        eprintln!(
            "toy model seed {seed}: {} entries, max rel {:e}, {} redraws",
            r.entries, r.max_rel_error, c.redraws
        );
        assert!(r.passed(), "seed {seed}: {:e}", r.max_rel_error);
    }
}
