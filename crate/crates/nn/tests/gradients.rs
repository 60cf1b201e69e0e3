//! Finite-difference checks for every differentiable operation.

use retarget_nn::gradcheck::op_suite;

#[test]
fn every_op_matches_finite_differences() {
    let results = op_suite().unwrap();
    assert!(results.len() > 40);
    for (name, err) in &results {
        println!("{name:<32} max rel err {err:.3e}");
    }
    for (name, err) in results {
        assert!(err < 1e-4, "{name}: {err}");
    }
}
