mod common;

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let report = common::tiny_total_loss_check(Some(3));
    println!("checked {} entries, max rel err {:.3e}", report.checked, report.max_rel_error);
    assert!(report.max_rel_error < 1e-3);
}
