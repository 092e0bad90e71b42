mod common;

#[test]
fn every_op_matches_central_differences() {
    let errors = common::op_gradient_errors(11);
    for (name, err) in &errors {
        assert!(*err < 1e-4, "{name}: {err}");
    }
    assert!(errors.len() >= 20);
}

#[test]
fn full_loss_matches_central_differences() {
    let err = common::end_to_end_gradient_error(3).unwrap();
    assert!(err < 1e-4, "{err}");
}
