mod support;

use support::gradcheck::{check_op, ste_max_error, TOL};

fn assert_op(op: &'static str) {
    let r = check_op(op, 100);
    assert!(r.max_rel < TOL, "{op}: max relative error {:.3e} over {} cases", r.max_rel, r.cases);
}

#[test]
fn conv2d_matches_finite_differences() {
    assert_op("conv2d");
}

#[test]
fn linear_matches_finite_differences() {
    assert_op("linear");
}

#[test]
fn add_matches_finite_differences() {
    assert_op("add");
}

#[test]
fn sub_matches_finite_differences() {
    assert_op("sub");
}

#[test]
fn mul_matches_finite_differences() {
    assert_op("mul");
}

#[test]
fn scale_matches_finite_differences() {
    assert_op("scale");
}

#[test]
fn reshape_matches_finite_differences() {
    assert_op("reshape");
}

#[test]
fn relu_matches_finite_differences() {
    assert_op("relu");
}

#[test]
fn sigmoid_matches_finite_differences() {
    assert_op("sigmoid");
}

#[test]
fn softmax_matches_finite_differences() {
    assert_op("softmax");
}

#[test]
fn max_pool2d_matches_finite_differences() {
    assert_op("max_pool2d");
}

#[test]
fn sum_matches_finite_differences() {
    assert_op("sum");
}

#[test]
fn mean_matches_finite_differences() {
    assert_op("mean");
}

#[test]
fn lp_sum_matches_finite_differences() {
    assert_op("lp_sum");
}

#[test]
fn soft_round_weight_matches_finite_differences() {
    assert_op("soft_round_weight");
}

#[test]
fn rounding_reg_matches_finite_differences() {
    assert_op("rounding_reg");
}

#[test]
fn select_matches_finite_differences() {
    assert_op("select");
}

#[test]
fn anchor_rows_matches_finite_differences() {
    assert_op("anchor_rows");
}

#[test]
fn cross_entropy_matches_finite_differences() {
    assert_op("cross_entropy");
}

#[test]
fn smooth_l1_matches_finite_differences() {
    assert_op("smooth_l1");
}

#[test]
fn composed_matches_finite_differences() {
    assert_op("composed");
}

#[test]
fn fake_quant_backward_is_straight_through() {
    let err = ste_max_error(100);
    assert!(err < 1e-10, "max deviation {err:e}");
}

