mod common;

use common::{check_op, composite_case, op_suite, randn, SMOOTH_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let cases = op_suite();
    for c in &cases {
        assert!(c.checked > 0, "{} probed nothing", c.name);
        assert!(
            c.passed(),
            "{}: max relative error {:.3e} >= {:.0e}",
            c.name,
            c.max_rel,
            c.tol
        );
    }
}

#[test]
fn two_stream_composite_matches_finite_differences() {
    let c = composite_case(11);
    assert!(c.passed(), "max relative error {:.3e}", c.max_rel);
}

#[test]
fn deeper_chain_of_smooth_ops() {
    let inputs = [
        randn(&[2, 2, 6, 6], 30),
        randn(&[3, 2, 3, 3], 31),
        randn(&[4, 3], 32),
    ];
    let c = check_op("conv-pool-linear-ce", &inputs, SMOOTH_TOL, 30, |tp, v| {
        let y = tp.conv2d(v[0], v[1], 2, 1)?;
        let p = tp.global_avg_pool(y)?;
        let s = tp.linear(p, v[2], None)?;
        tp.softmax_cross_entropy(s, &[3, 1])
    });
    assert!(c.passed(), "max relative error {:.3e}", c.max_rel);
}
