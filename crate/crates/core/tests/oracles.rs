mod common;

use common::*;

const TOL: f64 = 1e-10;

fn check(name: &str, r: OracleResult) {
    assert!(r.instances >= 10, "{name}: only {} instances", r.instances);
    assert!(r.worst <= TOL, "{name}: worst deviation {:e}", r.worst);
}

#[test]
fn conv2d_matches_direct_loops() {
    check("conv2d", conv_oracle(1, 24));
}

#[test]
fn depthwise_matches_per_channel_stencil() {
    check("depthwise", depthwise_oracle(2, 16));
}

#[test]
fn matmul_matches_triple_loop() {
    check("matmul", matmul_oracle(3, 20));
}

#[test]
fn bilinear_matches_pointwise_sampling() {
    check("bilinear", bilinear_oracle(4, 20));
}

#[test]
fn gsa_context_matches_softmax_pooling() {
    check("gsa context", gsa_context_oracle(5, 12));
}

#[test]
fn unreduced_attention_is_dense_attention() {
    check("attention", dense_attention_oracle(6, 12));
}

#[test]
fn naive_conv_sanity() {
    // 1x1 input, 1x1 kernel: a single product plus bias
    let x = duat::Tensor::full([1, 1, 1, 1], 3.0);
    let w = duat::Tensor::full([1, 1, 1, 1], -2.0);
    let b = duat::Tensor::full([1, 1, 1, 1], 0.5);
    assert_eq!(naive_conv(&x, &w, Some(&b), 1, 0, 1), vec![-5.5]);
}
