//! Finite-difference gradient checks and direct-loop oracles for every
//! differentiable primitive. The oracles here are independent of the tape:
//! central differences for gradients, nested loops for convolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqtts_core::tape::Tape;
use vqtts_core::tensor::Tensor;

/// Central finite differences of `loss` around `x`, eps = 1e-5.
fn finite_diff(x: &Tensor, loss: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    let eps = 1e-5;
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data[i] += eps;
        let lp = loss(&xp);
        xp.data[i] -= 2.0 * eps;
        let lm = loss(&xp);
        grad[i] = (lp - lm) / (2.0 * eps);
    }
    grad
}

fn assert_close(analytic: &[f64], numeric: &[f64], rel_tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs()).max(1.0);
        assert!(
            (a - n).abs() <= rel_tol * scale,
            "{what}[{i}]: analytic {a} vs finite-diff {n}"
        );
    }
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Check the tape gradient of a scalar-valued graph against central
/// differences, where `graph` rebuilds the same computation from scratch.
fn check_grad(
    x: &Tensor,
    graph: &dyn Fn(&mut Tape, vqtts_core::Var) -> vqtts_core::Var,
    rel_tol: f64,
    what: &str,
) {
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let loss = graph(&mut tape, xv);
    let grads = tape.backward(loss);
    let analytic = grads.wrt(xv, x.numel());
    let numeric = finite_diff(x, &|xt| {
        let mut t = Tape::new();
        let v = t.constant_from(xt);
        let l = graph(&mut t, v);
        t.scalar_value(l)
    });
    assert_close(&analytic, &numeric, rel_tol, what);
}

#[test]
fn matmul_identity_and_selector() {
    let mut tape = Tape::new();
    let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let m = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let prod = tape.matmul(eye, m);
    assert_eq!(tape.value(prod), &[1.0, 2.0, 3.0, 4.0]);

    let row = tape.constant(vec![1, 2], vec![1.0, 0.0]);
    let col = tape.constant(vec![2, 1], vec![5.0, 7.0]);
    let sel = tape.matmul(row, col);
    assert_eq!(tape.value(sel), &[5.0]);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..10 {
        let a = random_tensor(vec![3, 4], &mut rng);
        let b = random_tensor(vec![4, 2], &mut rng);
        let b2 = b.clone();
        check_grad(
            &a,
            &move |t, av| {
                let bv = t.constant_from(&b2);
                let p = t.matmul(av, bv);
                t.sum(p)
            },
            1e-6,
            &format!("matmul dA trial {trial}"),
        );
        let a2 = a.clone();
        check_grad(
            &b,
            &move |t, bv| {
                let av = t.constant_from(&a2);
                let p = t.matmul(av, bv);
                t.sum(p)
            },
            1e-6,
            &format!("matmul dB trial {trial}"),
        );
    }
}

#[test]
fn conv1d_trivial_cases() {
    let mut tape = Tape::new();
    // Identity kernel with stride 2 picks every other sample.
    let x = tape.constant(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]);
    let w = tape.constant(vec![1, 1, 1], vec![1.0]);
    let y = tape.conv1d(x, w, 2, 0);
    assert_eq!(tape.value(y), &[1.0, 3.0]);

    // Box sum.
    let x = tape.constant(vec![1, 3], vec![1.0, 1.0, 1.0]);
    let w = tape.constant(vec![1, 1, 3], vec![1.0, 1.0, 1.0]);
    let y = tape.conv1d(x, w, 1, 0);
    assert_eq!(tape.value(y), &[3.0]);
}

#[test]
fn conv1d_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c_in, t, c_out, k, stride, pad) = (3, 17, 2, 5, 2, 2);
    let x = random_tensor(vec![c_in, t], &mut rng);
    let w = random_tensor(vec![c_out, c_in, k], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant_from(&x);
    let wv = tape.constant_from(&w);
    let y = tape.conv1d(xv, wv, stride, pad);

    let t_out = (t + 2 * pad - k) / stride + 1;
    assert_eq!(tape.shape(y), &[c_out, t_out]);
    for co in 0..c_out {
        for to in 0..t_out {
            let mut acc = 0.0;
            for ci in 0..c_in {
                for kk in 0..k {
                    let ti = to * stride + kk;
                    if ti >= pad && ti - pad < t {
                        acc += w.data[(co * c_in + ci) * k + kk] * x.data[ci * t + ti - pad];
                    }
                }
            }
            let got = tape.value(y)[co * t_out + to];
            assert!((got - acc).abs() < 1e-9, "({co},{to}): {got} vs {acc}");
        }
    }
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(vec![2, 11], &mut rng);
    let w = random_tensor(vec![3, 2, 4], &mut rng);
    let w2 = w.clone();
    check_grad(
        &x,
        &move |t, xv| {
            let wv = t.constant_from(&w2);
            let y = t.conv1d(xv, wv, 2, 1);
            t.sum(y)
        },
        1e-5,
        "conv1d dx",
    );
    let x2 = x.clone();
    check_grad(
        &w,
        &move |t, wv| {
            let xv = t.constant_from(&x2);
            let y = t.conv1d(xv, wv, 2, 1);
            t.sum(y)
        },
        1e-5,
        "conv1d dw",
    );
}

#[test]
fn conv_transpose_impulse_upsample() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1], vec![1.0]);
    let w = tape.constant(vec![1, 1, 4], vec![1.0, 0.0, 0.0, 0.0]);
    let y = tape.conv_transpose1d(x, w, 4, 0);
    assert_eq!(tape.value(y), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // (stride, pad, kernel) chosen so conv_transpose restores the length.
    for &(stride, pad, k) in &[(1usize, 0usize, 4usize), (2, 1, 4), (3, 1, 6), (4, 2, 8)] {
        let (c_in, t, c_out) = (2, 16, 3);
        let x = random_tensor(vec![c_in, t], &mut rng);
        let w = random_tensor(vec![c_out, c_in, k], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant_from(&x);
        let wv = tape.constant_from(&w);
        let cx = tape.conv1d(xv, wv, stride, pad);
        let t_out = tape.shape(cx)[1];
        let y = random_tensor(vec![c_out, t_out], &mut rng);
        let yv = tape.constant_from(&y);
        let cty = tape.conv_transpose1d(yv, wv, stride, pad);
        assert_eq!(tape.shape(cty), &[c_in, t], "stride {stride} pad {pad}");

        // <conv(x, w), y> == <x, convT(y, w)>
        let lhs: f64 = tape.value(cx).iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(tape.value(cty)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "stride {stride} pad {pad}: {lhs} vs {rhs}");
    }
}

#[test]
fn upsampling_chain_expands_by_scale_product() {
    // Mirrors the decoder length contract: a chain of transposed convs with
    // kernel 2s, stride s, pad s/2 multiplies the length by prod(scales).
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scales = [8usize, 4, 2, 2];
    let mut tape = Tape::new();
    let mut cur = {
        let x = random_tensor(vec![1, 4], &mut rng);
        tape.constant_from(&x)
    };
    for &s in &scales {
        let w = random_tensor(vec![1, 1, 2 * s], &mut rng);
        let wv = tape.constant_from(&w);
        cur = tape.conv_transpose1d(cur, wv, s, s / 2);
    }
    let product: usize = scales.iter().product();
    assert_eq!(tape.shape(cur), &[1, 4 * product]);
    assert_eq!(product, 128);
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(vec![2, 6], &mut rng);
    let w = random_tensor(vec![2, 3, 4], &mut rng);
    let w2 = w.clone();
    check_grad(
        &x,
        &move |t, xv| {
            let wv = t.constant_from(&w2);
            let y = t.conv_transpose1d(xv, wv, 2, 1);
            let z = t.mul(y, y);
            t.sum(z)
        },
        1e-5,
        "conv_transpose dx",
    );
    let x2 = x.clone();
    check_grad(
        &w,
        &move |t, wv| {
            let xv = t.constant_from(&x2);
            let y = t.conv_transpose1d(xv, wv, 2, 1);
            let z = t.mul(y, y);
            t.sum(z)
        },
        1e-5,
        "conv_transpose dw",
    );
}

#[test]
fn softmax_uniform_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![3], vec![0.0, 0.0, 0.0]);
    let y = tape.softmax(x);
    for v in tape.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_of_constant_vector_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![5], vec![2.5; 5]);
    let y = tape.layer_norm(x, 1e-5);
    for v in tape.value(y) {
        assert_eq!(*v, 0.0);
    }
}

#[test]
fn elementwise_primitives_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    type Graph = Box<dyn Fn(&mut Tape, vqtts_core::Var) -> vqtts_core::Var>;
    let cases: Vec<(&str, Graph)> = vec![
        ("tanh", Box::new(|t: &mut Tape, v| {
            let y = t.tanh(v);
            t.sum(y)
        })),
        ("sigmoid", Box::new(|t: &mut Tape, v| {
            let y = t.sigmoid(v);
            t.sum(y)
        })),
        ("softmax", Box::new(|t: &mut Tape, v| {
            let y = t.softmax(v);
            let z = t.mul(y, y);
            t.sum(z)
        })),
        ("log_softmax", Box::new(|t: &mut Tape, v| {
            let y = t.log_softmax(v);
            let z = t.mul(y, y);
            t.mean(z)
        })),
        ("layer_norm", Box::new(|t: &mut Tape, v| {
            let y = t.layer_norm(v, 1e-5);
            let z = t.mul(y, y);
            t.sum(z)
        })),
        ("mul_mean", Box::new(|t: &mut Tape, v| {
            let y = t.mul(v, v);
            t.mean(y)
        })),
        ("add_sub", Box::new(|t: &mut Tape, v| {
            let y = t.add(v, v);
            let z = t.sub(y, v);
            let q = t.mul(z, z);
            t.sum(q)
        })),
    ];
    for (name, graph) in &cases {
        for trial in 0..10 {
            let x = random_tensor(vec![2, 5], &mut rng);
            check_grad(&x, graph.as_ref(), 1e-5, &format!("{name} trial {trial}"));
        }
    }
}

#[test]
fn embedding_gradient_scatters_to_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let table = random_tensor(vec![6, 3], &mut rng);
    let ids = vec![1usize, 4, 1];
    let ids2 = ids.clone();
    check_grad(
        &table,
        &move |t, tv| {
            let e = t.embedding(tv, &ids2);
            let sq = t.mul(e, e);
            t.sum(sq)
        },
        1e-5,
        "embedding",
    );
    // Row 1 is used twice; rows 0, 2, 3, 5 receive zero gradient.
    let mut tape = Tape::new();
    let tv = tape.input(&table);
    let e = tape.embedding(tv, &ids);
    let loss = tape.sum(e);
    let grads = tape.backward(loss);
    let g = grads.wrt(tv, table.numel());
    for row in [0usize, 2, 3, 5] {
        assert!(g[row * 3..(row + 1) * 3].iter().all(|&v| v == 0.0));
    }
    assert!(g[3..6].iter().all(|&v| (v - 2.0).abs() < 1e-12));
}

#[test]
fn backward_of_sum_is_ones_and_square_is_2x() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(vec![7], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let loss = tape.sum(xv);
    let grads = tape.backward(loss);
    assert!(grads.wrt(xv, 7).iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let sq = tape.mul(xv, xv);
    let loss = tape.sum(sq);
    let grads = tape.backward(loss);
    for (g, v) in grads.wrt(xv, 7).iter().zip(&x.data) {
        assert!((g - 2.0 * v).abs() < 1e-12);
    }
}

#[test]
fn stop_gradient_blocks_and_straight_through_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_tensor(vec![5], &mut rng);

    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let sg = tape.stop_gradient(xv);
    assert_eq!(tape.value(sg), &x.data[..]);
    let loss = tape.sum(sg);
    let grads = tape.backward(loss);
    assert!(grads.wrt(xv, 5).iter().all(|&g| g == 0.0));

    // grad of sum(x * sg(x)) is x, not 2x.
    let mut tape = Tape::new();
    let xv = tape.input(&x);
    let sg = tape.stop_gradient(xv);
    let prod = tape.mul(xv, sg);
    let loss = tape.sum(prod);
    let grads = tape.backward(loss);
    for (g, v) in grads.wrt(xv, 5).iter().zip(&x.data) {
        assert!((g - v).abs() < 1e-12);
    }
}

#[test]
fn composite_network_gradient_matches_finite_differences() {
    // conv -> leaky_relu -> conv -> tanh -> mean, checked w.r.t. the input.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let x = random_tensor(vec![2, 12], &mut rng);
        let w1 = random_tensor(vec![3, 2, 3], &mut rng);
        let w2 = random_tensor(vec![1, 3, 3], &mut rng);
        let (w1c, w2c) = (w1.clone(), w2.clone());
        check_grad(
            &x,
            &move |t, xv| {
                let w1v = t.constant_from(&w1c);
                let w2v = t.constant_from(&w2c);
                let h = t.conv1d(xv, w1v, 1, 1);
                let h = t.leaky_relu(h, 0.2);
                let h = t.conv1d(h, w2v, 2, 1);
                let h = t.tanh(h);
                t.mean(h)
            },
            1e-4,
            &format!("composite trial {trial}"),
        );
    }
}

#[test]
fn backward_replay_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(vec![4, 8], &mut rng);
    let build = |xt: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.input(xt);
        let sm = tape.softmax(xv);
        let ln = tape.layer_norm(sm, 1e-5);
        let sq = tape.mul(ln, ln);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss);
        grads.wrt(xv, xt.numel())
    };
    let g1 = build(&x);
    let g2 = build(&x);
    assert_eq!(g1, g2, "gradients must be bitwise identical across replays");
}

#[test]
#[should_panic(expected = "inner dimensions disagree")]
fn matmul_shape_mismatch_panics() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 3], vec![0.0; 6]);
    let b = tape.constant(vec![2, 2], vec![0.0; 4]);
    tape.matmul(a, b);
}

#[test]
#[should_panic(expected = "scalar loss")]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2], vec![1.0, 2.0]);
    tape.backward(a);
}

#[test]
#[should_panic(expected = "non-finite")]
fn non_finite_results_are_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![1], vec![0.0]);
    tape.log(a);
}
