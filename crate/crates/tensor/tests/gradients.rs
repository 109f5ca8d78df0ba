//! Finite-difference checks for every differentiable primitive.
//!
//! The oracle is `numeric_gradient`, which never touches the backward
//! pass: it re-runs the forward computation under central perturbations
//! (h = 1e-4) and compares. Each primitive is checked over 20 seeds at
//! a 1e-3 relative tolerance.

use patchbench_tensor::{max_rel_error, numeric_gradient, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 20;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Checks d(graph)/d(input 0) for a scalar graph builder over many seeds.
fn check_unary(
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
    build: impl Fn(&mut Tape, patchbench_tensor::NodeId) -> patchbench_tensor::NodeId,
) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, shape.clone(), lo, hi);

        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = build(&mut tape, leaf);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.wrt(leaf).unwrap().data().to_vec();

        let shape_ref = shape.clone();
        let numeric = numeric_gradient(
            |vals| {
                let mut t = Tape::new();
                let leaf = t.leaf(Tensor::new(shape_ref.clone(), vals.to_vec()).unwrap());
                let out = build(&mut t, leaf);
                t.value(out).item().unwrap()
            },
            x.data(),
            H,
        );
        let err = max_rel_error(&analytic, &numeric);
        assert!(err <= TOL, "seed {}: max rel error {}", seed, err);
    }
}

#[test]
fn conv2d_identity_kernel_is_identity() {
    let input = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
    let kernel = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let k = tape.constant(kernel);
    let out = tape.conv2d(x, k, None, 1, 1, 0).unwrap();
    assert_eq!(tape.value(out), &input);
}

#[test]
fn conv2d_all_ones_sums_window() {
    let input = Tensor::filled(vec![1, 3, 3], 1.0);
    let kernel = Tensor::filled(vec![1, 1, 3, 3], 1.0);
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let k = tape.constant(kernel);
    let out = tape.conv2d(x, k, None, 1, 1, 0).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 1, 1]);
    assert_eq!(tape.value(out).data()[0], 9.0);
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let input = Tensor::zeros(vec![2, 4, 4]);
    let kernel = Tensor::zeros(vec![1, 3, 2, 2]);
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let k = tape.constant(kernel);
    let err = tape.conv2d(x, k, None, 1, 1, 0).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("3") && msg.contains("2"), "got: {msg}");
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    // Gradient w.r.t. the input of a random 2x5x5 conv, plus the kernel
    // and bias of the same graph, against the finite-difference oracle.
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random_tensor(&mut rng, vec![2, 5, 5], -1.0, 1.0);
        let k = random_tensor(&mut rng, vec![3, 2, 3, 3], -0.7, 0.7);
        let b = random_tensor(&mut rng, vec![3], -0.3, 0.3);

        let run = |xv: &[f64], kv: &[f64], bv: &[f64]| {
            let mut t = Tape::new();
            let xi = t.leaf(Tensor::new(vec![2, 5, 5], xv.to_vec()).unwrap());
            let ki = t.leaf(Tensor::new(vec![3, 2, 3, 3], kv.to_vec()).unwrap());
            let bi = t.leaf(Tensor::new(vec![3], bv.to_vec()).unwrap());
            let conv = t.conv2d(xi, ki, Some(bi), 2, 2, 1).unwrap();
            // Square the output so kernel gradients are input-dependent.
            let sq = t.mul(conv, conv).unwrap();
            let out = t.sum(sq).unwrap();
            (t, xi, ki, bi, out)
        };

        let (tape, xi, ki, bi, out) = run(x.data(), k.data(), b.data());
        let grads = tape.backward(out).unwrap();

        let fd_x = numeric_gradient(
            |v| {
                let (t, _, _, _, o) = run(v, k.data(), b.data());
                t.value(o).item().unwrap()
            },
            x.data(),
            H,
        );
        let fd_k = numeric_gradient(
            |v| {
                let (t, _, _, _, o) = run(x.data(), v, b.data());
                t.value(o).item().unwrap()
            },
            k.data(),
            H,
        );
        let fd_b = numeric_gradient(
            |v| {
                let (t, _, _, _, o) = run(x.data(), k.data(), v);
                t.value(o).item().unwrap()
            },
            b.data(),
            H,
        );

        assert!(max_rel_error(grads.wrt(xi).unwrap().data(), &fd_x) <= TOL);
        assert!(max_rel_error(grads.wrt(ki).unwrap().data(), &fd_k) <= TOL);
        assert!(max_rel_error(grads.wrt(bi).unwrap().data(), &fd_b) <= TOL);
    }
}

#[test]
fn resize_constant_image_stays_constant() {
    let input = Tensor::filled(vec![2, 4, 5], 0.37);
    for (oh, ow) in [(1, 1), (3, 3), (9, 11), (4, 5)] {
        let out = input.bilinear_resized(oh, ow).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.37));
    }
}

#[test]
fn resize_to_same_size_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = random_tensor(&mut rng, vec![3, 6, 7], 0.0, 1.0);
    let out = input.bilinear_resized(6, 7).unwrap();
    assert_eq!(out, input);
}

#[test]
fn resize_center_of_2x2_upsample() {
    // Corner-aligned 2x2 -> 3x3 puts the center at the mean of all four.
    let input = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let out = input.bilinear_resized(3, 3).unwrap();
    assert_eq!(out.at3(0, 1, 1), 1.5);
    assert_eq!(out.at3(0, 0, 0), 0.0);
    assert_eq!(out.at3(0, 2, 2), 3.0);
}

#[test]
fn resize_gradient_matches_finite_differences() {
    check_unary(vec![2, 5, 4], -1.0, 1.0, |t, x| {
        let r = t.bilinear_resize(x, 8, 9).unwrap();
        let sq = t.mul(r, r).unwrap();
        t.sum(sq).unwrap()
    });
    // Downsampling path.
    check_unary(vec![1, 7, 7], -1.0, 1.0, |t, x| {
        let r = t.bilinear_resize(x, 3, 4).unwrap();
        let sq = t.mul(r, r).unwrap();
        t.sum(sq).unwrap()
    });
}

#[test]
fn rotate_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = random_tensor(&mut rng, vec![2, 5, 6], 0.0, 1.0);
    let out = input.rotated(0.0).unwrap();
    assert_eq!(out, input);
}

#[test]
fn rotate_half_turn_flips_both_axes() {
    let input = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = input.rotated(180.0).unwrap();
    let expect = [4.0, 3.0, 2.0, 1.0];
    for (a, b) in out.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }
}

#[test]
fn rotate_gradient_matches_finite_differences() {
    check_unary(vec![1, 8, 8], -1.0, 1.0, |t, x| {
        let r = t.rotate(x, 37.0).unwrap();
        let sq = t.mul(r, r).unwrap();
        t.sum(sq).unwrap()
    });
}

#[test]
fn rotate_rejects_out_of_range_angle() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 4, 4]));
    assert!(tape.rotate(x, 200.0).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2, 2], vec![3.0, -1.0, 0.5, 2.0]).unwrap());
    let out = tape.sum(x).unwrap();
    let grads = tape.backward(out).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_half_square_sum_is_input() {
    let values = vec![3.0, -1.0, 0.5, 2.0];
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![4], values.clone()).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let out = tape.affine(s, 0.5, 0.0).unwrap();
    let grads = tape.backward(out).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), values.as_slice());
}

#[test]
fn backward_rejects_non_scalar_output() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 2]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(
        tape.backward(y),
        Err(patchbench_tensor::TensorError::NonScalarOutput { .. })
    ));
}

#[test]
fn backward_accumulates_over_fanout() {
    // y = sum(x * x + x): dy/dx = 2x + 1.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let both = tape.add(sq, x).unwrap();
    let out = tape.sum(both).unwrap();
    let grads = tape.backward(out).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, -3.0, 1.5]);
}

#[test]
fn elementwise_and_structural_gradients_match_finite_differences() {
    // add/sub/mul/affine/sigmoid chained into one scalar.
    check_unary(vec![3, 4], -2.0, 2.0, |t, x| {
        let s = t.sigmoid(x).unwrap();
        let a = t.affine(s, 1.7, -0.3).unwrap();
        let m = t.mul(a, s).unwrap();
        let d = t.sub(m, a).unwrap();
        let e = t.add(d, m).unwrap();
        t.sum(e).unwrap()
    });
    // crop + embed + concat + resize in one graph.
    check_unary(vec![2, 6, 6], -1.0, 1.0, |t, x| {
        let c = t.crop(x, 1, 2, 4, 3).unwrap();
        let e = t.embed(c, 6, 6, 0, 0).unwrap();
        let cat = t.concat_channels(&[e, x]).unwrap();
        let r = t.bilinear_resize(cat, 5, 5).unwrap();
        let sq = t.mul(r, r).unwrap();
        t.sum(sq).unwrap()
    });
}

#[test]
fn relu_and_clamp_gradients_away_from_kinks() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = random_tensor(&mut rng, vec![3, 3], -2.0, 2.0);

        let build = |t: &mut Tape, leaf| {
            let r = t.relu(leaf).unwrap();
            let shifted = t.affine(r, 0.45, 0.1).unwrap();
            let c = t.clamp01(shifted).unwrap();
            t.sum(c).unwrap()
        };

        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = build(&mut tape, leaf);
        // Finite differences are invalid within the probe step of a kink.
        if tape.min_kink_distance().unwrap() < 10.0 * H {
            continue;
        }
        let grads = tape.backward(out).unwrap();
        let numeric = numeric_gradient(
            |vals| {
                let mut t = Tape::new();
                let leaf = t.leaf(Tensor::new(vec![3, 3], vals.to_vec()).unwrap());
                let out = build(&mut t, leaf);
                t.value(out).item().unwrap()
            },
            x.data(),
            H,
        );
        let analytic = grads.wrt(leaf).unwrap().data();
        assert!(max_rel_error(analytic, &numeric) <= TOL, "seed {}", seed);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let m = tape.mul(x, c).unwrap();
    let out = tape.sum(m).unwrap();
    let grads = tape.backward(out).unwrap();
    assert!(grads.wrt(c).is_none());
    assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn ids_from_other_tapes_are_rejected() {
    let mut other = Tape::new();
    let foreign = other.leaf(Tensor::zeros(vec![2]));
    let mut tape = Tape::new();
    assert!(tape.relu(foreign).is_err());
}
