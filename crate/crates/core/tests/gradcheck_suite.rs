//! Finite-difference verification of every differentiable op, plus the
//! independent brute-force convolution oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbfm_core::conv::{conv2d_forward, conv_output_hw};
use sbfm_core::gradcheck::{grad_check, grad_check_coords};
use sbfm_core::sbfm::threshold_backward_ste;
use sbfm_core::{Tape, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Pushes values away from zero so kinked ops (relu, abs) stay numerically
/// differentiable at the probe points.
fn away_from_zero(t: &Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v + 0.15 } else { v })
}

/// Distinct values so maxpool argmaxes are stable under the FD probe.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |i| rng.gen_range(-1.0..1.0) + i as f64 * 1e-3)
}

// ---- brute-force conv oracle -------------------------------------------------

/// Quadruple-loop cross-correlation, independent of the im2col path.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (b, c, h, w) = x.dims4().unwrap();
    let (f, _, kh, _) = k.dims4().unwrap();
    let (oh, ow) = conv_output_hw(h, w, kh, stride, padding).unwrap();
    let mut y = Tensor::zeros(vec![b, f, oh, ow]);
    for bi in 0..b {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x.data()
                                        [((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((fi * c + ci) * kh + ky) * kh + kx];
                                }
                            }
                        }
                    }
                    y.data_mut()[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn conv_matches_bruteforce_oracle_bitwise_up_to_2x3x8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for &(b, c, h, w, f, k, s, p) in &[
        (
            1usize, 1usize, 3usize, 3usize, 1usize, 3usize, 1usize, 0usize,
        ),
        (1, 2, 5, 7, 3, 3, 1, 1),
        (2, 3, 8, 8, 4, 3, 1, 0),
        (2, 3, 8, 8, 4, 3, 1, 1),
        (2, 3, 8, 8, 2, 3, 2, 1),
        (2, 2, 8, 6, 3, 3, 3, 2),
    ] {
        let x = rand_tensor(&mut rng, vec![b, c, h, w]);
        let kr = rand_tensor(&mut rng, vec![f, c, k, k]);
        let fast = conv2d_forward(&x, &kr, s, p).unwrap();
        let want = conv_oracle(&x, &kr, s, p);
        assert!(
            fast.bits_eq(&want),
            "conv differs from oracle at b{b} c{c} {h}x{w} f{f} s{s} p{p}"
        );
    }
}

// ---- per-op finite-difference checks -------------------------------------------

#[test]
fn conv2d_gradients_match_fd_wrt_input_and_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..20 {
        let (s, p) = [(1, 0), (1, 1), (2, 1)][trial % 3];
        let x = rand_tensor(&mut rng, vec![1, 2, 6, 6]);
        let k = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
        // d/dx with kernel fixed
        let kc = k.clone();
        let report = grad_check(
            move |t: &mut Tape, v| {
                let kv = t.leaf(kc.clone(), false);
                let y = t.conv2d(v, kv, s, p)?;
                Ok(t.sum(y))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(report.within(TOL), "input grad trial {trial}: {report:?}");
        // d/dk with input fixed
        let xc = x.clone();
        let report = grad_check(
            move |t: &mut Tape, v| {
                let xv = t.leaf(xc.clone(), false);
                let y = t.conv2d(xv, v, s, p)?;
                Ok(t.sum(y))
            },
            &k,
            H,
        )
        .unwrap();
        assert!(report.within(TOL), "kernel grad trial {trial}: {report:?}");
    }
}

#[test]
fn maxpool_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let x = distinct_tensor(&mut rng, vec![1, 2, 6, 6]);
        let (w, s) = [(2, 2), (2, 1), (3, 3)][trial % 3];
        let report = grad_check(
            move |t: &mut Tape, v| {
                let y = t.maxpool2d(v, w, s)?;
                Ok(t.sum(y))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(report.within(TOL), "trial {trial}: {report:?}");
    }
}

#[test]
fn elementwise_op_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..100 {
        let x = away_from_zero(&rand_tensor(&mut rng, vec![2, 5]));
        let report = grad_check(
            |t: &mut Tape, v| {
                let y = t.relu(v);
                Ok(t.sum(y))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(report.within(TOL), "relu trial {trial}: {report:?}");

        let report = grad_check(
            |t: &mut Tape, v| {
                let y = t.abs(v);
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(report.within(TOL), "abs trial {trial}: {report:?}");

        let other = rand_tensor(&mut rng, vec![2, 5]);
        let oc = other.clone();
        let report = grad_check(
            move |t: &mut Tape, v| {
                let o = t.leaf(oc.clone(), false);
                let prod = t.mul(v, o)?;
                let summed = t.add(prod, v)?;
                Ok(t.sum(summed))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(report.within(TOL), "mul/add trial {trial}: {report:?}");
    }
}

#[test]
fn linear_and_concat_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..30 {
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![4, 6]);
        let b = rand_tensor(&mut rng, vec![6]);
        let side = rand_tensor(&mut rng, vec![3, 2]);

        let (wc, bc, sc) = (w.clone(), b.clone(), side.clone());
        let report = grad_check(
            move |t: &mut Tape, v| {
                let wv = t.leaf(wc.clone(), false);
                let bv = t.leaf(bc.clone(), false);
                let sv = t.leaf(sc.clone(), false);
                let y = t.linear(v, wv, bv)?;
                let cat = t.concat(y, sv)?;
                Ok(t.sum(cat))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(report.within(TOL), "input trial {trial}: {report:?}");

        let (xc, bc) = (x.clone(), b.clone());
        let report = grad_check(
            move |t: &mut Tape, v| {
                let xv = t.leaf(xc.clone(), false);
                let bv = t.leaf(bc.clone(), false);
                let y = t.linear(xv, v, bv)?;
                Ok(t.sum(y))
            },
            &w,
            H,
        )
        .unwrap();
        assert!(report.within(TOL), "weight trial {trial}: {report:?}");

        let (xc, wc) = (x.clone(), w.clone());
        let report = grad_check(
            move |t: &mut Tape, v| {
                let xv = t.leaf(xc.clone(), false);
                let wv = t.leaf(wc.clone(), false);
                let y = t.linear(xv, wv, v)?;
                Ok(t.sum(y))
            },
            &b,
            H,
        )
        .unwrap();
        assert!(report.within(TOL), "bias trial {trial}: {report:?}");
    }
}

#[test]
fn softmax_cross_entropy_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100 {
        let logits = rand_tensor(&mut rng, vec![4, 7]);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
        let lc = labels.clone();
        let report = grad_check(
            move |t: &mut Tape, v| t.softmax_cross_entropy(v, &lc),
            &logits,
            H,
        )
        .unwrap();
        assert!(report.within(TOL), "trial {trial}: {report:?}");
    }
}

#[test]
fn normalize_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, vec![2, 3, 4, 4]);
    let report = grad_check(
        |t: &mut Tape, v| {
            let n = t.normalize(v, &[0.5, 0.4, 0.6], &[0.2, 0.3, 0.25])?;
            let sq = t.mul(n, n)?;
            Ok(t.sum(sq))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(report.within(TOL), "{report:?}");
}

#[test]
fn composite_conv_relu_pool_linear_loss_matches_fd() {
    // The whole small stack end to end, against central differences.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..10 {
        let x = away_from_zero(&rand_tensor(&mut rng, vec![2, 1, 5, 5]));
        let k = rand_tensor(&mut rng, vec![2, 1, 3, 3]);
        let w = rand_tensor(&mut rng, vec![2 * 2 * 2, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        let (kc, wc, bc) = (k.clone(), w.clone(), b.clone());
        let f = move |t: &mut Tape, v: sbfm_core::Var| {
            let kv = t.leaf(kc.clone(), false);
            let wv = t.leaf(wc.clone(), false);
            let bv = t.leaf(bc.clone(), false);
            let c = t.conv2d(v, kv, 1, 1)?; // 5x5 stays 5x5
            let r = t.relu(c);
            let p = t.maxpool2d(r, 3, 2)?; // -> 2x2
            let fl = t.flatten(p)?;
            let lin = t.linear(fl, wv, bv)?;
            t.softmax_cross_entropy(lin, &[1, 2])
        };
        let report = grad_check(f, &x, H).unwrap();
        assert!(report.within(TOL), "trial {trial}: {report:?}");
    }
}

#[test]
fn sampled_coordinates_agree_with_full_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, vec![3, 3]);
    let full = grad_check(|t: &mut Tape, v| Ok(t.sum(v)), &x, H).unwrap();
    let sampled = grad_check_coords(|t: &mut Tape, v| Ok(t.sum(v)), &x, H, &[0, 4, 8]).unwrap();
    assert_eq!(sampled.checked, 3);
    assert!(sampled.max_rel_err <= full.max_rel_err + 1e-12);
}

// ---- STE: the one op that must NOT match finite differences --------------------

#[test]
fn ste_gradient_equals_formula_not_finite_differences() {
    let x = Tensor::new(vec![1, 1, 2, 3], vec![0.4, -0.9, 0.0, 0.6, -0.2, 0.75]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let a = tape.abs(xv);
    let bin = tape.channel_threshold(a, 0.5).unwrap();
    let loss = tape.sum(bin);
    tape.backward(loss).unwrap();
    let got = tape.grad(xv).unwrap();

    // hand-evaluated STE chain: ones -> [|a| > 0] -> sign(x)
    let rectified = x.map(f64::abs);
    let upstream = Tensor::full(vec![1, 1, 2, 3], 1.0);
    let through_threshold = threshold_backward_ste(&upstream, &rectified).unwrap();
    let want = Tensor::new(
        vec![1, 1, 2, 3],
        through_threshold
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| g * if v == 0.0 { 0.0 } else { v.signum() })
            .collect::<Vec<f64>>(),
    )
    .unwrap();
    assert!(
        got.bits_eq(&want),
        "got {:?}, want {:?}",
        got.data(),
        want.data()
    );
}

// ---- determinism and finiteness ------------------------------------------------

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    // exercises the rayon-parallel conv/linear paths
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, vec![8, 3, 8, 8]);
        let k = rand_tensor(&mut rng, vec![4, 3, 3, 3]);
        let w = rand_tensor(&mut rng, vec![4 * 4 * 4, 5]);
        let b = rand_tensor(&mut rng, vec![5]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let kv = tape.leaf(k, true);
        let wv = tape.leaf(w, true);
        let bv = tape.leaf(b, true);
        let c = tape.conv2d(xv, kv, 1, 1).unwrap();
        let r = tape.relu(c);
        let p = tape.maxpool2d(r, 2, 2).unwrap();
        let f = tape.flatten(p).unwrap();
        let l = tape.linear(f, wv, bv).unwrap();
        let loss = tape
            .softmax_cross_entropy(l, &[0, 1, 2, 3, 4, 0, 1, 2])
            .unwrap();
        tape.backward(loss).unwrap();
        (
            tape.value(loss).clone(),
            tape.grad(xv).unwrap().clone(),
            tape.grad(kv).unwrap().clone(),
            tape.grad(wv).unwrap().clone(),
        )
    };
    let (l1, gx1, gk1, gw1) = run();
    let (l2, gx2, gk2, gw2) = run();
    assert!(l1.bits_eq(&l2));
    assert!(gx1.bits_eq(&gx2));
    assert!(gk1.bits_eq(&gk2));
    assert!(gw1.bits_eq(&gw2));
}

#[test]
fn thread_count_does_not_change_results_bitwise() {
    // batch parallelism must be unobservable: a single-thread pool and the
    // default pool produce identical bits
    let run_graph = || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, vec![8, 3, 8, 8]);
        let k = rand_tensor(&mut rng, vec![4, 3, 3, 3]);
        let w = rand_tensor(&mut rng, vec![4 * 4 * 4, 5]);
        let b = rand_tensor(&mut rng, vec![5]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let kv = tape.leaf(k, true);
        let wv = tape.leaf(w, true);
        let bv = tape.leaf(b, true);
        let c = tape.conv2d(xv, kv, 1, 1).unwrap();
        let r = tape.relu(c);
        let p = tape.maxpool2d(r, 2, 2).unwrap();
        let f = tape.flatten(p).unwrap();
        let l = tape.linear(f, wv, bv).unwrap();
        let loss = tape
            .softmax_cross_entropy(l, &[0, 1, 2, 3, 4, 0, 1, 2])
            .unwrap();
        tape.backward(loss).unwrap();
        (
            tape.value(loss).clone(),
            tape.grad(kv).unwrap().clone(),
            tape.grad(wv).unwrap().clone(),
        )
    };
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(run_graph);
    let parallel = run_graph();
    assert!(single.0.bits_eq(&parallel.0));
    assert!(single.1.bits_eq(&parallel.1));
    assert!(single.2.bits_eq(&parallel.2));
}

#[test]
fn no_nan_or_inf_on_large_finite_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_fn(vec![2, 2, 6, 6], |_| rng.gen_range(-1e6..1e6));
    let k = Tensor::from_fn(vec![2, 2, 3, 3], |_| rng.gen_range(-1e6..1e6));
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let kv = tape.leaf(k, true);
    let c = tape.conv2d(xv, kv, 1, 1).unwrap();
    let r = tape.relu(c);
    let a = tape.abs(r);
    let p = tape.maxpool2d(a, 2, 2).unwrap();
    let bin = tape.channel_threshold(p, 0.9).unwrap();
    let f = tape.flatten(bin).unwrap();
    let s = tape.sum(f);
    tape.backward(s).unwrap();
    for v in [c, r, a, p, f, s] {
        assert!(tape.value(v).all_finite());
    }
    assert!(tape.grad(xv).unwrap().all_finite());
    assert!(tape.grad(kv).unwrap().all_finite());

    // extreme logits stay finite through the stabilized softmax
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(
        Tensor::new(vec![2, 3], vec![1e6, -1e6, 0.0, 5e5, 5e5, -5e5]).unwrap(),
        true,
    );
    let loss = tape.softmax_cross_entropy(logits, &[0, 2]).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.value(loss).all_finite());
    assert!(tape.grad(logits).unwrap().all_finite());
}

// ---- the generic core also instantiates at f32 ---------------------------------

#[test]
fn f32_instantiation_smoke() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(
        Tensor::<f32>::from_fn(vec![1, 1, 4, 4], |i| i as f32 * 0.1),
        true,
    );
    let k = tape.leaf(Tensor::<f32>::full(vec![1, 1, 3, 3], 0.5f32), true);
    let c = tape.conv2d(x, k, 1, 0).unwrap();
    let r = tape.relu(c);
    let s = tape.sum(r);
    tape.backward(s).unwrap();
    assert!(tape.value(s).all_finite());
    assert!(tape.grad(x).unwrap().all_finite());
}
