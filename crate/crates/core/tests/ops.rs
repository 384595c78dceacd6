//! Forward examples and finite-difference gradient checks for every
//! differentiable operator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sardino::autograd::{Activation, NormMode, Tape, Var};
use sardino::gradcheck::{compare_input_gradient, gradient_check, DEFAULT_EPS};
use sardino::params::ParamStore;
use sardino::{Result, Tensor};

const TOL: f64 = 1e-3;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Random values kept at least `gap` away from zero, for checks across ReLU
/// kinks.
fn random_away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    random(shape, seed).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Projects a tensor-valued output onto fixed random weights so every
/// output element contributes to the scalar.
fn project(t: &Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(&t.shape(y), seed);
    let wv = t.constant(w);
    Ok(t.sum(t.mul(y, wv)?))
}

fn forward(f: impl Fn(&Tape<'_, f64>) -> Result<Var>) -> Tensor<f64> {
    let store = ParamStore::new();
    let tape = Tape::inference(&store);
    let v = f(&tape).unwrap();
    tape.value(v).as_ref().clone()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

// ------------------------------------------------------------------ matmul

#[test]
fn matmul_identity_and_analytic() {
    let y = forward(|t| {
        let a = t.constant(Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0])?);
        let b = t.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0])?);
        t.matmul(a, b)
    });
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    let y = forward(|t| {
        let a = t.constant(Tensor::from_f64([1, 2], &[1.0, 2.0])?);
        let b = t.constant(Tensor::from_f64([2, 1], &[3.0, 4.0])?);
        t.matmul(a, b)
    });
    assert_eq!(y.data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let store = ParamStore::<f64>::new();
    let t = Tape::new(&store);
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([4, 5]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_gradients() {
    let b = random(&[4, 3], 11);
    let a = random(&[5, 4], 12);
    let err_a = gradient_check(
        |t, x| {
            let bv = t.constant(b.clone());
            project(t, t.matmul(x, bv)?, 1)
        },
        &a,
        DEFAULT_EPS,
    )
    .unwrap();
    let err_b = gradient_check(
        |t, x| {
            let av = t.constant(a.clone());
            project(t, t.matmul(av, x)?, 2)
        },
        &b,
        DEFAULT_EPS,
    )
    .unwrap();
    // batched
    let bb = random(&[3, 4, 2], 13);
    let err_batched = gradient_check(
        |t, x| {
            let bv = t.constant(bb.clone());
            project(t, t.matmul(x, bv)?, 3)
        },
        &random(&[3, 5, 4], 14),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err_a < TOL && err_b < TOL && err_batched < TOL, "{err_a} {err_b} {err_batched}");
}

// ------------------------------------------------------------------ conv2d

#[test]
fn conv2d_identity_kernel_and_sum() {
    let x = random(&[1, 1, 3, 3], 5);
    let y = forward(|t| {
        let xv = t.constant(x.clone());
        let w = t.constant(Tensor::ones([1, 1, 1, 1]));
        let b = t.constant(Tensor::zeros([1]));
        t.conv2d(xv, w, Some(b), 1, 0)
    });
    assert_eq!(y.data(), x.data());
    let y = forward(|t| {
        let xv = t.constant(Tensor::ones([1, 1, 3, 3]));
        let w = t.constant(Tensor::ones([1, 1, 3, 3]));
        t.conv2d(xv, w, None, 1, 0)
    });
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn conv2d_rejects_empty_output() {
    let store = ParamStore::<f64>::new();
    let t = Tape::new(&store);
    let x = t.constant(Tensor::zeros([1, 1, 2, 2]));
    let w = t.constant(Tensor::zeros([1, 1, 3, 3]));
    assert!(matches!(t.conv2d(x, w, None, 1, 0), Err(sardino::Error::Dimension(_))));
}

#[test]
fn conv2d_gradients() {
    let x = random(&[2, 3, 8, 8], 21);
    let w = random(&[4, 3, 3, 3], 22);
    let b = random(&[4], 23);
    let err_x = gradient_check(
        |t, xv| {
            let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
            project(t, t.conv2d(xv, wv, Some(bv), 1, 1)?, 4)
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    let err_w = gradient_check(
        |t, wv| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            project(t, t.conv2d(xv, wv, Some(bv), 1, 1)?, 4)
        },
        &w,
        DEFAULT_EPS,
    )
    .unwrap();
    let err_b = gradient_check(
        |t, bv| {
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            project(t, t.conv2d(xv, wv, Some(bv), 1, 1)?, 4)
        },
        &b,
        DEFAULT_EPS,
    )
    .unwrap();
    // strided, patch-embedding style
    let err_s = gradient_check(
        |t, xv| {
            let wv = t.constant(random(&[5, 3, 4, 4], 24));
            project(t, t.conv2d(xv, wv, None, 4, 0)?, 5)
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err_x < TOL && err_w < TOL && err_b < TOL && err_s < TOL, "{err_x} {err_w} {err_b} {err_s}");
}

// ------------------------------------------------------------------ pooling & resampling

#[test]
fn max_pool_forward_and_tie_break() {
    let y = forward(|t| t.max_pool2d(t.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])?)));
    assert_eq!(y.data(), &[4.0]);

    let store = ParamStore::<f64>::new();
    let t = Tape::new(&store);
    let x = t.input(Tensor::full([1, 1, 4, 4], 2.0), true);
    let y = t.max_pool2d(x).unwrap();
    assert_eq!(t.value(y).data(), &[2.0; 4]);
    let loss = t.sum(y);
    let g = t.backward(loss).unwrap();
    let expected: Vec<f64> = (0..16).map(|i| if (i / 4) % 2 == 0 && i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    assert_eq!(g.get(x).unwrap().data(), &expected[..]);
}

#[test]
fn max_pool_rejects_odd_dims() {
    let store = ParamStore::<f64>::new();
    let t = Tape::new(&store);
    let x = t.constant(Tensor::zeros([1, 1, 3, 4]));
    assert!(t.max_pool2d(x).is_err());
}

#[test]
fn max_pool_gradients() {
    // distinct values spaced well beyond eps, so no window has a near tie
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut vals: Vec<f64> = (0..36).map(|i| i as f64 * 0.05).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_f64([1, 1, 6, 6], &vals).unwrap();
    let err = gradient_check(|t, xv| project(t, t.max_pool2d(xv)?, 6), &x, DEFAULT_EPS).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn bilinear_upsample_examples() {
    let y = forward(|t| t.upsample2x(t.constant(Tensor::full([1, 2, 3, 3], 1.5))));
    assert_eq!(y.shape(), &[1, 2, 6, 6]);
    assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    let y = forward(|t| t.upsample2x(t.constant(Tensor::full([1, 1, 1, 1], -0.7))));
    assert_eq!(y.data(), &[-0.7; 4]);
    // 1-D profile [0, 1] -> [0, 0.25, 0.75, 1]
    let y = forward(|t| t.upsample2x(t.constant(Tensor::from_f64([1, 1, 1, 2], &[0.0, 1.0])?)));
    assert_close(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0], 1e-15);
}

#[test]
fn bilinear_gradients() {
    let err = gradient_check(|t, xv| project(t, t.upsample2x(xv)?, 7), &random(&[1, 1, 3, 3], 41), DEFAULT_EPS).unwrap();
    let err2 = gradient_check(
        |t, xv| project(t, t.resize_bilinear(xv, 7, 5)?, 8),
        &random(&[2, 2, 3, 4], 42),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < TOL && err2 < TOL, "{err} {err2}");
}

// ------------------------------------------------------------------ activations

#[test]
fn activation_examples() {
    let y = forward(|t| Ok(t.relu(t.constant(Tensor::from_f64([3], &[-1.0, 0.0, 2.0])?))));
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    let y = forward(|t| Ok(t.gelu(t.constant(Tensor::from_f64([1], &[0.0])?))));
    assert_eq!(y.data(), &[0.0]);

    // relu'(0) = 0
    let store = ParamStore::<f64>::new();
    let t = Tape::new(&store);
    let x = t.input(Tensor::from_f64([1], &[0.0]).unwrap(), true);
    let l = t.sum(t.relu(x));
    assert_eq!(t.backward(l).unwrap().get(x).unwrap().data(), &[0.0]);
}

#[test]
fn activation_gradients() {
    for (kind, seed) in [(Activation::Relu, 51), (Activation::Gelu, 52)] {
        for shape in [vec![7], vec![3, 4], vec![2, 2, 5]] {
            let x = random_away_from_zero(&shape, seed, 0.01);
            let err = gradient_check(|t, xv| project(t, t.activation(xv, kind), 9), &x, DEFAULT_EPS).unwrap();
            assert!(err < TOL, "{kind:?} {shape:?}: {err}");
        }
    }
}

// ------------------------------------------------------------------ layer norm

#[test]
fn layer_norm_examples() {
    let ln = |row: &[f64]| {
        let d = row.len();
        forward(|t| {
            let x = t.constant(Tensor::from_f64([1, d], row)?);
            let g = t.constant(Tensor::ones([d]));
            let b = t.constant(Tensor::zeros([d]));
            t.layer_norm(x, g, b, 1e-6)
        })
    };
    assert_eq!(ln(&[1.0, 1.0, 1.0]).data(), &[0.0, 0.0, 0.0]);
    assert_close(ln(&[-1.0, 1.0]).data(), &[-1.0, 1.0], 1e-6);

    let store = ParamStore::<f64>::new();
    let t = Tape::new(&store);
    let x = t.constant(Tensor::zeros([2, 3]));
    let g = t.constant(Tensor::ones([4]));
    let b = t.constant(Tensor::zeros([3]));
    assert!(t.layer_norm(x, g, b, 1e-6).is_err());
}

#[test]
fn layer_norm_gradients() {
    let gain = random(&[8], 61).map(|v| v + 1.5);
    let shift = random(&[8], 62);
    let x = random(&[4, 8], 63);
    let err_x = gradient_check(
        |t, xv| {
            let (g, b) = (t.constant(gain.clone()), t.constant(shift.clone()));
            project(t, t.layer_norm(xv, g, b, 1e-6)?, 10)
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    let err_g = gradient_check(
        |t, g| {
            let (xv, b) = (t.constant(x.clone()), t.constant(shift.clone()));
            project(t, t.layer_norm(xv, g, b, 1e-6)?, 10)
        },
        &gain,
        DEFAULT_EPS,
    )
    .unwrap();
    let err_x3 = gradient_check(
        |t, xv| {
            let (g, b) = (t.constant(Tensor::ones([5])), t.constant(Tensor::zeros([5])));
            project(t, t.layer_norm(xv, g, b, 1e-6)?, 11)
        },
        &random(&[2, 3, 5], 64),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err_x < TOL && err_g < TOL && err_x3 < TOL, "{err_x} {err_g} {err_x3}");
}

// ------------------------------------------------------------------ batch norm

#[test]
fn batch_norm_train_normalizes_channel() {
    // channel 0: values with mean 3 and variance 4; channel 1: arbitrary
    let vals = [1.0, 5.0, 1.0, 5.0, 0.3, -2.0, 7.0, 1.0];
    let y = forward(|t| {
        let x = t.constant(Tensor::from_f64([1, 2, 2, 2], &vals)?);
        let g = t.constant(Tensor::ones([2]));
        let b = t.constant(Tensor::zeros([2]));
        Ok(t.batch_norm2d(x, g, b, NormMode::Train, 1e-5)?.0)
    });
    for ch in 0..2 {
        let c = &y.data()[ch * 4..ch * 4 + 4];
        let mean: f64 = c.iter().sum::<f64>() / 4.0;
        let var: f64 = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "{mean} {var}");
    }
    // channel 0 maps (x-3)/2 up to eps
    assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
}

#[test]
fn batch_norm_eval_identity_and_single_value_error() {
    let x = random(&[2, 3, 2, 2], 71);
    let (mean, var) = (vec![0.0; 3], vec![1.0; 3]);
    let y = forward(|t| {
        let xv = t.constant(x.clone());
        let g = t.constant(Tensor::ones([3]));
        let b = t.constant(Tensor::zeros([3]));
        Ok(t.batch_norm2d(xv, g, b, NormMode::Eval(&mean, &var), 0.0)?.0)
    });
    assert_eq!(y.data(), x.data());

    let store = ParamStore::<f64>::new();
    let t = Tape::new(&store);
    let xv = t.constant(Tensor::zeros([1, 3, 1, 1]));
    let g = t.constant(Tensor::ones([3]));
    let b = t.constant(Tensor::zeros([3]));
    assert!(t.batch_norm2d(xv, g, b, NormMode::Train, 1e-5).is_err());
}

#[test]
fn batch_norm_gradients() {
    let gain = random(&[3], 72).map(|v| v + 1.5);
    let shift = random(&[3], 73);
    let x = random(&[2, 3, 3, 3], 74);
    let err_x = gradient_check(
        |t, xv| {
            let (g, b) = (t.constant(gain.clone()), t.constant(shift.clone()));
            project(t, t.batch_norm2d(xv, g, b, NormMode::Train, 1e-5)?.0, 12)
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    let err_g = gradient_check(
        |t, g| {
            let (xv, b) = (t.constant(x.clone()), t.constant(shift.clone()));
            project(t, t.batch_norm2d(xv, g, b, NormMode::Train, 1e-5)?.0, 12)
        },
        &gain,
        DEFAULT_EPS,
    )
    .unwrap();
    let (mean, var) = (vec![0.1, -0.2, 0.3], vec![0.5, 2.0, 1.0]);
    let err_eval = gradient_check(
        |t, xv| {
            let (g, b) = (t.constant(gain.clone()), t.constant(shift.clone()));
            project(t, t.batch_norm2d(xv, g, b, NormMode::Eval(&mean, &var), 1e-5)?.0, 13)
        },
        &x,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err_x < TOL && err_g < TOL && err_eval < TOL, "{err_x} {err_g} {err_eval}");
}

// ------------------------------------------------------------------ softmax family

#[test]
fn softmax_examples() {
    let y = forward(|t| Ok(t.softmax(t.constant(Tensor::full([2, 5], 3.3)))));
    assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let y = forward(|t| Ok(t.softmax(t.constant(Tensor::from_f64([2], &[0.0, 3f64.ln()])?))));
    assert_close(y.data(), &[0.25, 0.75], 1e-15);
}

#[test]
fn softmax_gradients() {
    for (shape, seed) in [(vec![6], 81u64), (vec![3, 4], 82), (vec![2, 2, 3], 83)] {
        let x = random(&shape, seed).map(|v| 3.0 * v);
        let e1 = gradient_check(|t, xv| project(t, t.softmax(xv), 14), &x, DEFAULT_EPS).unwrap();
        let e2 = gradient_check(|t, xv| project(t, t.log_softmax(xv), 15), &x, DEFAULT_EPS).unwrap();
        assert!(e1 < TOL && e2 < TOL, "{shape:?}: {e1} {e2}");
    }
}

#[test]
fn cross_entropy_examples() {
    let store = ParamStore::<f64>::new();
    let t = Tape::inference(&store);
    let logits = t.constant(Tensor::zeros([2, 11, 3, 3]));
    let targets: Vec<usize> = (0..18).map(|i| i % 11).collect();
    let loss = t.cross_entropy(logits, &targets).unwrap();
    assert!((t.value(loss).data()[0] - 11f64.ln()).abs() < 1e-12);

    let k = 4;
    let targets = vec![2usize, 0, 3, 1];
    let logits = Tensor::from_fn([1, k, 2, 2], |i| if i / 4 == targets[i % 4] { 20.0 } else { 0.0 });
    let loss = t.cross_entropy(t.constant(logits), &targets).unwrap();
    assert!(t.value(loss).data()[0] < 1e-6);

    let bad = t.cross_entropy(t.constant(Tensor::zeros([1, 3])), &[3]);
    assert!(matches!(bad, Err(sardino::Error::Index(_))));
}

#[test]
fn cross_entropy_gradients() {
    let targets = vec![2usize, 0, 1, 2];
    let err = gradient_check(|t, xv| t.cross_entropy(xv, &targets), &random(&[1, 3, 2, 2], 91), DEFAULT_EPS).unwrap();
    let err_bce = gradient_check(|t, xv| t.bce_onehot(xv, &targets), &random(&[1, 3, 2, 2], 92), DEFAULT_EPS).unwrap();
    let flat_targets = vec![4usize, 0, 1];
    let err_flat = gradient_check(|t, xv| t.cross_entropy(xv, &flat_targets), &random(&[3, 5], 93), DEFAULT_EPS).unwrap();
    assert!(err < TOL && err_bce < TOL && err_flat < TOL, "{err} {err_bce} {err_flat}");
}

// ------------------------------------------------------------------ remaining ops

#[test]
fn structural_op_gradients() {
    let x = random(&[2, 3, 4], 101);
    let checks: Vec<(&str, f64)> = vec![
        ("permute", gradient_check(|t, xv| project(t, t.permute(xv, &[2, 0, 1])?, 16), &x, DEFAULT_EPS).unwrap()),
        ("narrow", gradient_check(|t, xv| project(t, t.narrow(xv, 1, 1, 2)?, 17), &x, DEFAULT_EPS).unwrap()),
        (
            "concat",
            gradient_check(
                |t, xv| {
                    let other = t.constant(random(&[2, 2, 4], 102));
                    project(t, t.concat(&[other, xv, xv], 1)?, 18)
                },
                &x,
                DEFAULT_EPS,
            )
            .unwrap(),
        ),
        (
            "expand0",
            gradient_check(|t, xv| project(t, t.expand0(xv, 3)?, 19), &random(&[1, 2, 3], 103), DEFAULT_EPS).unwrap(),
        ),
        (
            "add_broadcast",
            gradient_check(
                |t, bv| {
                    let a = t.constant(x.clone());
                    project(t, t.add_broadcast(a, bv)?, 20)
                },
                &random(&[3, 4], 104),
                DEFAULT_EPS,
            )
            .unwrap(),
        ),
        ("l2_normalize", gradient_check(|t, xv| project(t, t.l2_normalize(xv), 21), &x, DEFAULT_EPS).unwrap()),
        (
            "minmax_normalize",
            gradient_check(|t, xv| project(t, t.minmax_normalize(xv)?, 22), &random(&[2, 3, 3], 105), DEFAULT_EPS)
                .unwrap(),
        ),
        (
            "mean/sub/scale",
            gradient_check(
                |t, xv| {
                    let c = t.constant(random(&[2, 3, 4], 106));
                    let d = t.sub(xv, c)?;
                    Ok(t.mean(t.scale(t.mul(d, d)?, 0.7)))
                },
                &x,
                DEFAULT_EPS,
            )
            .unwrap(),
        ),
    ];
    for (name, err) in checks {
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn l2_normalize_gives_unit_rows() {
    let y = forward(|t| Ok(t.l2_normalize(t.constant(random(&[5, 7], 111)))));
    for row in y.data().chunks(7) {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

// ------------------------------------------------------------------ backward semantics

#[test]
fn backward_linear_and_quadratic() {
    let store = ParamStore::<f64>::new();
    let x0 = random(&[3, 2], 121);
    let t = Tape::new(&store);
    let x = t.input(x0.clone(), true);
    let g = t.backward(t.sum(x)).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

    let cmp = compare_input_gradient(|t, x| Ok(t.sum(t.mul(x, x)?)), &x0, DEFAULT_EPS).unwrap();
    let expected: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(cmp.analytic, expected);
}

#[test]
fn reused_tensor_accumulates_both_paths() {
    let store = ParamStore::<f64>::new();
    let t = Tape::new(&store);
    let x = t.input(Tensor::from_f64([3], &[1.0, -2.0, 5.0]).unwrap(), true);
    let y = t.add(x, x).unwrap();
    let g = t.backward(t.sum(y)).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0; 3]);
}

#[test]
fn second_backward_is_a_state_error() {
    let store = ParamStore::<f64>::new();
    let t = Tape::new(&store);
    let x = t.input(Tensor::ones([2]), true);
    let l = t.sum(x);
    t.backward(l).unwrap();
    assert!(matches!(t.backward(l), Err(sardino::Error::State(_))));
}

#[test]
fn backward_requires_scalar() {
    let store = ParamStore::<f64>::new();
    let t = Tape::new(&store);
    let x = t.input(Tensor::ones([2]), true);
    assert!(t.backward(x).is_err());
}

#[test]
fn inference_tape_records_nothing() {
    let store = ParamStore::<f32>::new();
    let t = Tape::inference(&store);
    let x = t.input(Tensor::ones([4]), true);
    let y = t.gelu(x);
    let _ = t.sum(y);
    assert_eq!(t.recorded_ops(), 0);
    assert!(!t.requires_grad(x));
}

#[test]
fn ops_are_deterministic() {
    let x = random(&[2, 3, 8, 8], 131).cast::<f32>();
    let w = random(&[6, 3, 3, 3], 132).cast::<f32>();
    let run = || {
        let store = ParamStore::<f32>::new();
        let t = Tape::new(&store);
        let xv = t.input(x.clone(), true);
        let wv = t.input(w.clone(), true);
        let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = t.upsample2x(t.gelu(y)).unwrap();
        let loss = t.mean(t.mul(y, y).unwrap());
        let g = t.backward(loss).unwrap();
        (t.value(y).as_ref().clone(), g.get(wv).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}
