mod common;

use common::gradcheck::{away_from_zero, check, uniform, REL_TOL};
use detnas::tensor::{sgd_step, Graph, Gradients, Mode, ParamStore, Sgd, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn identity_pointwise_conv_is_identity() {
    let mut r = rng(1);
    let x = uniform(&[2, 3, 5, 4], -2.0, 2.0, &mut r);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(x.clone());
    let wv = g.input(w);
    let bv = g.input(Tensor::zeros(&[3]));
    let y = g.conv2d(xv, wv, Some(bv), 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn eval_bn_with_unit_stats_is_identity() {
    let mut r = rng(2);
    let x = uniform(&[2, 4, 3, 3], -3.0, 3.0, &mut r);
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(x.clone());
    let gamma = g.input(Tensor::full(&[4], 1.0));
    let beta = g.input(Tensor::zeros(&[4]));
    let y = g.batch_norm(xv, gamma, beta, &[0.0; 4], &[1.0; 4], 0.0, "bn").unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn strided_conv_output_shape() {
    let out_dim = |h: usize, p: usize, k: usize, s: usize| (h + 2 * p - k) / s + 1;
    let mut r = rng(3);
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(uniform(&[1, 8, 16, 16], -1.0, 1.0, &mut r));
    let w = g.input(uniform(&[16, 8, 3, 3], -1.0, 1.0, &mut r));
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 16, out_dim(16, 1, 3, 2), out_dim(16, 1, 3, 2)]);
    assert_eq!(g.shape(y), &[1, 16, 8, 8]);
}

#[test]
fn shape_mismatch_rejected_before_compute() {
    let mut g = Graph::new(Mode::Train);
    let x = g.input(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.leaf(Tensor::zeros(&[2, 5, 3, 3]));
    let before = g.len();
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(TensorError::Shape { .. })));
    assert_eq!(g.len(), before);
    let a = g.input(Tensor::zeros(&[2, 2]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    assert!(g.add(a, b).is_err());
}

#[test]
fn non_finite_names_the_node() {
    let mut g = Graph::new(Mode::Train);
    let x = g.input(Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap());
    let big = g.scale(x, 1e200).unwrap();
    let err = g.mul(big, big).unwrap_err();
    match err {
        TensorError::NonFinite { node, op } => {
            assert_eq!(node, 2);
            assert_eq!(op, "mul");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn sum_gives_all_ones_and_constant_loss_gives_zeros() {
    let mut r = rng(4);
    let mut g = Graph::new(Mode::Train);
    let x = g.leaf(uniform(&[3, 4], -1.0, 1.0, &mut r));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

    let mut params = ParamStore::new();
    params.insert("w", uniform(&[5], -1.0, 1.0, &mut r));
    let mut g = Graph::new(Mode::Train);
    let w = params.bind(&mut g, "w").unwrap();
    let zero = g.scale(w, 0.0).unwrap();
    let loss = g.sum(zero).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads["w"].iter().all(|&v| v == 0.0));
}

#[test]
fn backward_usage_errors() {
    let mut g = Graph::new(Mode::Eval);
    let x = g.leaf(Tensor::zeros(&[2]));
    let s = g.sum(x).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::Usage(_))));

    let mut g = Graph::new(Mode::Train);
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(TensorError::Usage(_))));
}

#[test]
fn sgd_arithmetic() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::scalar(1.0));
    let mut grads = Gradients::new();
    grads.insert("w".into(), vec![1.0]);
    sgd_step(&mut p, &grads, 0.0, 0.9, 1e-4).unwrap();
    assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    sgd_step(&mut p, &grads, 0.1, 0.0, 0.0).unwrap();
    assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);

    let mut opt = Sgd::new(vec!["w".into(), "missing".into()], 0.0, 0.0);
    assert!(matches!(opt.step(&mut p, &grads, 0.1), Err(TensorError::Usage(_))));
}

// ---- finite-difference checks, one per op kind ---------------------------

#[test]
fn gradcheck_conv_bias_stride() {
    let mut r = rng(10);
    for &(k, s) in &[(3, 1), (3, 2), (1, 1), (1, 2)] {
        let x = uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut r);
        let w = uniform(&[4, 3, k, k], -1.0, 1.0, &mut r);
        let b = uniform(&[4], -1.0, 1.0, &mut r);
        let err = check(&[x, w, b], 11, 80, |g, v| g.conv2d(v[0], v[1], Some(v[2]), s, k / 2));
        assert!(err < REL_TOL, "k={k} s={s} err={err}");
    }
}

#[test]
fn gradcheck_batchnorm_train() {
    let mut r = rng(12);
    let x = uniform(&[3, 2, 3, 3], -2.0, 2.0, &mut r);
    let gamma = uniform(&[2], 0.5, 1.5, &mut r);
    let beta = uniform(&[2], -0.5, 0.5, &mut r);
    let err = check(&[x, gamma, beta], 13, 80, |g, v| {
        g.batch_norm(v[0], v[1], v[2], &[0.0; 2], &[1.0; 2], 1e-5, "bn")
    });
    assert!(err < REL_TOL, "train err={err}");
}

#[test]
fn gradcheck_elementwise_family() {
    let mut r = rng(15);
    let a = away_from_zero(&[3, 5], 1e-3, &mut r);
    let b = away_from_zero(&[3, 5], 1e-3, &mut r);
    let ops: Vec<(&str, Box<dyn Fn(&mut Graph, &[detnas::tensor::Var]) -> detnas::tensor::Result<detnas::tensor::Var>>)> = vec![
        ("relu", Box::new(|g, v| g.relu(v[0]))),
        ("add", Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", Box::new(|g, v| g.scale(v[0], -2.5))),
        ("abs", Box::new(|g, v| g.abs(v[0]))),
        ("square", Box::new(|g, v| g.square(v[0]))),
        ("smooth_l1", Box::new(|g, v| {
            let s = g.scale(v[0], 1.7)?;
            g.smooth_l1(s)
        })),
        ("sum", Box::new(|g, v| g.sum(v[0]))),
    ];
    for (name, f) in ops {
        let err = check(&[a.clone(), b.clone()], 16, 64, |g, v| f(g, v));
        assert!(err < REL_TOL, "{name}: {err}");
    }
}

#[test]
fn gradcheck_log_softmax_family() {
    let mut r = rng(17);
    let x = uniform(&[4, 5], -2.0, 2.0, &mut r);
    assert!(check(&[x.clone()], 18, 64, |g, v| g.softmax(v[0])) < REL_TOL);
    assert!(check(&[x.clone()], 19, 64, |g, v| g.log_softmax(v[0])) < REL_TOL);
    let p = uniform(&[4, 5], 0.05, 1.0, &mut r);
    assert!(check(&[p], 20, 64, |g, v| g.log_clamp(v[0], 1e-12)) < REL_TOL);
}

#[test]
fn gradcheck_pooling_and_layout() {
    let mut r = rng(21);
    let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    assert!(check(&[x.clone()], 22, 96, |g, v| g.max_pool(v[0], 2)) < REL_TOL);
    assert!(check(&[x.clone()], 23, 96, |g, v| g.avg_pool(v[0], 2)) < REL_TOL);
    assert!(check(&[x.clone()], 24, 96, |g, v| g.upsample(v[0], 2)) < REL_TOL);
    assert!(check(&[x.clone()], 25, 96, |g, v| g.global_avg_pool(v[0])) < REL_TOL);
    assert!(check(&[x.clone()], 26, 96, |g, v| g.nchw_to_rows(v[0])) < REL_TOL);
    assert!(check(&[x.clone()], 27, 96, |g, v| {
        let rows = g.nchw_to_rows(v[0])?;
        g.gather_rows(rows, &[5, 0, 5, 31])
    }) < REL_TOL);
    assert!(check(&[x], 28, 96, |g, v| g.reshape(v[0], &[6, 16])) < REL_TOL);
}

#[test]
fn gradcheck_linear_and_matmul() {
    let mut r = rng(29);
    let x = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let w = uniform(&[5, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[5], -1.0, 1.0, &mut r);
    assert!(check(&[x.clone(), w, b], 30, 64, |g, v| g.linear(v[0], v[1], Some(v[2]))) < REL_TOL);
    let m = uniform(&[4, 2], -1.0, 1.0, &mut r);
    assert!(check(&[x, m], 31, 64, |g, v| g.matmul(v[0], v[1])) < REL_TOL);
}

/// Two-layer conv-BN-ReLU net: every parameter against central differences.
#[test]
fn gradcheck_conv_bn_relu_stack() {
    let mut r = rng(32);
    let x = uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut r);
    let w1 = Tensor::he_normal(&[4, 3, 3, 3], &mut r);
    let g1 = uniform(&[4], 0.5, 1.5, &mut r);
    let b1 = uniform(&[4], -0.2, 0.2, &mut r);
    let w2 = Tensor::he_normal(&[5, 4, 3, 3], &mut r);
    let g2 = uniform(&[5], 0.5, 1.5, &mut r);
    let b2 = uniform(&[5], -0.2, 0.2, &mut r);
    let err = check(&[x, w1, g1, b1, w2, g2, b2], 33, 40, |g, v| {
        let h = g.conv2d(v[0], v[1], None, 1, 1)?;
        let h = g.batch_norm(h, v[2], v[3], &[0.0; 4], &[1.0; 4], 1e-5, "bn1")?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, v[4], None, 2, 1)?;
        let h = g.batch_norm(h, v[5], v[6], &[0.0; 5], &[1.0; 5], 1e-5, "bn2")?;
        g.relu(h)
    });
    assert!(err < REL_TOL, "err={err}");
}

#[test]
fn bn_train_eval_consistency_after_freezing_stats() {
    let mut r = rng(34);
    let x = uniform(&[4, 3, 5, 5], -2.0, 3.0, &mut r);
    let mut params = ParamStore::new();
    params.insert_bn("bn", 3);
    params.insert("bn.gamma", uniform(&[3], 0.5, 1.5, &mut r));
    let mut g = Graph::new(Mode::Train);
    let xv = g.input(x.clone());
    let y_train = params.batch_norm(&mut g, xv, "bn", 1e-5).unwrap();
    params.update_bn_stats(g.bn_stats(), 1.0).unwrap();
    let mut ge = Graph::new(Mode::Eval);
    let xe = ge.input(x);
    let y_eval = params.batch_norm(&mut ge, xe, "bn", 1e-5).unwrap();
    assert!(g.value(y_train).max_abs_diff(ge.value(y_eval)) < 1e-10);
}

#[test]
fn training_replay_is_bitwise_identical() {
    fn run() -> ParamStore {
        let mut r = rng(35);
        let mut params = ParamStore::new();
        params.insert("w", Tensor::he_normal(&[4, 3, 3, 3], &mut r));
        params.insert_bn("bn", 4);
        let mut opt = Sgd::new(params.trainable_names(), 0.9, 1e-4);
        let mut data = rng(36);
        for _ in 0..10 {
            let x = uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut data);
            let mut g = Graph::new(Mode::Train);
            let xv = g.input(x);
            let w = params.bind(&mut g, "w").unwrap();
            let h = g.conv2d(xv, w, None, 1, 1).unwrap();
            let h = params.batch_norm(&mut g, h, "bn", 1e-5).unwrap();
            let h = g.relu(h).unwrap();
            let sq = g.square(h).unwrap();
            let loss = g.sum(sq).unwrap();
            let grads = g.backward(loss).unwrap();
            let stats = g.bn_stats().to_vec();
            opt.step(&mut params, &grads, 0.01).unwrap();
            params.update_bn_stats(&stats, 0.1).unwrap();
        }
        params
    }
    assert!(run().bitwise_eq(&run()));
}

#[test]
fn he_init_is_seeded() {
    let a = Tensor::he_normal(&[8, 4, 3, 3], &mut rng(7));
    let b = Tensor::he_normal(&[8, 4, 3, 3], &mut rng(7));
    assert_eq!(a, b);
    let mut r = rng(8);
    let c = Tensor::he_normal(&[8, 4, 3, 3], &mut r);
    assert_ne!(a, c);
    let _: f64 = r.random();
}
