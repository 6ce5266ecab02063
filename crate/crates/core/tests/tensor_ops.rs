//! Per-operation contract tests for the tensor engine: hand-computed values
//! plus finite-difference oracles for every differentiable op.

use tempora_core::rng::SplitMix64;
use tempora_core::tensor::{grad_check, Graph, SgdMomentum, Tensor};
use tempora_core::CoreError;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

fn random64(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------- add / sub

#[test]
fn add_values_and_identity() {
    let mut g = Graph::<f64>::new(0);
    let a = g.constant(t64(&[2], &[1.0, 2.0]));
    let b = g.constant(t64(&[2], &[3.0, 4.0]));
    let out = g.add(a, b).unwrap();
    assert_eq!(g.value(out).data(), &[4.0, 6.0]);

    let z = g.constant(Tensor::zeros(&[2]));
    let same = g.add(a, z).unwrap();
    assert_eq!(g.value(same).data(), g.value(a).data());
}

#[test]
fn add_shape_mismatch_reports_both_shapes() {
    let mut g = Graph::<f64>::new(0);
    let a = g.constant(Tensor::zeros(&[2]));
    let b = g.constant(Tensor::zeros(&[3]));
    match g.add(a, b) {
        Err(CoreError::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2]);
            assert_eq!(right, vec![3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn add_backward_passes_gradient_unchanged() {
    let mut g = Graph::<f64>::new(0);
    let a = g.leaf(t64(&[3], &[1.0, 2.0, 3.0]).requires_grad(true));
    let b = g.leaf(t64(&[3], &[4.0, 5.0, 6.0]).requires_grad(true));
    let s = g.add(a, b).unwrap();
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_linearity_add_matches_lone_grad() {
    // grad of (a+b) w.r.t. a equals grad of a alone under the same upstream.
    let weights = t64(&[3], &[0.5, -2.0, 1.5]);
    let mut g1 = Graph::<f64>::new(0);
    let a1 = g1.leaf(t64(&[3], &[1.0, 2.0, 3.0]).requires_grad(true));
    let b1 = g1.constant(t64(&[3], &[4.0, 5.0, 6.0]));
    let s = g1.add(a1, b1).unwrap();
    let w1 = g1.constant(weights.clone());
    let h1 = g1.hadamard(s, w1).unwrap();
    let loss1 = g1.sum(h1);
    g1.backward(loss1).unwrap();

    let mut g2 = Graph::<f64>::new(0);
    let a2 = g2.leaf(t64(&[3], &[1.0, 2.0, 3.0]).requires_grad(true));
    let w2 = g2.constant(weights);
    let h2 = g2.hadamard(a2, w2).unwrap();
    let loss2 = g2.sum(h2);
    g2.backward(loss2).unwrap();

    assert_eq!(g1.grad(a1).unwrap(), g2.grad(a2).unwrap());
}

#[test]
fn reuse_accumulates_gradients() {
    // loss = sum(y) + sum(y) -> grad(y) = 2*ones
    let mut g = Graph::<f64>::new(0);
    let y = g.leaf(t64(&[2], &[1.0, 4.0]).requires_grad(true));
    let s1 = g.sum(y);
    let s2 = g.sum(y);
    let loss = g.add(s1, s2).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(y).unwrap(), &[2.0, 2.0]);
}

// ------------------------------------------------------------------ hadamard

#[test]
fn hadamard_values_and_identity() {
    let mut g = Graph::<f64>::new(0);
    let a = g.constant(t64(&[2], &[2.0, 3.0]));
    let b = g.constant(t64(&[2], &[4.0, 5.0]));
    let out = g.hadamard(a, b).unwrap();
    assert_eq!(g.value(out).data(), &[8.0, 15.0]);

    let ones = g.constant(Tensor::ones(&[2]));
    let same = g.hadamard(a, ones).unwrap();
    assert_eq!(g.value(same).data(), g.value(a).data());
}

#[test]
fn hadamard_gradient_oracle() {
    let mut rng = SplitMix64::new(3);
    let a = random64(&[2, 3], &mut rng);
    let b = random64(&[2, 3], &mut rng);
    let err = grad_check(
        |g, vars| {
            let h = g.hadamard(vars[0], vars[1])?;
            Ok(g.sum(h))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

// -------------------------------------------------------------- scalar scale

#[test]
fn scalar_scale_values() {
    let mut g = Graph::<f64>::new(0);
    let alpha = g.constant(Tensor::scalar(2.0));
    let x = g.constant(t64(&[2], &[1.0, 3.0]));
    let out = g.scale_var(alpha, x).unwrap();
    assert_eq!(g.value(out).data(), &[2.0, 6.0]);

    let one = g.constant(Tensor::scalar(1.0));
    let same = g.scale_var(one, x).unwrap();
    assert_eq!(g.value(same).data(), g.value(x).data());
}

#[test]
fn scalar_scale_alpha_gradient() {
    // d/dalpha sum(alpha * x) with x = [1,1] is 2.
    let mut g = Graph::<f64>::new(0);
    let alpha = g.leaf(Tensor::scalar(0.7).requires_grad(true));
    let x = g.constant(t64(&[2], &[1.0, 1.0]));
    let s = g.scale_var(alpha, x).unwrap();
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(alpha).unwrap(), &[2.0]);

    let err = grad_check(
        |g, vars| {
            let s = g.scale_var(vars[0], vars[1])?;
            Ok(g.sum(s))
        },
        &[Tensor::scalar(0.7), t64(&[2], &[1.0, 1.0])],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

// -------------------------------------------------------------------- conv2d

#[test]
fn conv2d_ones_and_identity_kernel() {
    let mut g = Graph::<f64>::new(0);
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let out = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(out).data(), &[9.0]);

    let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
    let x2 = g.constant(t64(&[1, 1, 4, 4], &data));
    let ident = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let out2 = g.conv2d(x2, ident, None, 1, 0).unwrap();
    assert_eq!(g.value(out2).data(), g.value(x2).data());
}

#[test]
fn conv2d_output_extent_formula() {
    let mut g = Graph::<f64>::new(0);
    let x = g.constant(Tensor::ones(&[1, 2, 7, 5]));
    let w = g.constant(Tensor::ones(&[3, 2, 3, 3]));
    let out = g.conv2d(x, w, None, 2, 1).unwrap();
    // floor((7 + 2 - 3)/2) + 1 = 4, floor((5 + 2 - 3)/2) + 1 = 3
    assert_eq!(g.value(out).shape(), &[1, 3, 4, 3]);
}

#[test]
fn conv2d_rejects_channel_mismatch_and_big_kernel() {
    let mut g = Graph::<f64>::new(0);
    let x = g.constant(Tensor::ones(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::ones(&[1, 3, 3, 3]));
    assert!(matches!(
        g.conv2d(x, w, None, 1, 0),
        Err(CoreError::ChannelMismatch { .. })
    ));
    let w2 = g.constant(Tensor::ones(&[1, 2, 5, 5]));
    assert!(matches!(
        g.conv2d(x, w2, None, 1, 0),
        Err(CoreError::KernelTooLarge { .. })
    ));
}

#[test]
fn conv2d_gradient_oracle_all_inputs() {
    let mut rng = SplitMix64::new(5);
    let x = random64(&[2, 3, 5, 5], &mut rng);
    let w = random64(&[4, 3, 3, 3], &mut rng);
    let b = random64(&[4], &mut rng);
    let err = grad_check(
        |g, vars| {
            let y = g.conv2d(vars[0], vars[1], Some(vars[2]), 2, 1)?;
            Ok(g.sum(y))
        },
        &[x, w, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

// ---------------------------------------------------------------- batch norm

#[test]
fn batch_norm_eval_identity_configuration() {
    let mut g = Graph::<f64>::new(0);
    let mut rng = SplitMix64::new(8);
    let x = random64(&[2, 3, 4, 4], &mut rng);
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::ones(&[3]));
    let beta = g.constant(Tensor::zeros(&[3]));
    let mut rm = vec![0.0f64; 3];
    let mut rv = vec![1.0f64; 3];
    let out = g
        .batch_norm(xv, gamma, beta, &mut rm, &mut rv, false, 0.9, 1e-5)
        .unwrap();
    for (o, i) in g.value(out).data().iter().zip(x.data()) {
        assert!((o - i).abs() < 1e-4, "{o} vs {i}");
    }
    assert_eq!(rm, vec![0.0; 3], "eval mode leaves running stats untouched");
}

#[test]
fn batch_norm_train_normalizes_per_channel() {
    let mut g = Graph::<f64>::new(0);
    let mut rng = SplitMix64::new(9);
    let x = random64(&[4, 2, 3, 3], &mut rng);
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let mut rm = vec![0.0f64; 2];
    let mut rv = vec![1.0f64; 2];
    let out = g
        .batch_norm(xv, gamma, beta, &mut rm, &mut rv, true, 0.9, 1e-5)
        .unwrap();
    let data = g.value(out).data();
    let (n, c, hw) = (4, 2, 9);
    for ch in 0..c {
        let mut vals = Vec::new();
        for img in 0..n {
            vals.extend_from_slice(&data[(img * c + ch) * hw..(img * c + ch + 1) * hw]);
        }
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
    }
    // Running stats moved toward batch stats with momentum 0.9.
    assert!(rm.iter().all(|&m| m != 0.0));
}

#[test]
fn batch_norm_gradient_oracle() {
    let mut rng = SplitMix64::new(10);
    let x = random64(&[3, 2, 4, 4], &mut rng);
    let gamma = random64(&[2], &mut rng);
    let beta = random64(&[2], &mut rng);
    // Project onto fixed random weights so the loss is not invariant to the
    // normalization (a plain sum of squares of BN output nearly is).
    let probe = random64(&[3, 2, 4, 4], &mut rng);
    let err = grad_check(
        |g, vars| {
            let mut rm = vec![0.0f64; 2];
            let mut rv = vec![1.0f64; 2];
            let y = g.batch_norm(vars[0], vars[1], vars[2], &mut rm, &mut rv, true, 0.9, 1e-5)?;
            let pv = g.constant(probe.clone());
            let z = g.hadamard(y, pv)?;
            let zz = g.hadamard(z, z)?;
            Ok(g.sum(zz))
        },
        &[x, gamma, beta],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn batch_norm_eval_gradient_oracle() {
    let mut rng = SplitMix64::new(19);
    let x = random64(&[2, 2, 3, 3], &mut rng);
    let gamma = random64(&[2], &mut rng);
    let beta = random64(&[2], &mut rng);
    let err = grad_check(
        |g, vars| {
            let mut rm = vec![0.2f64, -0.1];
            let mut rv = vec![0.8f64, 1.3];
            let y = g.batch_norm(vars[0], vars[1], vars[2], &mut rm, &mut rv, false, 0.9, 1e-5)?;
            let sq = g.hadamard(y, y)?;
            Ok(g.sum(sq))
        },
        &[x, gamma, beta],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

// ----------------------------------------------- relu / pool / linear / drop

#[test]
fn relu_dropout_gap_basics() {
    let mut g = Graph::<f64>::new(0);
    let x = g.constant(t64(&[2], &[-1.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);

    let d = g.dropout(x, 0.0, true).unwrap();
    assert_eq!(d, x, "p=0 dropout is the identity");
    let d_eval = g.dropout(x, 0.5, false).unwrap();
    assert_eq!(d_eval, x, "eval-mode dropout is the identity");
    assert!(matches!(
        g.dropout(x, 1.0, true),
        Err(CoreError::InvalidDropout { .. })
    ));

    let c = g.constant(Tensor::full(&[2, 3, 4, 4], 2.5));
    let gap = g.global_avg_pool(c).unwrap();
    assert_eq!(g.value(gap).shape(), &[2, 3]);
    assert!(g.value(gap).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn dropout_train_mask_scales_survivors() {
    let mut g = Graph::<f64>::new(7);
    let x = g.leaf(Tensor::full(&[1000], 1.0).requires_grad(true));
    let d = g.dropout(x, 0.25, true).unwrap();
    let data = g.value(d).data();
    let survivors = data.iter().filter(|&&v| v != 0.0).count();
    assert!(data.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    assert!((survivors as f64 / 1000.0 - 0.75).abs() < 0.05);

    // Same seed, rebuilt graph: identical mask.
    let mut g2 = Graph::<f64>::new(7);
    let x2 = g2.leaf(Tensor::full(&[1000], 1.0).requires_grad(true));
    let d2 = g2.dropout(x2, 0.25, true).unwrap();
    assert_eq!(g.value(d).data(), g2.value(d2).data());
}

#[test]
fn max_pool_values_and_gradient() {
    let mut g = Graph::<f64>::new(0);
    let x = g.constant(t64(
        &[1, 1, 4, 4],
        &[
            1.0, 2.0, 5.0, 4.0, //
            3.0, 0.0, 1.0, 1.0, //
            0.0, 1.0, 2.0, 3.0, //
            4.0, 2.0, 1.0, 9.0,
        ],
    ));
    let p = g.max_pool(x, 2, 2).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 1, 2, 2]);
    assert_eq!(g.value(p).data(), &[3.0, 5.0, 4.0, 9.0]);

    let mut rng = SplitMix64::new(12);
    let xr = random64(&[2, 2, 4, 4], &mut rng);
    let err = grad_check(
        |g, vars| {
            let p = g.max_pool(vars[0], 2, 2)?;
            let sq = g.hadamard(p, p)?;
            Ok(g.sum(sq))
        },
        &[xr],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn linear_gradient_oracle() {
    let mut rng = SplitMix64::new(13);
    let x = random64(&[3, 4], &mut rng);
    let w = random64(&[4, 2], &mut rng);
    let b = random64(&[2], &mut rng);
    let err = grad_check(
        |g, vars| {
            let y = g.linear(vars[0], vars[1], vars[2])?;
            let sq = g.hadamard(y, y)?;
            Ok(g.sum(sq))
        },
        &[x, w, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

// ---------------------------------------------------------------ial ce loss

#[test]
fn cross_entropy_uniform_logits_is_ln_c() {
    for c in [2usize, 5, 10] {
        let mut g = Graph::<f64>::new(0);
        let logits = g.constant(Tensor::full(&[3, c], 0.4));
        let loss = g.softmax_cross_entropy(logits, &[0, 1, c - 1]).unwrap();
        let expected = (c as f64).ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = SplitMix64::new(14);
    let logits = random64(&[4, 3], &mut rng);
    let labels = [2usize, 0, 1, 1];
    let mut g = Graph::<f64>::new(0);
    let lv = g.leaf(logits.clone().requires_grad(true));
    let loss = g.softmax_cross_entropy(lv, &labels).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(lv).unwrap();

    // Manual softmax in double precision.
    for row in 0..4 {
        let vals = &logits.data()[row * 3..(row + 1) * 3];
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for j in 0..3 {
            let mut expected = exps[j] / denom;
            if j == labels[row] {
                expected -= 1.0;
            }
            expected /= 4.0;
            assert!(
                (grad[row * 3 + j] - expected).abs() < 1e-10,
                "row {row} col {j}"
            );
        }
    }
}

#[test]
fn cross_entropy_gradient_oracle() {
    let mut rng = SplitMix64::new(15);
    let logits = random64(&[3, 4], &mut rng);
    let err = grad_check(
        |g, vars| g.softmax_cross_entropy(vars[0], &[1, 3, 0]),
        &[logits],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let mut g = Graph::<f64>::new(0);
    let logits = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        g.softmax_cross_entropy(logits, &[0, 3]),
        Err(CoreError::LabelOutOfRange { label: 3, classes: 3 })
    ));
}

// -------------------------------------------------- select / group_mean / sum

#[test]
fn select_rows_and_group_mean() {
    let mut g = Graph::<f64>::new(0);
    let x = g.constant(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let sel = g.select_rows(x, &[2, 0]).unwrap();
    assert_eq!(g.value(sel).data(), &[5.0, 6.0, 1.0, 2.0]);

    let pairs = g.constant(t64(&[2, 2], &[1.0, 3.0, 3.0, 5.0]));
    let mean = g.group_mean(pairs, 1).unwrap();
    assert_eq!(g.value(mean).data(), &[2.0, 4.0]);
}

#[test]
fn select_rows_gradient_scatters_and_accumulates() {
    let mut g = Graph::<f64>::new(0);
    let x = g.leaf(t64(&[3, 1], &[1.0, 2.0, 3.0]).requires_grad(true));
    // Row 1 selected twice: its gradient doubles.
    let sel = g.select_rows(x, &[1, 1, 2]).unwrap();
    let loss = g.sum(sel);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 2.0, 1.0]);
}

#[test]
fn group_mean_gradient_oracle() {
    let mut rng = SplitMix64::new(16);
    let x = random64(&[6, 3], &mut rng);
    let err = grad_check(
        |g, vars| {
            let m = g.group_mean(vars[0], 2)?;
            let sq = g.hadamard(m, m)?;
            Ok(g.sum(sq))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::<f64>::new(0);
    let x = g.leaf(t64(&[2], &[1.0, 2.0]).requires_grad(true));
    assert!(matches!(
        g.backward(x),
        Err(CoreError::LossNotScalar { .. })
    ));
}

// -------------------------------------------------------------- determinism

#[test]
fn identical_runs_are_bit_identical() {
    let run = || {
        let mut rng = SplitMix64::new(77);
        let x = random64(&[2, 3, 6, 6], &mut rng);
        let w = random64(&[4, 3, 3, 3], &mut rng);
        let b = random64(&[4], &mut rng);
        let mut g = Graph::<f64>::new(42);
        let xv = g.leaf(x.requires_grad(true));
        let wv = g.leaf(w.requires_grad(true));
        let bv = g.leaf(b.requires_grad(true));
        let y = g.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
        let r = g.relu(y);
        let d = g.dropout(r, 0.3, true).unwrap();
        let pool = g.global_avg_pool(d).unwrap();
        let loss = g.softmax_cross_entropy(pool, &[0, 2]).unwrap();
        g.backward(loss).unwrap();
        (
            g.value(loss).item(),
            g.grad(xv).unwrap().to_vec(),
            g.grad(wv).unwrap().to_vec(),
        )
    };
    let (l1, gx1, gw1) = run();
    let (l2, gx2, gw2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}

// ------------------------------------------------------- two-layer net check

#[test]
fn two_layer_net_gradient_oracle() {
    let mut rng = SplitMix64::new(21);
    let x = random64(&[2, 5], &mut rng);
    let w1 = random64(&[5, 4], &mut rng);
    let b1 = random64(&[4], &mut rng);
    let w2 = random64(&[4, 3], &mut rng);
    let b2 = random64(&[3], &mut rng);
    let err = grad_check(
        |g, vars| {
            let h = g.linear(vars[0], vars[1], vars[2])?;
            let h = g.relu(h);
            let logits = g.linear(h, vars[3], vars[4])?;
            g.softmax_cross_entropy(logits, &[2, 0])
        },
        &[x, w1, b1, w2, b2],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

// ------------------------------------------------------------ optimizer step

#[test]
fn sgd_trains_a_linear_fit() {
    use tempora_core::params::{ParamBinding, ParamStore};
    // Fit y = 2x with one weight; loss decreases monotonically-ish.
    let mut store = ParamStore::<f64>::new();
    let w = store.add_weight("w", Tensor::scalar(0.0)).unwrap();
    let mut opt = SgdMomentum::new(0.01, 0.5, 0.0);
    let mut last = f64::INFINITY;
    for _ in 0..80 {
        let mut g = Graph::new(0);
        let mut binding = ParamBinding::new();
        let wv = binding.bind(&mut g, &store, w);
        let x = g.constant(t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let target = g.constant(t64(&[4], &[2.0, 4.0, 6.0, 8.0]));
        let pred = g.scale_var(wv, x).unwrap();
        let diff = g.sub(pred, target).unwrap();
        let sq = g.hadamard(diff, diff).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        binding.harvest(&g, &mut store);
        opt.step(&mut store).unwrap();
        last = g.value(loss).item();
    }
    assert!(last < 1e-6, "final loss {last}");
    assert!((store.get(w).item() - 2.0).abs() < 1e-3);
}
