use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Contracts an op's output with fixed random weights so every output
/// element contributes to the scalar loss.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = g.shape(y);
    let w = g.constant(random_tensor(&mut rng, &[r, c]));
    let p = g.mul(y, w).unwrap();
    g.sum(p, None)
}

type Build = fn(&mut Graph, &[Var]) -> Var;

fn check_op(name: &str, shapes: &[&[usize]], mode: Mode, build: Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut params = ParamSet::new();
    for (i, s) in shapes.iter().enumerate() {
        params.insert(format!("x{i}"), random_tensor(&mut rng, s)).unwrap();
    }
    let loss = |p: &ParamSet| -> Result<(Graph, Var), ComputeError> {
        let mut g = Graph::new(mode);
        let xs: Vec<Var> = (0..shapes.len())
            .map(|i| g.param(p, &format!("x{i}")).unwrap())
            .collect();
        let y = build(&mut g, &xs);
        let l = weighted_sum(&mut g, y, 99);
        Ok((g, l))
    };
    let report = finite_diff_check(&params, loss, 1e-5, 1e-6).unwrap();
    assert!(
        report.passed(),
        "{name}: max rel err {} at {:?}",
        report.max_rel_err,
        report.worst_param
    );
    assert!(report.checked > 0, "{name}: nothing checked");
}

#[test]
fn relu_of_negative_is_zero_with_zero_gradient() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::scalar(-1.0)).unwrap();
    let mut g = Graph::new(Mode::Train);
    let x = g.param(&p, "x").unwrap();
    let y = g.relu(x);
    assert_eq!(g.value(y).item(), 0.0);
    let grads = g.gradients(y, &p).unwrap();
    assert_eq!(grads.get("x").unwrap().item(), 0.0);
}

#[test]
fn softmax_of_equal_entries_is_uniform() {
    let mut g = Graph::new(Mode::Train);
    let x = g.constant(Tensor::row(vec![0.0, 0.0]));
    let y = g.softmax(x, 1);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_shapes() {
    let mut g = Graph::new(Mode::Train);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 4]));
    let c = g.constant(Tensor::zeros(&[4, 4]));
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(ab), (2, 4));
    let err = g.matmul(a, c).unwrap_err();
    assert_eq!(
        err,
        ComputeError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![4, 4]
        }
    );
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 4]"));
}

#[test]
fn quadratic_gradient() {
    let mut p = ParamSet::new();
    p.insert("theta", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut g = Graph::new(Mode::Train);
    let t = g.param(&p, "theta").unwrap();
    let sq = g.square(t);
    let l = g.sum(sq, None);
    let grads = g.gradients(l, &p).unwrap();
    assert_eq!(grads.get("theta").unwrap().data(), &[2.0, 4.0]);
    assert_eq!(grads.get("theta").unwrap().shape(), &[2]);
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let mut p = ParamSet::new();
    p.insert("theta", Tensor::vector(vec![1.0, 2.0])).unwrap();
    p.insert("other", Tensor::zeros(&[2, 2])).unwrap();
    let mut g = Graph::new(Mode::Train);
    let t = g.param(&p, "theta").unwrap();
    let c = g.constant(Tensor::scalar(3.0));
    let _ = t;
    let l = g.square(c);
    let grads = g.gradients(l, &p).unwrap();
    assert!(grads.same_layout(&p));
    assert_eq!(grads.global_norm(), 0.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new(Mode::Train);
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(
        g.backward(x),
        Err(ComputeError::NonScalarLoss(_))
    ));
}

#[test]
fn non_finite_values_name_the_first_offending_op() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::scalar(1000.0)).unwrap();
    let mut g = Graph::new(Mode::Train);
    let x = g.param(&p, "x").unwrap();
    let e = g.exp(x);
    let s = g.scale(e, 0.0);
    let l = g.tanh(s);
    match g.gradients(l, &p) {
        Err(ComputeError::NonFinite { op, .. }) => assert_eq!(op, "exp"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn two_layer_tanh_net_matches_finite_differences() {
    // 2 -> 4 -> 2 with biases: 8 + 4 + 8... trimmed to 20 scalars total.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = ParamSet::new();
    p.insert("w1", random_tensor(&mut rng, &[2, 4])).unwrap();
    p.insert("b1", random_tensor(&mut rng, &[4])).unwrap();
    p.insert("w2", random_tensor(&mut rng, &[4, 2])).unwrap();
    assert_eq!(p.scalar_count(), 20);
    let x = random_tensor(&mut rng, &[5, 2]);
    let loss = |p: &ParamSet| -> Result<(Graph, Var), ComputeError> {
        let mut g = Graph::new(Mode::Train);
        let xv = g.constant(x.clone());
        let w1 = g.param(p, "w1")?;
        let b1 = g.param(p, "b1")?;
        let w2 = g.param(p, "w2")?;
        let h = g.linear(xv, w1, Some(b1))?;
        let h = g.tanh(h);
        let o = g.matmul(h, w2)?;
        let o = g.tanh(o);
        let sq = g.square(o);
        let l = g.sum(sq, None);
        Ok((g, l))
    };
    let report = finite_diff_check(&p, loss, 1e-5, 1e-6).unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.checked, 20);
}

#[test]
fn quadratic_check_is_tight() {
    let mut p = ParamSet::new();
    p.insert("theta", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
    let loss = |p: &ParamSet| -> Result<(Graph, Var), ComputeError> {
        let mut g = Graph::new(Mode::Train);
        let t = g.param(p, "theta")?;
        let sq = g.square(t);
        let l = g.sum(sq, None);
        Ok((g, l))
    };
    let report = finite_diff_check(&p, loss, 1e-5, 1e-9).unwrap();
    assert!(report.max_rel_err < 1e-9, "{report:?}");
}

#[test]
fn relu_kink_is_excluded_not_failed() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::vector(vec![0.0, 1.5])).unwrap();
    let loss = |p: &ParamSet| -> Result<(Graph, Var), ComputeError> {
        let mut g = Graph::new(Mode::Train);
        let x = g.param(p, "x")?;
        let r = g.relu(x);
        let l = g.sum(r, None);
        Ok((g, l))
    };
    let report = finite_diff_check(&p, loss, 1e-5, 1e-6).unwrap();
    assert_eq!(report.excluded_at_kink, vec!["x[0]".to_string()]);
    assert_eq!(report.checked, 1);
    assert!(report.passed());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamSet::new();
    p.insert("w", random_tensor(&mut rng, &[6, 6])).unwrap();
    let x = random_tensor(&mut rng, &[10, 6]);
    let run = || {
        let mut g = Graph::new(Mode::Train);
        let xv = g.constant(x.clone());
        let w = g.param(&p, "w").unwrap();
        let h = g.matmul(xv, w).unwrap();
        let h = g.softmax(h, 1);
        let l = g.mean(h, Some(0));
        let l = g.square(l);
        let l = g.sum(l, None);
        g.gradients(l, &p).unwrap()
    };
    let a = run();
    let b = run();
    let bits = |s: &ParamSet| -> Vec<u64> {
        s.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn max_ties_route_to_lowest_index() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap()).unwrap();
    let mut g = Graph::new(Mode::Train);
    let x = g.param(&p, "x").unwrap();
    let m = g.max(x, 0);
    let grads = g.gradients(m, &p).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[1.0, 0.0, 0.0]);
    assert!(g.at_kink());
}

#[test]
fn every_smooth_op_matches_finite_differences() {
    check_op("add", &[&[3, 4], &[3, 4]], Mode::Train, |g, x| g.add(x[0], x[1]).unwrap());
    check_op("add_row_broadcast", &[&[3, 4], &[4]], Mode::Train, |g, x| {
        g.add(x[0], x[1]).unwrap()
    });
    check_op("sub_col_broadcast", &[&[3, 4], &[3, 1]], Mode::Train, |g, x| {
        g.sub(x[0], x[1]).unwrap()
    });
    check_op("mul_scalar_broadcast", &[&[3, 4], &[]], Mode::Train, |g, x| {
        g.mul(x[1], x[0]).unwrap()
    });
    check_op("mul", &[&[3, 4], &[3, 4]], Mode::Train, |g, x| g.mul(x[0], x[1]).unwrap());
    check_op("scale_shift", &[&[2, 3]], Mode::Train, |g, x| {
        let s = g.scale(x[0], -1.7);
        g.add_scalar(s, 0.3)
    });
    check_op("matmul", &[&[3, 4], &[4, 2]], Mode::Train, |g, x| g.matmul(x[0], x[1]).unwrap());
    check_op("linear", &[&[5, 3], &[3, 4], &[4]], Mode::Train, |g, x| {
        g.linear(x[0], x[1], Some(x[2])).unwrap()
    });
    check_op("transpose", &[&[3, 4], &[3, 2]], Mode::Train, |g, x| {
        let t = g.transpose(x[0]);
        g.matmul(t, x[1]).unwrap()
    });
    check_op("tanh", &[&[3, 4]], Mode::Train, |g, x| g.tanh(x[0]));
    check_op("softplus", &[&[3, 4]], Mode::Train, |g, x| g.softplus(x[0]));
    check_op("exp", &[&[3, 4]], Mode::Train, |g, x| g.exp(x[0]));
    check_op("square", &[&[3, 4]], Mode::Train, |g, x| g.square(x[0]));
    check_op("softmax_rows", &[&[3, 4]], Mode::Train, |g, x| g.softmax(x[0], 1));
    check_op("softmax_cols", &[&[3, 4]], Mode::Train, |g, x| g.softmax(x[0], 0));
    check_op("layer_norm", &[&[3, 5]], Mode::Train, |g, x| g.layer_norm(x[0], 1e-5));
    check_op("batch_norm_train", &[&[6, 3], &[3], &[3]], Mode::Train, |g, x| {
        let rm = Tensor::zeros(&[3]);
        let rv = Tensor::full(&[3], 1.0);
        g.batch_norm(x[0], x[1], x[2], &rm, &rv, 1e-5).unwrap()
    });
    check_op("batch_norm_eval", &[&[6, 3], &[3], &[3]], Mode::Eval, |g, x| {
        let rm = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let rv = Tensor::vector(vec![0.5, 1.5, 2.0]);
        g.batch_norm(x[0], x[1], x[2], &rm, &rv, 1e-5).unwrap()
    });
    check_op("sum_axes", &[&[3, 4]], Mode::Train, |g, x| {
        let a = g.sum(x[0], Some(0));
        let b = g.sum(x[0], Some(1));
        let t = g.transpose(b);
        let ab = g.matmul(t, x[0]).unwrap();
        g.add(ab, a).unwrap()
    });
    check_op("mean_axes", &[&[3, 4]], Mode::Train, |g, x| {
        let a = g.mean(x[0], Some(0));
        let b = g.mean(x[0], None);
        g.mul(a, b).unwrap()
    });
    check_op("max_over_rows", &[&[5, 3]], Mode::Train, |g, x| g.max(x[0], 0));
    check_op("max_over_cols", &[&[5, 3]], Mode::Train, |g, x| g.max(x[0], 1));
    check_op("concat_rows", &[&[2, 3], &[4, 3]], Mode::Train, |g, x| {
        g.concat(&[x[0], x[1]], 0).unwrap()
    });
    check_op("concat_cols", &[&[2, 3], &[2, 1]], Mode::Train, |g, x| {
        g.concat(&[x[0], x[1]], 1).unwrap()
    });
    check_op("repeat_rows", &[&[2, 3]], Mode::Train, |g, x| g.repeat_rows(x[0], 3));
    check_op("repeat_each_row", &[&[2, 3]], Mode::Train, |g, x| g.repeat_each_row(x[0], 3));
    check_op("block_trace", &[&[6, 3]], Mode::Train, |g, x| g.block_trace(x[0], 3).unwrap());
    check_op("clamp_interior", &[&[3, 4]], Mode::Train, |g, x| g.clamp(x[0], -5.0, 5.0));
    check_op("relu_off_kink", &[&[3, 4]], Mode::Train, |g, x| g.relu(x[0]));
}

#[test]
fn block_trace_sums_diagonal_blocks() {
    // Two points, d = 2: blocks [[a, b], [c, d]] per point.
    let u = Tensor::matrix(4, 2, vec![1.0, 9.0, 2.0, 9.0, 9.0, 10.0, 9.0, 20.0]).unwrap();
    let mut g = Graph::new(Mode::Train);
    let v = g.constant(u);
    let t = g.block_trace(v, 2).unwrap();
    assert_eq!(g.value(t).data(), &[11.0, 22.0]);
}

#[test]
fn layer_norm_rows_have_zero_mean() {
    let mut g = Graph::new(Mode::Train);
    let x = g.constant(Tensor::row(vec![1.0, 3.0]));
    let y = g.layer_norm(x, 1e-5);
    let v = g.value(y).data();
    assert!((v[0] + 0.999995).abs() < 1e-6 && (v[1] - 0.999995).abs() < 1e-6);
}

#[test]
fn op_catalog_is_complete() {
    for op in ["matmul", "batch_norm", "layer_norm", "softmax", "max", "concat", "softplus"] {
        assert!(op_set().contains(&op), "{op}");
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-20.0f64..20.0, 12)) {
            let mut g = Graph::new(Mode::Train);
            let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
            let y = g.softmax(x, 1);
            let t = g.value(y);
            for i in 0..3 {
                let row = t.row_slice(i);
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-7);
            }
        }
    }
}
