//! Finite-difference checks for every graph primitive, in f64.

use auscult_tensor::gradcheck::{check, GradCheckConfig};
use auscult_tensor::{Axis, Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks are never straddled by ±h.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct sensitivity.
fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().sum::<usize>() as u64 + 99);
    let w = g.constant(rand_tensor(&shape, &mut rng));
    let m = g.mul(out, w)?;
    Ok(g.sum_all(m))
}

fn run<F>(store: &ParamStore<f64>, inputs: Vec<Tensor<f64>>, training: bool, f: F)
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        training,
        ..GradCheckConfig::default()
    };
    let report = check(store, &inputs, &cfg, |g, s, v| {
        let out = f(g, s, v)?;
        project(g, out)
    })
    .unwrap();
    assert!(report.checked > 0);
    assert!(
        report.passes(TOL),
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

fn empty() -> ParamStore<f64> {
    ParamStore::new()
}

#[test]
fn elementwise_binary() {
    let mut r = rng();
    let ins = vec![rand_tensor(&[3, 4], &mut r), rand_tensor(&[3, 4], &mut r)];
    run(&empty(), ins.clone(), true, |g, _, v| g.add(v[0], v[1]));
    run(&empty(), ins.clone(), true, |g, _, v| g.sub(v[0], v[1]));
    run(&empty(), ins, true, |g, _, v| g.mul(v[0], v[1]));
}

#[test]
fn scalar_ops() {
    let mut r = rng();
    let ins = vec![rand_tensor(&[2, 5], &mut r)];
    run(&empty(), ins.clone(), true, |g, _, v| Ok(g.scale(v[0], -1.7)));
    run(&empty(), ins.clone(), true, |g, _, v| Ok(g.add_scalar(v[0], 0.3)));
    run(&empty(), ins.clone(), true, |g, _, v| Ok(g.exp(v[0])));
    run(&empty(), ins.clone(), true, |g, _, v| {
        let s = g.sum_all(v[0]);
        Ok(g.scale(s, 1.0))
    });
    run(&empty(), ins, true, |g, _, v| Ok(g.mean_all(v[0])));
}

#[test]
fn log_on_positive_values() {
    let mut r = rng();
    let t = rand_tensor(&[3, 3], &mut r).map(|x| x.abs() + 0.5);
    run(&empty(), vec![t], true, |g, _, v| Ok(g.log(v[0])));
}

#[test]
fn relu_away_from_kink() {
    let mut r = rng();
    run(&empty(), vec![away_from_zero(&[4, 6], &mut r)], true, |g, _, v| {
        Ok(g.relu(v[0]))
    });
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut g = Graph::<f64>::new(true, 0);
    let x = g.variable(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    let s = g.sum_all(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn broadcasts() {
    let mut r = rng();
    let ins = vec![rand_tensor(&[3, 4], &mut r), rand_tensor(&[4], &mut r)];
    run(&empty(), ins, true, |g, _, v| g.add_row(v[0], v[1]));
    let ins = vec![rand_tensor(&[3, 4], &mut r), rand_tensor(&[3], &mut r)];
    run(&empty(), ins, true, |g, _, v| g.add_col(v[0], v[1]));
}

#[test]
fn logsumexp_both_axes() {
    let mut r = rng();
    let ins = vec![rand_tensor(&[3, 5], &mut r).map(|x| 4.0 * x)];
    run(&empty(), ins.clone(), true, |g, _, v| g.logsumexp(v[0], Axis::Cols));
    run(&empty(), ins, true, |g, _, v| g.logsumexp(v[0], Axis::Rows));
}

#[test]
fn logsumexp_ignores_negative_infinity() {
    let mut g = Graph::<f64>::new(true, 0);
    let x = g.variable(Tensor::new(&[1, 3], vec![f64::NEG_INFINITY, 0.0, 0.0]).unwrap());
    let l = g.logsumexp(x, Axis::Cols).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    let s = g.sum_all(l);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.5, 0.5]);
}

#[test]
fn matmul_transpose_linear() {
    let mut r = rng();
    let ins = vec![rand_tensor(&[3, 4], &mut r), rand_tensor(&[4, 2], &mut r)];
    run(&empty(), ins, true, |g, _, v| g.matmul(v[0], v[1]));
    run(&empty(), vec![rand_tensor(&[3, 5], &mut r)], true, |g, _, v| {
        g.transpose(v[0])
    });
    let ins = vec![
        rand_tensor(&[4, 5], &mut r),
        rand_tensor(&[3, 5], &mut r),
        rand_tensor(&[3], &mut r),
    ];
    run(&empty(), ins.clone(), true, |g, _, v| g.linear(v[0], v[1], Some(v[2])));
    run(&empty(), ins, true, |g, _, v| g.linear(v[0], v[1], None));
}

#[test]
fn normalize_and_distances() {
    let mut r = rng();
    run(&empty(), vec![rand_tensor(&[4, 6], &mut r)], true, |g, _, v| {
        g.l2_normalize_rows(v[0])
    });
    let ins = vec![rand_tensor(&[4, 3], &mut r), rand_tensor(&[2, 3], &mut r)];
    run(&empty(), ins, true, |g, _, v| g.sqdist(v[0], v[1]));
}

#[test]
fn indexing_ops() {
    let mut r = rng();
    let ins = vec![rand_tensor(&[4, 3], &mut r)];
    run(&empty(), ins.clone(), true, |g, _, v| g.pick(v[0], &[2, 0, 1, 2]));
    run(&empty(), ins, true, |g, _, v| g.select_rows(v[0], &[3, 0, 3]));
}

#[test]
fn concat_and_reshape() {
    let mut r = rng();
    let ins = vec![rand_tensor(&[2, 3], &mut r), rand_tensor(&[2, 2], &mut r)];
    run(&empty(), ins, true, |g, _, v| g.concat(&[v[0], v[1]], 1));
    let ins = vec![rand_tensor(&[2, 3], &mut r), rand_tensor(&[1, 3], &mut r)];
    run(&empty(), ins.clone(), true, |g, _, v| g.concat(&[v[0], v[1]], 0));
    run(&empty(), ins, true, |g, _, v| g.reshape(v[0], &[3, 2]));
}

#[test]
fn conv1d_strided_dilated_padded() {
    let mut r = rng();
    let ins = vec![
        rand_tensor(&[2, 3, 17], &mut r),
        rand_tensor(&[4, 3, 3], &mut r),
        rand_tensor(&[4], &mut r),
    ];
    run(&empty(), ins.clone(), true, |g, _, v| {
        g.conv1d(v[0], v[1], Some(v[2]), 1, 2, 2)
    });
    let ins = vec![
        rand_tensor(&[2, 2, 24], &mut r),
        rand_tensor(&[3, 2, 16], &mut r),
        rand_tensor(&[3], &mut r),
    ];
    run(&empty(), ins, true, |g, _, v| {
        g.conv1d(v[0], v[1], Some(v[2]), 4, 1, 6)
    });
}

#[test]
fn conv1d_identity_kernel_is_identity() {
    let mut r = rng();
    let x = rand_tensor(&[1, 1, 9], &mut r);
    let mut g = Graph::<f64>::new(false, 0);
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
    let y = g.conv1d(xv, w, None, 1, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_strided_padded() {
    let mut r = rng();
    let ins = vec![
        rand_tensor(&[2, 2, 6, 5], &mut r),
        rand_tensor(&[3, 2, 3, 3], &mut r),
        rand_tensor(&[3], &mut r),
    ];
    run(&empty(), ins.clone(), true, |g, _, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    });
    run(&empty(), ins, true, |g, _, v| g.conv2d(v[0], v[1], None, 1, 1));
}

fn norm_store(c: usize) -> ParamStore<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    s.add_param("n.gamma", rand_tensor(&[c], &mut r).map(|x| x + 1.5))
        .unwrap();
    s.add_param("n.beta", rand_tensor(&[c], &mut r)).unwrap();
    s.add_buffer("n.running_mean", rand_tensor(&[c], &mut r))
        .unwrap();
    s.add_buffer("n.running_var", Tensor::full(&[c], 0.7)).unwrap();
    s
}

fn bn(g: &mut Graph<f64>, s: &ParamStore<f64>, x: Var) -> Result<Var> {
    let gamma = g.param(s, s.id("n.gamma").unwrap());
    let beta = g.param(s, s.id("n.beta").unwrap());
    g.batch_norm(
        s,
        x,
        gamma,
        beta,
        s.buffer_id("n.running_mean").unwrap(),
        s.buffer_id("n.running_var").unwrap(),
    )
}

#[test]
fn batch_norm_train_and_eval() {
    let mut r = rng();
    let store = norm_store(3);
    run(&store, vec![rand_tensor(&[4, 3, 5], &mut r)], true, |g, s, v| {
        bn(g, s, v[0])
    });
    run(&store, vec![rand_tensor(&[5, 3], &mut r)], true, |g, s, v| {
        bn(g, s, v[0])
    });
    run(&store, vec![rand_tensor(&[2, 3, 4], &mut r)], false, |g, s, v| {
        bn(g, s, v[0])
    });
}

#[test]
fn batch_norm_running_stats_use_unbiased_variance() {
    let mut s = norm_store(1);
    let rm = s.buffer_id("n.running_mean").unwrap();
    let rv = s.buffer_id("n.running_var").unwrap();
    *s.buffer_mut(rm) = Tensor::zeros(&[1]);
    *s.buffer_mut(rv) = Tensor::full(&[1], 1.0);
    let mut g = Graph::<f64>::new(true, 0);
    let x = g.constant(Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    bn(&mut g, &s, x).unwrap();
    g.commit_buffers(&mut s);
    assert!((s.buffer(rm).item() - 0.25).abs() < 1e-12);
    let unbiased = 5.0 / 3.0;
    assert!((s.buffer(rv).item() - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
}

#[test]
fn batch_norm_rejects_single_value_in_training() {
    let s = norm_store(2);
    let mut g = Graph::<f64>::new(true, 0);
    let x = g.constant(Tensor::zeros(&[1, 2]));
    assert!(bn(&mut g, &s, x).is_err());
}

#[test]
fn layer_norm_over_channels() {
    let mut r = rng();
    let store = norm_store(4);
    run(&store, vec![rand_tensor(&[2, 4, 3], &mut r)], true, |g, s, v| {
        let gamma = g.param(s, s.id("n.gamma").unwrap());
        let beta = g.param(s, s.id("n.beta").unwrap());
        g.layer_norm(v[0], gamma, beta)
    });
    run(&store, vec![rand_tensor(&[3, 4], &mut r)], true, |g, s, v| {
        let gamma = g.param(s, s.id("n.gamma").unwrap());
        let beta = g.param(s, s.id("n.beta").unwrap());
        g.layer_norm(v[0], gamma, beta)
    });
}

#[test]
fn pooling() {
    let mut r = rng();
    run(&empty(), vec![rand_tensor(&[2, 3, 9], &mut r)], true, |g, _, v| {
        g.avg_pool1d(v[0], 2)
    });
    run(&empty(), vec![rand_tensor(&[2, 3, 4, 3], &mut r)], true, |g, _, v| {
        g.global_avg_pool(v[0])
    });
}

#[test]
fn dropout_with_fixed_mask() {
    let mut r = rng();
    run(&empty(), vec![rand_tensor(&[4, 8], &mut r)], true, |g, _, v| {
        g.dropout(v[0], 0.3)
    });
}

#[test]
fn dropout_is_identity_in_eval_and_scales_in_training() {
    let x = Tensor::full(&[1, 1000], 1.0);
    let mut g = Graph::<f64>::eval();
    let v = g.constant(x.clone());
    let y = g.dropout(v, 0.5).unwrap();
    assert_eq!(g.value(y), &x);
    let mut g = Graph::<f64>::new(true, 3);
    let v = g.constant(x);
    let y = g.dropout(v, 0.5).unwrap();
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&a| a == 0.0 || a == 2.0));
    let kept = vals.iter().filter(|&&a| a > 0.0).count();
    assert!((400..600).contains(&kept));
}

#[test]
fn composed_chain() {
    let mut r = rng();
    let ins = vec![rand_tensor(&[3, 4], &mut r), rand_tensor(&[5, 4], &mut r)];
    run(&empty(), ins, true, |g, _, v| {
        let a = g.l2_normalize_rows(v[0])?;
        let b = g.linear(v[1], v[0], None)?;
        let d = g.sqdist(a, a)?;
        let s = g.sum_all(d);
        let bs = g.mean_all(b);
        let t = g.add(s, bs)?;
        Ok(g.exp(t))
    });
}
