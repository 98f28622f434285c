use super::check::finite_diff_check;
use super::*;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::rc::Rc;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// Scalarize with fixed random weights so per-coordinate gradients differ.
fn scalarize(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, g.shape(out));
    let wc = g.constant(w);
    let p = g.mul(out, wc);
    g.mean_all(p)
}

/// Build the op on leaves, backprop, and compare against finite differences.
fn check_op<F>(inputs: &[ArrayD<f64>], build: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let analytic: Vec<ArrayD<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = scalarize(&mut g, out, 99);
        g.backward(loss);
        vars.iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(g.value(v).raw_dim()))
            })
            .collect()
    };
    let f = |xs: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = scalarize(&mut g, out, 99);
        g.scalar(loss)
    };
    let res = finite_diff_check(f, inputs, &analytic, 1e-5);
    assert!(
        res.max_rel_err < tol,
        "gradient mismatch: max rel err {} over {} coords",
        res.max_rel_err,
        res.checked
    );
}

#[test]
fn grad_elementwise_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[2, 3, 4, 4]);
    let b = randn(&mut rng, &[2, 3, 4, 4]);
    check_op(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]), 1e-5);
    check_op(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]), 1e-5);
    check_op(&[a, b], |g, v| g.mul(v[0], v[1]), 1e-5);
}

#[test]
fn grad_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Keep values away from the relu/abs kinks.
    let x = randn(&mut rng, &[2, 2, 3, 3]).mapv(|v| v + 0.3 * v.signum());
    check_op(&[x.clone()], |g, v| g.sigmoid(v[0]), 1e-5);
    check_op(&[x.clone()], |g, v| g.tanh(v[0]), 1e-5);
    check_op(&[x.clone()], |g, v| g.relu(v[0]), 1e-5);
    check_op(&[x.clone()], |g, v| g.leaky_relu(v[0], 0.2), 1e-5);
    check_op(&[x.clone()], |g, v| g.abs(v[0]), 1e-5);
    check_op(&[x.clone()], |g, v| g.square(v[0]), 1e-5);
    check_op(&[x], |g, v| g.neg(v[0]), 1e-5);
}

#[test]
fn grad_bias_and_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let b = randn(&mut rng, &[3]);
    check_op(&[x.clone(), b], |g, v| g.add_bias(v[0], v[1]), 1e-5);
    let m = randn(&mut rng, &[2, 1, 4, 4]);
    check_op(&[x, m], |g, v| g.mul_channel_bcast(v[0], v[1]), 1e-5);
}

#[test]
fn grad_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    check_op(&[x.clone()], |g, v| g.softmax_spatial(v[0]), 1e-4);
    check_op(&[x], |g, v| g.softmax_channel(v[0]), 1e-4);
}

#[test]
fn grad_instance_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let gamma = randn(&mut rng, &[3]).mapv(|v| 1.0 + 0.1 * v);
    let beta = randn(&mut rng, &[3]);
    check_op(
        &[x, gamma, beta],
        |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5),
        1e-4,
    );
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[2, 3, 6, 6]);
    let w = randn(&mut rng, &[4, 3, 3, 3]).mapv(|v| v * 0.3);
    let b = randn(&mut rng, &[4]);
    check_op(
        &[x.clone(), w.clone(), b.clone()],
        |g, v| g.conv2d(v[0], v[1], v[2], 1, 1),
        1e-4,
    );
    check_op(&[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1), 1e-4);
    // 4x4 kernel, stride 1 (discriminator final layers).
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[1, 2, 6, 6]);
    let w = randn(&mut rng, &[3, 2, 4, 4]).mapv(|v| v * 0.3);
    let b = randn(&mut rng, &[3]);
    check_op(&[x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], 1, 1), 1e-4);
}

#[test]
fn grad_pool_and_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[2, 2, 6, 6]);
    check_op(&[x.clone()], |g, v| g.avg_pool(v[0], 2), 1e-5);
    check_op(&[x.clone()], |g, v| g.avg_pool(v[0], 3), 1e-5);
    check_op(&[x.clone()], |g, v| g.upsample_nearest2(v[0]), 1e-5);
    check_op(&[x.clone()], |g, v| g.resize_bilinear(v[0], 9, 9), 1e-5);
    check_op(&[x], |g, v| g.resize_bilinear(v[0], 4, 4), 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let f = randn(&mut rng, &[2, 4, 4, 2]);
    check_op(&[f.clone()], |g, v| g.resize_field(v[0], 8, 8), 1e-5);
    check_op(&[f], |g, v| g.resize_field(v[0], 2, 2), 1e-5);
}

#[test]
fn grad_grid_sample_both_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, &[2, 2, 5, 5]);
    // Grid strictly inside the image with non-integer sample sites.
    let mut grid = ArrayD::zeros(IxDyn(&[2, 4, 4, 2]));
    for n in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                grid[[n, i, j, 0]] = norm_coord(j, 4) * 0.6 + 0.013 * (n as f64 + 1.0);
                grid[[n, i, j, 1]] = norm_coord(i, 4) * 0.6 - 0.027;
            }
        }
    }
    check_op(&[x, grid], |g, v| g.grid_sample(v[0], v[1]), 1e-4);
}

#[test]
fn grid_sample_identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randn(&mut rng, &[1, 3, 7, 5]);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let grid3 = identity_grid(7, 5);
    let mut grid = ArrayD::zeros(IxDyn(&[1, 7, 5, 2]));
    grid.view_mut()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .index_axis_mut(ndarray::Axis(0), 0)
        .assign(&grid3);
    let gv = g.constant(grid);
    let out = g.grid_sample(xv, gv);
    let diff = (g.value(out) - &x).mapv(f64::abs);
    let max = diff.iter().cloned().fold(0.0, f64::max);
    assert!(max < 1e-12, "identity warp not exact: {max}");
}

#[test]
fn grad_keypoint_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts = randn(&mut rng, &[2, 3, 2]).mapv(|v| 0.4 * v.tanh());
    check_op(&[pts.clone()], |g, v| g.kp_gaussian(v[0], 6, 6, 0.2), 1e-4);
    // Normalized heatmap for spatial expectation.
    let mut g = Graph::new();
    let raw = randn(&mut rng, &[2, 3, 6, 6]);
    let rv = g.leaf(raw.clone());
    let hm = g.softmax_spatial(rv);
    let _ = hm;
    check_op(
        &[raw],
        |g, v| {
            let h = g.softmax_spatial(v[0]);
            g.spatial_expectation(h)
        },
        1e-4,
    );
    let heat = randn(&mut rng, &[2, 3, 4, 4]).mapv(|v| v * 0.2);
    let jmap = randn(&mut rng, &[2, 12, 4, 4]);
    check_op(
        &[heat, jmap],
        |g, v| g.heatmap_weighted_jacobian(v[0], v[1]),
        1e-4,
    );
}

#[test]
fn grad_motion_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let us = randn(&mut rng, &[2, 3, 2]).mapv(|v| 0.5 * v.tanh());
    let ud = randn(&mut rng, &[2, 3, 2]).mapv(|v| 0.5 * v.tanh());
    let jac = randn(&mut rng, &[2, 3, 2, 2]).mapv(|v| 0.2 * v);
    // Make jacobians well-conditioned by adding identity.
    let mut jac_id = jac.clone();
    for n in 0..2 {
        for k in 0..3 {
            jac_id[[n, k, 0, 0]] += 1.0;
            jac_id[[n, k, 1, 1]] += 1.0;
        }
    }
    check_op(
        &[us, ud, jac_id.clone()],
        |g, v| g.sparse_grid(v[0], v[1], v[2], 4, 4),
        1e-4,
    );
    check_op(&[jac_id.clone()], |g, v| g.inv2x2(v[0]), 1e-4);
    let b = randn(&mut rng, &[2, 3, 2, 2]);
    check_op(&[jac_id, b], |g, v| g.matmul2x2(v[0], v[1]), 1e-4);

    let attn_raw = randn(&mut rng, &[2, 4, 3, 3]);
    let sparse = randn(&mut rng, &[2, 4, 3, 3, 2]);
    check_op(
        &[attn_raw, sparse],
        |g, v| {
            let a = g.softmax_channel(v[0]);
            g.attention_combine(a, v[1])
        },
        1e-4,
    );
}

#[test]
fn grad_tps_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tps = Rc::new(vec![
        crate::tps::random_tps(&mut rng, 0.1).unwrap(),
        crate::tps::random_tps(&mut rng, 0.1).unwrap(),
    ]);
    // Points away from control points (second derivative is log-singular there).
    let pts = ArrayD::from_shape_vec(
        IxDyn(&[2, 2, 2]),
        vec![0.13, -0.37, -0.61, 0.22, 0.33, 0.41, -0.18, -0.09],
    )
    .unwrap();
    let t1 = tps.clone();
    check_op(&[pts.clone()], move |g, v| g.tps_eval(v[0], t1.clone()), 1e-4);
    let t2 = tps.clone();
    check_op(&[pts], move |g, v| g.tps_jacobian(v[0], t2.clone()), 1e-4);
}

#[test]
fn grad_concat_slice_detach() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = randn(&mut rng, &[2, 2, 3, 3]);
    let b = randn(&mut rng, &[2, 3, 3, 3]);
    check_op(
        &[a.clone(), b.clone()],
        |g, v| {
            let c = g.concat_ch(&[v[0], v[1]]);
            g.slice_ch(c, 1, 4)
        },
        1e-5,
    );
    // Detach blocks gradient flow entirely.
    let mut g = Graph::new();
    let av = g.leaf(a);
    let d = g.detach(av);
    let s = g.mean_all(d);
    assert!(!g.needs_grad(s));
    g.backward(s);
    assert!(g.grad(av).is_none());
}

#[test]
fn accumulation_over_fanout() {
    // y = mean(x * x + x) exercises multiple uses of one node.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = randn(&mut rng, &[3, 2, 2, 2]);
    check_op(
        &[x],
        |g, v| {
            let sq = g.mul(v[0], v[0]);
            g.add(sq, v[0])
        },
        1e-5,
    );
}

#[test]
fn frozen_params_get_no_grad() {
    let mut g = Graph::new();
    let x = ArrayD::from_elem(IxDyn(&[2, 2]), 1.5);
    g.set_frozen(true);
    let p = g.param_leaf(0, x.clone());
    g.set_frozen(false);
    let q = g.param_leaf(1, x);
    let s = g.add(p, q);
    let l = g.mean_all(s);
    g.backward(l);
    assert!(g.grad(p).is_none());
    assert!(g.grad(q).is_some());
    assert_eq!(g.param_grads().len(), 1);
}
