#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symflow::diffcore::{gradcheck, Graph, Tensor, Var};
use symflow::Result;

pub const FD_STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so kinks (relu, clamp) are never crossed by
/// the finite-difference probe.
fn rand_signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum with fixed random weights, so every output element carries a
/// distinct non-trivial cotangent.
fn project(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_unary(
    rng: &mut ChaCha8Rng,
    x: Tensor,
    op: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> f64 {
    let mut probe = Graph::new();
    let xv = probe.constant(x.clone());
    let out_shape = {
        let y = op(&mut probe, xv).unwrap();
        probe.shape(y).to_vec()
    };
    let weights = rand_tensor(rng, &out_shape, -1.0, 1.0);
    gradcheck(&[("x", x)], FD_STEP, |g, v| {
        let y = op(g, v[0])?;
        project(g, y, &weights)
    })
    .unwrap()
    .max_rel_err
}

fn check_binary(
    rng: &mut ChaCha8Rng,
    a: Tensor,
    b: Tensor,
    op: impl Fn(&mut Graph, Var, Var) -> Result<Var>,
) -> f64 {
    let mut probe = Graph::new();
    let (av, bv) = (probe.constant(a.clone()), probe.constant(b.clone()));
    let out_shape = {
        let y = op(&mut probe, av, bv).unwrap();
        probe.shape(y).to_vec()
    };
    let weights = rand_tensor(rng, &out_shape, -1.0, 1.0);
    gradcheck(&[("a", a), ("b", b)], FD_STEP, |g, v| {
        let y = op(g, v[0], v[1])?;
        project(g, y, &weights)
    })
    .unwrap()
    .max_rel_err
}

/// Runs every differentiable op once with shapes drawn from `seed` and
/// returns `(op, max relative error)` pairs.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(2..5);
    let d = rng.gen_range(2..6);
    let e = rng.gen_range(1..5);
    let mut out = Vec::new();

    // dense: x, w, b all probed
    {
        let x = rand_tensor(&mut rng, &[b, d], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[d, e], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[e], -1.0, 1.0);
        let weights = rand_tensor(&mut rng, &[b, e], -1.0, 1.0);
        let err = gradcheck(&[("x", x), ("w", w), ("b", bias)], FD_STEP, |g, v| {
            let y = g.dense(v[0], v[1], v[2])?;
            project(g, y, &weights)
        })
        .unwrap()
        .max_rel_err;
        out.push(("dense", err));
    }
    {
        let a = rand_tensor(&mut rng, &[b, d], -1.0, 1.0);
        let m = rand_tensor(&mut rng, &[d, e], -1.0, 1.0);
        out.push(("matmul", check_binary(&mut rng, a, m, |g, a, b| g.matmul(a, b))));
    }
    {
        let x = rand_tensor(&mut rng, &[b, d], -1.0, 1.0);
        out.push(("transpose", check_unary(&mut rng, x, |g, x| g.transpose(x))));
    }
    // conv1d with random stride/padding
    {
        let c = rng.gen_range(1..4);
        let o = rng.gen_range(1..4);
        let k = rng.gen_range(1..6);
        let l = rng.gen_range(k.max(4)..12);
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..k);
        let x = rand_tensor(&mut rng, &[b, c, l], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[o, c, k], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[o], -1.0, 1.0);
        let lout = (l + 2 * padding - k) / stride + 1;
        let weights = rand_tensor(&mut rng, &[b, o, lout], -1.0, 1.0);
        let err = gradcheck(&[("x", x), ("w", w), ("b", bias)], FD_STEP, |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], stride, padding)?;
            project(g, y, &weights)
        })
        .unwrap()
        .max_rel_err;
        out.push(("conv1d", err));
    }
    {
        let f = rng.gen_range(1..4);
        let x = rand_tensor(&mut rng, &[b, 2, f * 3], -1.0, 1.0);
        out.push(("avg_pool1d", check_unary(&mut rng, x, move |g, x| g.avg_pool1d(x, f))));
        let x = rand_tensor(&mut rng, &[b, 3, 5], -1.0, 1.0);
        out.push(("global_avg_pool", check_unary(&mut rng, x, |g, x| g.global_avg_pool(x))));
        let x = rand_tensor(&mut rng, &[b, d], -1.0, 1.0);
        out.push(("reshape", check_unary(&mut rng, x, move |g, x| g.reshape(x, vec![b, 1, d]))));
    }
    {
        let x = rand_signed_away_from_zero(&mut rng, &[b, d]);
        out.push(("relu", check_unary(&mut rng, x, |g, x| g.relu(x))));
        let x = rand_tensor(&mut rng, &[b, d], -2.0, 2.0);
        out.push(("exp", check_unary(&mut rng, x, |g, x| g.exp(x))));
        let x = rand_tensor(&mut rng, &[b, d], -2.0, 2.0);
        out.push(("tanh", check_unary(&mut rng, x, |g, x| g.tanh(x))));
        let x = rand_tensor(&mut rng, &[b, d], -2.0, 2.0);
        out.push(("square", check_unary(&mut rng, x, |g, x| g.square(x))));
        let x = rand_tensor(&mut rng, &[b, d], 0.3, 3.0);
        out.push(("sqrt", check_unary(&mut rng, x, |g, x| g.sqrt(x))));
        // clamp at +-0.7 with inputs kept away from the bounds
        let x = rand_signed_away_from_zero(&mut rng, &[b, d])
            .map(|v| if (v.abs() - 0.7).abs() < 0.05 { v * 0.5 } else { v });
        out.push(("clamp", check_unary(&mut rng, x, |g, x| g.clamp(x, -0.7, 0.7))));
        let x = rand_tensor(&mut rng, &[b, d], -2.0, 2.0);
        out.push(("scale", check_unary(&mut rng, x, |g, x| g.scale(x, -1.7))));
        let x = rand_tensor(&mut rng, &[b, d], -2.0, 2.0);
        out.push(("add_scalar", check_unary(&mut rng, x, |g, x| g.add_scalar(x, 0.3))));
    }
    {
        let a = rand_tensor(&mut rng, &[b, d], -1.0, 1.0);
        let c = rand_tensor(&mut rng, &[b, d], -1.0, 1.0);
        out.push(("add", check_binary(&mut rng, a.clone(), c.clone(), |g, a, b| g.add(a, b))));
        out.push(("sub", check_binary(&mut rng, a.clone(), c.clone(), |g, a, b| g.sub(a, b))));
        out.push(("mul", check_binary(&mut rng, a.clone(), c.clone(), |g, a, b| g.mul(a, b))));
        out.push(("mse", check_binary(&mut rng, a.clone(), c, |g, a, b| g.mse(a, b))));
        let r = rand_tensor(&mut rng, &[d], -1.0, 1.0);
        out.push(("add_row", check_binary(&mut rng, a, r, |g, a, b| g.add_row(a, b))));
    }
    {
        let x = rand_tensor(&mut rng, &[b, d], -1.0, 1.0);
        out.push(("sum", check_unary(&mut rng, x.clone(), |g, x| g.sum(x))));
        out.push(("mean", check_unary(&mut rng, x.clone(), |g, x| g.mean(x))));
        out.push(("row_sum", check_unary(&mut rng, x.clone(), |g, x| g.row_sum(x))));
        let end = rng.gen_range(1..=d);
        let start = rng.gen_range(0..end);
        out.push((
            "slice_cols",
            check_unary(&mut rng, x.clone(), move |g, x| g.slice_cols(x, start, end)),
        ));
        let y = rand_tensor(&mut rng, &[b, e], -1.0, 1.0);
        out.push((
            "concat_cols",
            check_binary(&mut rng, x.clone(), y, |g, a, b| g.concat_cols(&[a, b])),
        ));
        let rend = rng.gen_range(1..=b);
        let rstart = rng.gen_range(0..rend);
        out.push((
            "slice_rows",
            check_unary(&mut rng, x.clone(), move |g, x| g.slice_rows(x, rstart, rend)),
        ));
        let y = rand_tensor(&mut rng, &[1, d], -1.0, 1.0);
        out.push((
            "concat_rows",
            check_binary(&mut rng, x.clone(), y, |g, a, b| g.concat_rows(&[a, b])),
        ));
        out.push((
            "batch_mean",
            check_unary(&mut rng, x.clone(), |g, x| Ok(g.batch_mean_var(x)?.0)),
        ));
        out.push((
            "batch_var",
            check_unary(&mut rng, x, |g, x| Ok(g.batch_mean_var(x)?.1)),
        ));
    }
    out
}
