//! Finite-difference checks for every differentiable primitive.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grouping::GroupPartition;
use crate::numerics::{grad_check, Array, Tape, Var};

const TOL: f64 = 1e-6;
const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Array {
    let numel: usize = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..numel).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Weighted sum to a scalar so adjoints are generic, not all-ones.
fn weighted_sum<'t>(tape: &'t Tape, v: Var<'t>) -> crate::error::Result<Var<'t>> {
    let shape = v.shape();
    let numel: usize = shape.iter().product();
    let w: Vec<f64> = (0..numel).map(|i| ((i as f64) * 0.713 + 0.2).sin()).collect();
    v.mul(tape.leaf(Array::new(shape, w)?))?.sum_all()
}

fn check<F>(name: &str, build: F, leaves: &[Array])
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::error::Result<Var<'t>>,
{
    let err = grad_check(build, leaves, H).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(err <= TOL, "{name}: rel err {err} > {TOL}");
}

#[test]
fn elementwise_ops() {
    let mut r = rng(101);
    for trial in 0..3 {
        let shape = [r.gen_range(1..=8), r.gen_range(1..=8)];
        let a = random(&shape, &mut r, -2.0, 2.0);
        let b = random(&shape, &mut r, 0.5, 2.0); // safe divisor
        check("add", |t, l| weighted_sum(t, l[0].add(l[1])?), &[a.clone(), b.clone()]);
        check("sub", |t, l| weighted_sum(t, l[0].sub(l[1])?), &[a.clone(), b.clone()]);
        check("mul", |t, l| weighted_sum(t, l[0].mul(l[1])?), &[a.clone(), b.clone()]);
        check("div", |t, l| weighted_sum(t, l[0].div(l[1])?), &[a.clone(), b.clone()]);
        check("neg", |t, l| weighted_sum(t, l[0].neg()?), &[a.clone()]);
        check("scale", |t, l| weighted_sum(t, l[0].scale(1.7)?), &[a.clone()]);
        check(
            "add_const",
            |t, l| weighted_sum(t, l[0].add_const(-0.4)?),
            &[a.clone()],
        );
        let _ = trial;
    }
}

#[test]
fn nonlinearities() {
    let mut r = rng(102);
    let shape = [4, 5];
    let a = random(&shape, &mut r, -2.0, 2.0);
    let pos = random(&shape, &mut r, 0.1, 3.0);
    // keep inputs off the kink so finite differences are valid
    let mut off_kink = random(&shape, &mut r, 0.05, 2.0);
    for (i, v) in off_kink.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    check("exp", |t, l| weighted_sum(t, l[0].exp()?), &[a.clone()]);
    check("ln", |t, l| weighted_sum(t, l[0].ln()?), &[pos]);
    check("tanh", |t, l| weighted_sum(t, l[0].tanh()?), &[a.clone()]);
    check("sigmoid", |t, l| weighted_sum(t, l[0].sigmoid()?), &[a.clone()]);
    check("softplus", |t, l| weighted_sum(t, l[0].softplus()?), &[a]);
    check(
        "leaky_relu",
        |t, l| weighted_sum(t, l[0].leaky_relu(0.2)?),
        &[off_kink],
    );
    // smooth everywhere, so no kink exclusion needed
    let near_zero = random(&shape, &mut r, -1e-4, 1e-4);
    check(
        "smooth_leaky",
        |t, l| weighted_sum(t, l[0].smooth_leaky(0.2)?),
        &[near_zero],
    );
}

#[test]
fn reductions_and_broadcasts() {
    let mut r = rng(103);
    let a = random(&[5, 4], &mut r, -1.0, 1.0);
    let v = random(&[6], &mut r, -1.0, 1.0);
    let s = random(&[1], &mut r, -1.0, 1.0);
    let cube = random(&[3, 7, 2], &mut r, -1.0, 1.0);
    check("sum_all", |_, l| l[0].sum_all(), &[a.clone()]);
    check("mean_all", |_, l| l[0].mean_all(), &[a.clone()]);
    check(
        "sum_axis0",
        |t, l| weighted_sum(t, l[0].sum_axis0()?),
        &[a.clone()],
    );
    check("mean_time", |t, l| weighted_sum(t, l[0].mean_time()?), &[cube]);
    check("tile_rows", |t, l| weighted_sum(t, l[0].tile_rows(4)?), &[v]);
    check(
        "broadcast_scalar",
        |t, l| weighted_sum(t, l[0].broadcast_to(&[3, 4])?),
        &[s],
    );
    check(
        "transpose",
        |t, l| weighted_sum(t, l[0].transpose()?),
        &[a.clone()],
    );
    check(
        "reshape",
        |t, l| weighted_sum(t, l[0].reshape(&[2, 10])?),
        &[a.clone()],
    );
    check("col_normalize", |t, l| weighted_sum(t, l[0].col_normalize()?), {
        // keep column sums well away from zero
        let pos = random(&[4, 4], &mut r, 0.2, 2.0);
        &[pos]
    });
}

#[test]
fn matmul_against_finite_differences() {
    let mut r = rng(104);
    let a = random(&[3, 4], &mut r, -1.0, 1.0);
    let b = random(&[4, 2], &mut r, -1.0, 1.0);
    check(
        "matmul",
        |t, l| weighted_sum(t, l[0].matmul(l[1])?),
        &[a, b],
    );
}

#[test]
fn temporal_conv_gradients() {
    let mut r = rng(105);
    let x = random(&[2, 8, 2], &mut r, -1.0, 1.0);
    let w = random(&[3, 2, 3], &mut r, -1.0, 1.0);
    let b = random(&[3], &mut r, -0.5, 0.5);
    check(
        "temporal_conv",
        |t, l| weighted_sum(t, l[0].temporal_conv(l[1], l[2])?),
        &[x, w, b],
    );
}

#[test]
fn graph_conv_gradients() {
    let mut r = rng(106);
    let (n, t) = (4, 5);
    let x = random(&[n, t, 3], &mut r, -1.0, 1.0);
    let w = random(&[3, 2], &mut r, -1.0, 1.0);
    let adj = random(&[t, n, n], &mut r, 0.0, 1.0);
    check(
        "graph_conv",
        move |tp, l| weighted_sum(tp, l[0].graph_conv(&adj, l[1])?),
        &[x, w],
    );
}

#[test]
fn time_linear_gradients() {
    let mut r = rng(107);
    let x = random(&[3, 8, 2], &mut r, -1.0, 1.0);
    let w = random(&[12, 8], &mut r, -0.5, 0.5);
    let b = random(&[12], &mut r, -0.5, 0.5);
    check(
        "time_linear",
        |t, l| weighted_sum(t, l[0].time_linear(l[1], l[2])?),
        &[x, w, b],
    );
}

#[test]
fn segment_ops_gradients() {
    let mut r = rng(108);
    let part = GroupPartition::new(vec![vec![0, 2], vec![1], vec![3, 4, 5]], 6).unwrap();
    let x = random(&[6, 4], &mut r, -1.0, 1.0);
    let z = random(&[3, 4], &mut r, -1.0, 1.0);
    let p1 = part.clone();
    check(
        "segment_mean",
        move |t, l| weighted_sum(t, l[0].segment_mean(&p1)?),
        &[x],
    );
    check(
        "segment_gather",
        move |t, l| weighted_sum(t, l[0].segment_gather(&part)?),
        &[z],
    );
}

#[test]
fn pairwise_l2_gradients() {
    let mut r = rng(109);
    // spread rows out so no pair is near-coincident
    let mut x = random(&[5, 3], &mut r, -1.0, 1.0);
    for i in 0..5 {
        x.data_mut()[i * 3] += 3.0 * i as f64;
    }
    check(
        "pairwise_l2",
        |t, l| weighted_sum(t, l[0].pairwise_l2()?),
        &[x],
    );
}

#[test]
fn concat_and_slice_gradients() {
    let mut r = rng(110);
    let a = random(&[2, 4, 3], &mut r, -1.0, 1.0);
    let b = random(&[2, 4, 2], &mut r, -1.0, 1.0);
    let c = random(&[2, 4, 1], &mut r, -1.0, 1.0);
    check(
        "concat_channels",
        |t, l| weighted_sum(t, Var::concat_channels(&[l[0], l[1], l[2]])?),
        &[a.clone(), b, c],
    );
    check(
        "slice_channels",
        |t, l| weighted_sum(t, l[0].slice_channels(1, 3)?),
        &[a],
    );
}

#[test]
fn stop_gradient_is_excluded_not_compared() {
    let mut r = rng(111);
    let x = random(&[3, 3], &mut r, -1.0, 1.0);
    // h(sg(x), x) = sum(sg(x) * tanh(x)): gradient treats the first
    // argument as a constant
    check(
        "stop_gradient composite",
        |t, l| weighted_sum(t, l[0].stop_gradient()?.mul(l[0].tanh()?)?),
        &[x],
    );
}
