//! Central finite-difference oracle for graph gradients.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabdiff_core::{Graph, Result, Var};

pub const STEP: f64 = 1e-5;

/// Relative error. The denominator is floored at 1e-6, far above the
/// differencing noise (about 1e-10 times the objective), so gradients that
/// are exactly zero, like a key bias under softmax, compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

pub struct Report {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Checks `d/dx sum(w * build(x))` for fixed random weights `w`, on
/// `coords` coordinates drawn uniformly over all inputs.
pub fn check<F>(inputs: &[(Vec<usize>, Vec<f64>)], coords: usize, seed: u64, build: F) -> Report
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|(s, v)| g.variable(s, v.clone()).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).len()
    };
    let weights: Vec<f64> = (0..numel)
        .map(|_| rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();

    let objective = |values: &[Vec<f64>], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|((s, _), v)| g.variable(s, v.clone()).unwrap())
            .collect();
        let out = build(&mut g, &vars).unwrap();
        let shape = g.shape(out).to_vec();
        let w = g.constant(&shape, weights.clone()).unwrap();
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss)[0];
        if !want_grad {
            return (value, Vec::new());
        }
        let grads = g.backward(loss).unwrap();
        let per_input = vars
            .iter()
            .zip(values)
            .map(|(&v, x)| grads.get(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
            .collect();
        (value, per_input)
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (_, analytic) = objective(&base, true);
    let total: usize = base.iter().map(Vec::len).sum();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= base[which].len() {
            flat -= base[which].len();
            which += 1;
        }
        let mut plus = base.clone();
        plus[which][flat] += STEP;
        let mut minus = base.clone();
        minus[which][flat] -= STEP;
        let numeric = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic[which][flat], numeric));
    }
    Report {
        max_rel_err: worst,
        checked: coords,
    }
}

pub fn random_values(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Every graph operation with inputs sized so that 100 coordinates cover a
/// good share of them. Returns `(name, report)` pairs.
pub fn all_ops(coords: usize, seed: u64) -> Vec<(&'static str, Report)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |n: usize| random_values(n, -2.0, 2.0, &mut rng);
    let m = |shape: &[usize], v: Vec<f64>| (shape.to_vec(), v);
    let mut out = Vec::new();
    let mut s = seed;
    let mut next = || {
        s += 1;
        s
    };

    out.push(("matmul", check(&[m(&[6, 5], r(30)), m(&[5, 7], r(35))], coords, next(), |g, v| g.matmul(v[0], v[1]))));
    out.push((
        "matmul_unordered",
        check(&[m(&[6, 5], r(30)), m(&[5, 7], r(35))], coords, next(), |g, v| g.matmul_unordered(v[0], v[1])),
    ));
    out.push(("transpose", check(&[m(&[6, 9], r(54))], coords, next(), |g, v| g.transpose(v[0]))));
    out.push(("add", check(&[m(&[8, 6], r(48)), m(&[6], r(6))], coords, next(), |g, v| g.add(v[0], v[1]))));
    out.push(("sub", check(&[m(&[8, 6], r(48)), m(&[8, 1], r(8))], coords, next(), |g, v| g.sub(v[0], v[1]))));
    out.push(("mul", check(&[m(&[8, 6], r(48)), m(&[1, 6], r(6))], coords, next(), |g, v| g.mul(v[0], v[1]))));
    let denom: Vec<f64> = r(48).iter().map(|x| 0.5 + x.abs()).collect();
    out.push(("div", check(&[m(&[8, 6], r(48)), m(&[8, 6], denom)], coords, next(), |g, v| g.div(v[0], v[1]))));
    out.push(("scale", check(&[m(&[10, 10], r(100))], coords, next(), |g, v| g.scale(v[0], -1.7))));
    out.push(("gelu", check(&[m(&[10, 10], r(100))], coords, next(), |g, v| g.gelu(v[0]))));
    out.push(("softmax", check(&[m(&[10, 10], r(100))], coords, next(), |g, v| g.softmax(v[0]))));
    out.push(("layer_norm", check(&[m(&[10, 10], r(100))], coords, next(), |g, v| g.layer_norm(v[0]))));
    out.push(("sum", check(&[m(&[10, 10], r(100))], coords, next(), |g, v| g.sum(v[0]))));
    out.push(("mean", check(&[m(&[10, 10], r(100))], coords, next(), |g, v| g.mean(v[0]))));
    out.push(("square", check(&[m(&[10, 10], r(100))], coords, next(), |g, v| g.square(v[0]))));
    let positive: Vec<f64> = r(100).iter().map(|x| 0.3 + x.abs()).collect();
    out.push(("sqrt", check(&[m(&[10, 10], positive)], coords, next(), |g, v| g.sqrt(v[0]))));
    out.push((
        "concat",
        check(&[m(&[6, 4], r(24)), m(&[6, 7], r(42)), m(&[6, 1], r(6))], coords, next(), |g, v| g.concat(v)),
    ));
    out.push(("slice_cols", check(&[m(&[8, 12], r(96))], coords, next(), |g, v| g.slice_cols(v[0], 3..9))));
    out.push(("slice_rows", check(&[m(&[12, 8], r(96))], coords, next(), |g, v| g.slice_rows(v[0], 2..7))));
    let mask = [false, true, false, false, true, false, true, false, false, false];
    out.push((
        "masked_fill",
        check(&[m(&[10, 10], r(100))], coords, next(), move |g, v| {
            let filled = g.masked_fill(v[0], &mask, -1e9)?;
            // softmax keeps the filled logits numerically meaningful
            g.softmax(filled)
        }),
    ));
    out.push((
        "gather_rows",
        check(&[m(&[7, 9], r(63))], coords, next(), |g, v| {
            g.gather_rows(v[0], &[Some(3), None, Some(0), Some(3), Some(6), Some(1)])
        }),
    ));
    out
}
