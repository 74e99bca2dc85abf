//! Shared test helpers: seeded random computation graphs, a central
//! finite-difference gradient oracle and random partitioned distributions.

#![allow(dead_code)]

use pgmgan_core::metrics::{DecompositionCase, PartitionBlock};
use pgmgan_core::numcore::{stage_rng, Graph, Matrix, Unary, Var};
use rand::seq::SliceRandom;
use rand::Rng;

/// Leaf shapes of a random graph: `X (r x c)`, `W (c x c2)`, `Y (r x c2)`.
pub fn leaf_shapes(seed: u64) -> [(usize, usize); 3] {
    let mut rng = stage_rng(seed, 7);
    let r = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=4);
    let c2 = rng.gen_range(1..=4);
    [(r, c), (c, c2), (r, c2)]
}

pub fn random_leaves(seed: u64) -> Vec<Matrix> {
    let mut rng = stage_rng(seed, 8);
    leaf_shapes(seed)
        .iter()
        .map(|&s| Matrix::from_shape_fn(s, |_| rng.gen_range(-1.5..1.5)))
        .collect()
}

/// Builds a scalar root from the leaves. The op sequence depends only on
/// `seed` and shapes, so rebuilding with perturbed leaves replays it.
pub fn build(g: &mut Graph, leaves: &[Matrix], seed: u64) -> (Vec<Var>, Var) {
    let mut rng = stage_rng(seed, 9);
    let vars: Vec<Var> = leaves.iter().map(|m| g.param(m.clone())).collect();
    let (x, w, y) = (vars[0], vars[1], vars[2]);
    let smooth = [Unary::Tanh, Unary::Sigmoid, Unary::Softplus, Unary::SoftLeaky(0.2)];
    let mut h = x;
    let steps = rng.gen_range(2..=6);
    for _ in 0..steps {
        let (hr, hc) = g.shape(h);
        let (wr, _) = g.shape(w);
        let yshape = g.shape(y);
        h = match rng.gen_range(0..12) {
            0 => g.unary(h, smooth[rng.gen_range(0..smooth.len())]),
            1 if hc == wr => g.matmul(h, w),
            2 if (hr, hc) == yshape => g.mul(h, y),
            3 if (hr, hc) == yshape => g.add(h, y),
            4 => g.softmax_rows(h),
            5 => g.log_softmax_rows(h),
            6 => {
                let t = g.unary(h, Unary::Tanh);
                let t = g.add_scalar(t, 1.5);
                g.normalize_rows(t)
            }
            7 => g.transpose(h),
            8 => {
                let t = g.unary(h, Unary::Sigmoid);
                g.concat_cols(h, t)
            }
            9 => {
                let idx = (0..hr + 1).map(|_| rng.gen_range(0..hr)).collect();
                g.gather_rows(h, idx)
            }
            10 => {
                let s = g.sum_cols(h);
                let s = g.scale(s, 0.3);
                g.sub_col(h, s)
            }
            _ => {
                let m = g.mean_rows(h);
                let m = g.unary(m, Unary::Tanh);
                g.add_row(h, m)
            }
        };
    }
    let sq = g.unary(h, Unary::Square);
    let a = g.mean(sq);
    let b = g.sum(h);
    let root = g.add(a, b);
    (vars, root)
}

pub fn eval_root(leaves: &[Matrix], seed: u64) -> f64 {
    let mut g = Graph::new();
    let (_, root) = build(&mut g, leaves, seed);
    g.scalar_value(root)
}

/// Largest relative error between autodiff and central differences with
/// step `h`, using `max(|ad|, |fd|, floor)` as the denominator.
pub fn max_rel_grad_error(seed: u64, h: f64, floor: f64) -> f64 {
    let leaves = random_leaves(seed);
    let mut g = Graph::new();
    let (vars, root) = build(&mut g, &leaves, seed);
    g.backward(root).expect("scalar root");
    let mut worst = 0.0f64;
    for (li, v) in vars.iter().enumerate() {
        let ad = g.grad(*v);
        for idx in ndarray::indices(leaves[li].raw_dim()) {
            let mut plus = leaves.clone();
            plus[li][idx] += h;
            let mut minus = leaves.clone();
            minus[li][idx] -= h;
            let fd = (eval_root(&plus, seed) - eval_root(&minus, seed)) / (2.0 * h);
            let a = ad[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn total_scalars(seed: u64) -> usize {
    leaf_shapes(seed).iter().map(|(a, b)| a * b).sum()
}

/// Direct-summation oracle for both sides of the decomposition.
pub fn decomposition_oracle(case: &DecompositionCase) -> (f64, f64) {
    let kl = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    let js = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .map(|(&a, &b)| 0.5 * kl(a, 0.5 * (a + b)) + 0.5 * kl(b, 0.5 * (a + b)))
            .sum()
    };
    let mut p = Vec::new();
    let mut q = Vec::new();
    for (pi, b) in case.pis.iter().zip(&case.blocks) {
        p.extend(b.p.iter().map(|x| pi * x));
        q.extend(b.q.iter().map(|x| pi * x));
    }
    let rhs = case
        .pis
        .iter()
        .zip(&case.blocks)
        .map(|(pi, b)| pi * js(&b.p, &b.q))
        .sum();
    (js(&p, &q), rhs)
}

pub fn random_case(rng: &mut impl Rng) -> DecompositionCase {
    let k = rng.gen_range(1..8);
    let simplex = |n: usize, rng: &mut dyn rand::RngCore| {
        let v: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.15) {
                    0.0
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect();
        let s: f64 = v.iter().sum();
        if s == 0.0 {
            let mut e = vec![0.0; n];
            e[0] = 1.0;
            e
        } else {
            v.into_iter().map(|x| x / s).collect()
        }
    };
    let mut ids: Vec<u64> = (0..200).collect();
    ids.shuffle(rng);
    let mut next = ids.into_iter();
    let blocks = (0..k)
        .map(|_| {
            let n = rng.gen_range(1..10);
            PartitionBlock {
                support: next.by_ref().take(n).collect(),
                p: simplex(n, rng),
                q: simplex(n, rng),
            }
        })
        .collect();
    DecompositionCase {
        pis: simplex(k, rng),
        blocks,
    }
}
