//! Neighbour-consistency clustering objective with entropy terms.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::{Graph, Matrix, Var};

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterLossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ClusterLossWeights {
    fn default() -> Self {
        Self { alpha: 5.0, beta: 1e-3 }
    }
}

impl ClusterLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(invalid("partitioner.alpha", "must be nonnegative"));
        }
        if !(self.beta >= 0.0) {
            return Err(invalid("partitioner.beta", "must be nonnegative"));
        }
        Ok(())
    }
}

/// `-sum p ln p` in nats, `0 ln 0 = 0`.
pub fn categorical_entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&x| !(x >= 0.0)) {
        return Err(invalid("p", "probabilities must be nonnegative"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(invalid("p", format!("must sum to 1, got {s}")));
    }
    Ok(p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum())
}

fn entropy_rows(g: &mut Graph, s: Var) -> Var {
    let l = g.ln_clamped(s, LOG_FLOOR);
    let pl = g.mul(s, l);
    let t = g.sum(pl);
    g.neg(t)
}

/// Objective on a batch laid out as `probs = [anchors; neighbours]`:
/// rows `0..n_anchor` are anchors, and neighbour row `n_anchor + e` is
/// joined to anchor `edge_anchor[e]`.
pub fn clustering_objective_graph(
    g: &mut Graph,
    probs: Var,
    n_anchor: usize,
    edge_anchor: &[usize],
    w: ClusterLossWeights,
) -> Var {
    let anchors = g.gather_rows(probs, (0..n_anchor).collect());
    let nb = g.gather_rows(probs, (n_anchor..n_anchor + edge_anchor.len()).collect());
    let a_e = g.gather_rows(anchors, edge_anchor.to_vec());
    let prod = g.mul(a_e, nb);
    let dots = g.sum_cols(prod);
    let logs = g.ln_clamped(dots, LOG_FLOOR);
    let term1 = g.sum(logs);
    let h_rows = entropy_rows(g, anchors);
    let mean = g.mean_rows(anchors);
    let h_mean = entropy_rows(g, mean);
    let t2 = g.scale(h_rows, -w.alpha);
    let t3 = g.scale(h_mean, w.beta);
    let obj = g.add(term1, t2);
    g.add(obj, t3)
}

/// Plain evaluation of the objective over all rows of `probs` with
/// directed edges `(i, j)`.
pub fn clustering_objective(probs: &Matrix, edges: &[(usize, usize)], w: ClusterLossWeights) -> Result<f64> {
    let n = probs.nrows();
    if n == 0 {
        return Err(invalid("batch", "clustering objective needs a non-empty batch"));
    }
    w.validate()?;
    let mut term1 = 0.0;
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(invalid("edges", format!("edge ({i}, {j}) out of range")));
        }
        let d = probs.row(i).dot(&probs.row(j));
        term1 += d.max(LOG_FLOOR).ln();
    }
    let h = |row: &[f64]| -> f64 { row.iter().map(|&p| -p * p.max(LOG_FLOOR).ln()).sum() };
    let term2: f64 = probs.rows().into_iter().map(|r| h(&r.to_vec())).sum();
    let mean = probs.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let term3 = h(&mean.to_vec());
    Ok(term1 - w.alpha * term2 + w.beta * term3)
}
