//! Contrastive pretext task over jittered view pairs.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::fmt17;
use crate::numcore::{stage_rng, Bound, Graph, Matrix, Mlp, MomentumSgd, ParamStore, Unary, Var};
use crate::partitioner::trunk::{ResidualTrunk, TrunkShape};
use crate::synthdata::jitter;

/// Mask value for the excluded self-similarity entries.
const SELF_MASK: f64 = -1e30;

fn check_rows(e: &Matrix) -> Result<()> {
    for (row, r) in e.rows().into_iter().enumerate() {
        let n = r.dot(&r);
        if !(n > 0.0) {
            return Err(Error::ZeroNorm { row });
        }
    }
    Ok(())
}

fn check_pairs(n: usize, positives: &[(usize, usize)]) -> Result<()> {
    if n < 4 {
        return Err(invalid("embeddings", "need at least two samples with two views each"));
    }
    for &(i, j) in positives {
        if i >= n || j >= n || i == j {
            return Err(invalid("positives", format!("bad pair ({i}, {j})")));
        }
    }
    Ok(())
}

/// Sum over ordered positive pairs `(i, j)` of
/// `log( exp(s_ij / tau) / sum_{k != i} exp(s_ik / tau) )`, with `s` the
/// cosine similarity. Larger is better.
pub fn contrastive_objective_graph(g: &mut Graph, e: Var, positives: &[(usize, usize)], tau: f64) -> Var {
    let n = g.shape(e).0;
    let u = g.normalize_rows(e);
    let ut = g.transpose(u);
    let s = g.matmul(u, ut);
    let s = g.scale(s, 1.0 / tau);
    let mask = g.constant(Matrix::from_diag_elem(n, SELF_MASK));
    let s = g.add(s, mask);
    let ls = g.log_softmax_rows(s);
    let mut pick = Matrix::zeros((n, n));
    for &(i, j) in positives {
        pick[[i, j]] += 1.0;
    }
    let pick = g.constant(pick);
    let sel = g.mul(ls, pick);
    g.sum(sel)
}

pub fn contrastive_loss(e: &Matrix, positives: &[(usize, usize)], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(invalid("tau", "temperature must be positive"));
    }
    check_pairs(e.nrows(), positives)?;
    check_rows(e)?;
    let mut g = Graph::new();
    let ev = g.constant(e.clone());
    let l = contrastive_objective_graph(&mut g, ev, positives, tau);
    Ok(g.scalar_value(l))
}

/// Ordered positive pairs for views laid out as `[a0, b0, a1, b1, ...]`.
pub fn view_pairs(n_samples: usize) -> Vec<(usize, usize)> {
    (0..n_samples)
        .flat_map(|s| [(2 * s, 2 * s + 1), (2 * s + 1, 2 * s)])
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretextConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sigma_aug: f64,
    pub tau: f64,
    pub embed_dim: usize,
    pub head_hidden: usize,
}

/// Trunk `phi_0` followed by `W2 relu(W1 .)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextEncoder {
    pub trunk: ResidualTrunk,
    pub head_store: ParamStore,
    pub head: Mlp,
}

impl PretextEncoder {
    pub fn new<R: Rng + ?Sized>(shape: TrunkShape, cfg: &PretextConfig, rng: &mut R) -> Result<Self> {
        if cfg.embed_dim == 0 || cfg.head_hidden == 0 {
            return Err(invalid("embed.dims", "embedding and head widths must be positive"));
        }
        let trunk = ResidualTrunk::new(shape, 1.0, rng)?;
        let mut head_store = ParamStore::new();
        let head = Mlp::new_scaled(
            &mut head_store,
            "pretext",
            &[shape.dim, cfg.head_hidden, cfg.embed_dim],
            Unary::Relu,
            2f64.sqrt(),
            rng,
        );
        Ok(Self {
            trunk,
            head_store,
            head,
        })
    }

    fn forward(&self, g: &mut Graph, tp: &Bound, hp: &Bound, x: Var) -> Var {
        let h = self.trunk.forward(g, tp, x);
        self.head.forward(g, hp, h)
    }

    pub fn embed(&self, x: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let tp = self.trunk.store.bind(&mut g, false);
        let hp = self.head_store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let h = self.forward(&mut g, &tp, &hp, xv);
        g.value(h).clone()
    }
}

/// Trains the encoder; the returned trunk is frozen.
pub fn train_pretext(data: &Matrix, shape: TrunkShape, cfg: &PretextConfig, seed: u64) -> Result<PretextEncoder> {
    let n = data.nrows();
    if n < 2 {
        return Err(invalid("data", "pretext training needs at least two samples"));
    }
    if cfg.batch_size < 2 {
        return Err(invalid("embed.batch_size", "must be at least 2"));
    }
    if !(cfg.tau > 0.0) {
        return Err(invalid("embed.tau", "must be positive"));
    }
    let mut rng = stage_rng(seed, 10);
    let mut enc = PretextEncoder::new(shape, cfg, &mut rng)?;
    let mut opt_t = MomentumSgd::new(&enc.trunk.store, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut opt_h = MomentumSgd::new(&enc.head_store, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let bs = cfg.batch_size.min(n);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs).filter(|c| c.len() >= 2) {
            let mut views = Matrix::zeros((2 * chunk.len(), data.ncols()));
            for (r, &i) in chunk.iter().enumerate() {
                let x = [data[[i, 0]], data[[i, 1]]];
                for v in 0..2 {
                    let y = jitter(x, cfg.sigma_aug, &mut rng);
                    views[[2 * r + v, 0]] = y[0];
                    views[[2 * r + v, 1]] = y[1];
                }
            }
            enc.trunk.refresh(1);
            let mut g = Graph::new();
            let tp = enc.trunk.store.bind(&mut g, true);
            let hp = enc.head_store.bind(&mut g, true);
            let xv = g.constant(views);
            let e = enc.forward(&mut g, &tp, &hp, xv);
            check_rows(g.value(e))?;
            let obj = contrastive_objective_graph(&mut g, e, &view_pairs(chunk.len()), cfg.tau);
            let loss = g.scale(obj, -1.0 / (2 * chunk.len()) as f64);
            if !g.scalar_value(loss).is_finite() {
                return Err(Error::Divergence { stage: "pretext", step });
            }
            g.backward(loss)?;
            opt_t.step(&mut enc.trunk.store, &tp.grads(&g))?;
            opt_h.step(&mut enc.head_store, &hp.grads(&g))?;
            step += 1;
        }
    }
    enc.trunk.freeze();
    Ok(enc)
}

/// `idx,e0,...,e{d-1}` rows.
pub fn write_embeddings_csv<W: Write>(mut w: W, e: &Matrix) -> Result<()> {
    let header: Vec<String> = (0..e.ncols()).map(|j| format!("e{j}")).collect();
    writeln!(w, "idx,{}", header.join(","))?;
    for (i, row) in e.rows().into_iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|&v| fmt17(v)).collect();
        writeln!(w, "{i},{}", vals.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_pair_example() {
        let e = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let total = contrastive_loss(&e, &view_pairs(2), 1.0).unwrap();
        let per = 1.0 - (std::f64::consts::E + 2.0).ln();
        assert!((per - -0.551444714).abs() < 1e-9);
        assert!((total - 4.0 * per).abs() < 1e-12);
        assert!((total - -2.2057788557282).abs() < 1e-12);
    }

    #[test]
    fn hot_temperature_is_uniform() {
        let e = array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-1.0, 0.2]];
        let v = contrastive_loss(&e, &view_pairs(2), 1e9).unwrap();
        assert!((v - 4.0 * (1.0f64 / 3.0).ln()).abs() < 1e-6);
    }

    #[test]
    fn zero_row_is_rejected() {
        let e = array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        assert!(matches!(
            contrastive_loss(&e, &view_pairs(2), 1.0),
            Err(Error::ZeroNorm { row: 1 })
        ));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let cfg = PretextConfig {
            epochs: 0,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            sigma_aug: 0.05,
            tau: 0.5,
            embed_dim: 4,
            head_hidden: 8,
        };
        let shape = TrunkShape {
            dim: 2,
            hidden: 8,
            blocks: 2,
            layers_per_block: 2,
            lipschitz: 0.9,
        };
        let data = array![[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]];
        let a = train_pretext(&data, shape, &cfg, 4).unwrap();
        let mut rng = stage_rng(4, 10);
        let mut b = PretextEncoder::new(shape, &cfg, &mut rng).unwrap();
        b.trunk.freeze();
        assert_eq!(a, b);
    }
}
