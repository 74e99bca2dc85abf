//! Bi-Lipschitz residual trunk `phi = B_T o ... o B_1` with
//! `B(x) = x + psi(x)`.
//!
//! Each `psi` is `m` spectrally normalized dense layers joined by a smooth
//! 1-Lipschitz activation, so `Lip(psi) <= L^m < 1` and every block obeys
//! `(1 - L^m)|x - y| <= |B(x) - B(y)| <= (1 + L^m)|x - y|`.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::numcore::{sigma_max, Bound, Dense, Graph, Matrix, ParamStore, Unary, Var};

pub const TRUNK_ACTIVATION: Unary = Unary::SoftLeaky(0.2);

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTrunk {
    pub dim: usize,
    pub hidden: usize,
    pub lipschitz: f64,
    pub store: ParamStore,
    pub blocks: Vec<ResidualBlock>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrunkShape {
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub lipschitz: f64,
}

impl TrunkShape {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(invalid("partitioner.hidden", "dimensions must be positive"));
        }
        if self.layers_per_block == 0 {
            return Err(invalid("partitioner.m", "each block needs at least one layer"));
        }
        if !(self.lipschitz > 0.0 && self.lipschitz < 1.0) {
            return Err(invalid(
                "partitioner.L",
                format!("per-layer Lipschitz target must lie in (0, 1), got {}", self.lipschitz),
            ));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let m = self.layers_per_block;
        let mut w = vec![self.dim];
        w.extend(std::iter::repeat_n(self.hidden, m - 1));
        w.push(self.dim);
        w
    }
}

impl ResidualTrunk {
    /// Random trunk; `init_gain` scales the pre-normalization weights.
    pub fn new<R: Rng + ?Sized>(shape: TrunkShape, init_gain: f64, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let mut store = ParamStore::new();
        let widths = shape.widths();
        let mut blocks = Vec::with_capacity(shape.blocks);
        for t in 0..shape.blocks {
            let mut layers = Vec::with_capacity(shape.layers_per_block);
            for (l, w) in widths.windows(2).enumerate() {
                let std = init_gain / (w[0] as f64).sqrt();
                let dense = Dense::new(&mut store, &format!("phi.{t}.{l}"), w[0], w[1], std, rng).with_spectral_norm(
                    &store,
                    shape.lipschitz,
                    rng,
                );
                layers.push(dense);
            }
            blocks.push(ResidualBlock { layers });
        }
        let mut trunk = Self {
            dim: shape.dim,
            hidden: shape.hidden,
            lipschitz: shape.lipschitz,
            store,
            blocks,
        };
        trunk.refresh(20);
        Ok(trunk)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn layers_per_block(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.layers.len())
    }

    /// Advances every layer's power iteration by `iters` steps.
    pub fn refresh(&mut self, iters: usize) {
        for b in &mut self.blocks {
            for l in &mut b.layers {
                l.refresh(&self.store, iters);
            }
        }
    }

    /// Rescales with the exact spectral norm and bakes the scale into the
    /// stored weights, leaving a trunk whose forward pass is a fixed map.
    pub fn freeze(&mut self) {
        for b in &mut self.blocks {
            for l in &mut b.layers {
                l.refresh_exact(&self.store);
                l.freeze(&mut self.store);
            }
        }
    }

    /// Exact top singular value of every realized layer weight.
    pub fn layer_sigmas(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|b| {
                b.layers
                    .iter()
                    .map(|l| sigma_max(&l.realized_weight(&self.store)))
                    .collect()
            })
            .collect()
    }

    pub fn zero_weights(&mut self) {
        for v in self.store.values_mut() {
            v.fill(0.0);
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for b in &self.blocks {
            let mut r = h;
            let last = b.layers.len() - 1;
            for (i, l) in b.layers.iter().enumerate() {
                r = l.forward(g, p, r);
                if i < last {
                    r = g.unary(r, TRUNK_ACTIVATION);
                }
            }
            h = g.add(h, r);
        }
        h
    }

    /// `phi` applied to every row of `x` without tracking gradients.
    pub fn eval(&self, x: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv);
        g.value(y).clone()
    }
}
