use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trunk::ResidualTrunk;
use crate::error::{invalid, Error, Result};
use crate::numcore::nn::normal_matrix;
use crate::numcore::{softmax_rows, Bound, Graph, Matrix, Mlp, ParamId, ParamStore, Unary, Var};
use crate::synthdata::Point;

/// Feature extractor in front of the logit layer.
#[derive(Clone, Debug, PartialEq)]
pub enum PartitionerTrunk {
    /// Dimension-preserving bi-Lipschitz residual network.
    Residual(ResidualTrunk),
    /// Plain ReLU network without Lipschitz control; used as a control.
    Unconstrained { store: ParamStore, mlp: Mlp },
}

impl PartitionerTrunk {
    pub fn unconstrained<R: Rng + ?Sized>(dim: usize, width: usize, depth: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut sizes = vec![dim];
        sizes.extend(std::iter::repeat_n(width, depth.max(1)));
        let mlp = Mlp::new_scaled(&mut store, "mlp", &sizes, Unary::Relu, 2f64.sqrt(), rng);
        Self::Unconstrained { store, mlp }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Self::Residual(t) => &t.store,
            Self::Unconstrained { store, .. } => store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Residual(t) => &mut t.store,
            Self::Unconstrained { store, .. } => store,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Self::Residual(t) => t.dim,
            Self::Unconstrained { store, mlp } => mlp.layers.last().map_or(0, |l| l.output_dim(store)),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Residual(t) => t.dim,
            Self::Unconstrained { store, mlp } => mlp.layers.first().map_or(0, |l| l.input_dim(store)),
        }
    }

    pub fn refresh(&mut self, iters: usize) {
        if let Self::Residual(t) = self {
            t.refresh(iters);
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        match self {
            Self::Residual(t) => t.forward(g, p, x),
            Self::Unconstrained { mlp, .. } => mlp.features(g, p, x),
        }
    }
}

/// Graph handles for a bound partitioner.
pub struct PartitionerBinds {
    pub trunk: Bound,
    pub head: Bound,
}

/// Space partitioner: `f(x) = W phi(x) (+ b)`, assignment by argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionerModel {
    pub trunk: PartitionerTrunk,
    pub head: ParamStore,
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub logit_bias: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCertificate {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub max_layer_sigma: f64,
    pub per_block_c0: f64,
    pub trunk_c0_lower: f64,
}

/// Lower Lipschitz constant of one residual block: `1 - L^m`.
pub fn block_c0(lipschitz: f64, layers_per_block: usize) -> f64 {
    1.0 - lipschitz.powi(layers_per_block as i32)
}

/// Composed lower bound over `blocks` residual blocks.
pub fn trunk_c0(lipschitz: f64, layers_per_block: usize, blocks: usize) -> f64 {
    block_c0(lipschitz, layers_per_block).powi(blocks as i32)
}

impl PartitionerModel {
    pub fn new<R: Rng + ?Sized>(trunk: PartitionerTrunk, k: usize, logit_bias: bool, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(invalid("partitioner.k", "need at least one partition"));
        }
        let feat = trunk.feature_dim();
        let mut head = ParamStore::new();
        let w = head.add("W", normal_matrix(k, feat, 1.0 / (feat as f64).sqrt(), rng));
        let b = head.add("b", Matrix::zeros((1, k)));
        Ok(Self {
            trunk,
            head,
            w,
            b,
            k,
            logit_bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn logit_weight(&self) -> &Matrix {
        self.head.get(self.w)
    }

    pub fn logit_bias_row(&self) -> &Matrix {
        self.head.get(self.b)
    }

    pub fn set_head(&mut self, w: Matrix, b: Matrix) -> Result<()> {
        if w.dim() != self.head.get(self.w).dim() || b.dim() != (1, self.k) {
            return Err(Error::Shape("logit layer shape mismatch".into()));
        }
        *self.head.get_mut(self.w) = w;
        *self.head.get_mut(self.b) = b;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> PartitionerBinds {
        PartitionerBinds {
            trunk: self.trunk.store().bind(g, trainable),
            head: self.head.bind(g, trainable),
        }
    }

    pub fn features_graph(&self, g: &mut Graph, p: &PartitionerBinds, x: Var) -> Var {
        self.trunk.forward(g, &p.trunk, x)
    }

    pub fn logits_graph(&self, g: &mut Graph, p: &PartitionerBinds, x: Var) -> Var {
        let h = self.features_graph(g, p, x);
        let b = self.logit_bias.then(|| p.head[self.b]);
        g.linear(h, p.head[self.w], b)
    }

    pub fn features(&self, x: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let h = self.features_graph(&mut g, &p, xv);
        g.value(h).clone()
    }

    /// Logits for every row of `x`.
    pub fn logits(&self, x: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.logits_graph(&mut g, &p, xv);
        g.value(f).clone()
    }

    pub fn logits_point(&self, x: &Point) -> Vec<f64> {
        let m = Matrix::from_shape_vec((1, 2), x.to_vec()).expect("1x2");
        self.logits(&m).row(0).to_vec()
    }

    pub fn probs(&self, x: &Matrix) -> Matrix {
        softmax_rows(&self.logits(x))
    }

    pub fn assign_batch(&self, x: &Matrix) -> Vec<usize> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect()
    }

    pub fn assign(&self, x: &Point) -> usize {
        argmax(self.logits_point(x).into_iter())
    }

    /// Checks the residual-trunk hypothesis and returns its constants.
    pub fn lipschitz_certificate(&self) -> Result<LipschitzCertificate> {
        let PartitionerTrunk::Residual(t) = &self.trunk else {
            return Err(Error::Hypothesis(
                "partitioner trunk is not a dimension-preserving residual network".into(),
            ));
        };
        let sigmas = t.layer_sigmas();
        let mut max_sigma = 0.0f64;
        for (bi, block) in sigmas.iter().enumerate() {
            for (li, &s) in block.iter().enumerate() {
                if !(s < 1.0) {
                    return Err(Error::Certificate {
                        block: bi,
                        layer: li,
                        sigma: s,
                    });
                }
                max_sigma = max_sigma.max(s);
            }
        }
        let m = t.layers_per_block();
        let blocks = t.num_blocks();
        Ok(LipschitzCertificate {
            blocks,
            layers_per_block: m,
            max_layer_sigma: max_sigma,
            per_block_c0: block_c0(max_sigma, m),
            trunk_c0_lower: trunk_c0(max_sigma, m, blocks),
        })
    }
}

/// First index of the maximum; NaNs never win.
pub fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
