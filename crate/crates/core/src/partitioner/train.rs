use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{PartitionerModel, PartitionerTrunk};
use super::objective::{clustering_objective_graph, ClusterLossWeights};
use super::trunk::{ResidualTrunk, TrunkShape};
use crate::embed::NeighborGraph;
use crate::error::{invalid, Error, Result};
use crate::numcore::nn::normal_matrix;
use crate::numcore::{stage_rng, AdamHyper, AdamState, Graph, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInit {
    /// Farthest-point seeds in feature space, nearest-seed logits.
    Kcenter,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrunkKind {
    Residual,
    Unconstrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionerConfig {
    pub k: usize,
    #[serde(rename = "T")]
    pub blocks: usize,
    pub m: usize,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub hidden: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub logit_bias: bool,
    pub head_init: HeadInit,
    /// Initial logit margin between neighbouring seeds.
    pub init_margin: f64,
    pub trunk: TrunkKind,
}

impl Default for PartitionerConfig {
    fn default() -> Self {
        Self {
            k: 25,
            blocks: 4,
            m: 2,
            lipschitz: 0.9,
            hidden: 16,
            alpha: 5.0,
            beta: 1e-3,
            lr: 1e-4,
            epochs: 20,
            batch_size: 256,
            logit_bias: true,
            head_init: HeadInit::Kcenter,
            init_margin: 4.0,
            trunk: TrunkKind::Residual,
        }
    }
}

impl PartitionerConfig {
    pub fn shape(&self, dim: usize) -> TrunkShape {
        TrunkShape {
            dim,
            hidden: self.hidden,
            blocks: self.blocks,
            layers_per_block: self.m,
            lipschitz: self.lipschitz,
        }
    }

    pub fn weights(&self) -> ClusterLossWeights {
        ClusterLossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("partitioner.k", "must be at least 1"));
        }
        if self.blocks == 0 {
            return Err(invalid("partitioner.T", "must be at least 1"));
        }
        if self.m == 0 {
            return Err(invalid("partitioner.m", "must be at least 1"));
        }
        if !(self.lipschitz > 0.0 && self.lipschitz < 1.0) {
            return Err(invalid("partitioner.L", "must lie in (0, 1)"));
        }
        if self.hidden == 0 {
            return Err(invalid("partitioner.hidden", "must be at least 1"));
        }
        self.weights().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("partitioner.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("partitioner.batch_size", "must be at least 1"));
        }
        if !(self.init_margin > 0.0 && self.init_margin.is_finite()) {
            return Err(invalid("partitioner.init_margin", "must be positive"));
        }
        Ok(())
    }
}

pub struct PartitionerTraining {
    pub model: PartitionerModel,
    /// Batch objective per anchor at every step.
    pub trace: Vec<f64>,
}

/// Greedy farthest-point selection of `k` rows of `y`.
pub fn farthest_point_seeds<R: Rng + ?Sized>(y: &Matrix, k: usize, rng: &mut R) -> Vec<usize> {
    let n = y.nrows();
    let sq = |a: usize, b: usize| -> f64 {
        y.row(a)
            .iter()
            .zip(y.row(b).iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum()
    };
    let first = rng.gen_range(0..n);
    let mut seeds = vec![first];
    let mut dmin: Vec<f64> = (0..n).map(|i| sq(i, first)).collect();
    while seeds.len() < k.min(n) {
        let next = (0..n)
            .max_by(|&a, &b| dmin[a].total_cmp(&dmin[b]).then(b.cmp(&a)))
            .expect("n > 0");
        seeds.push(next);
        for (i, d) in dmin.iter_mut().enumerate() {
            *d = d.min(sq(i, next));
        }
    }
    seeds
}

fn kcenter_head<R: Rng + ?Sized>(model: &mut PartitionerModel, data: &Matrix, margin: f64, rng: &mut R) -> Result<()> {
    let y = model.features(data);
    let seeds = farthest_point_seeds(&y, model.k, rng);
    let feat = y.ncols();
    let mut w = Matrix::zeros((model.k, feat));
    let mut b = Matrix::zeros((1, model.k));
    if seeds.len() < 2 {
        return model.set_head(w, b);
    }
    let mut d2min = f64::INFINITY;
    for (a, &i) in seeds.iter().enumerate() {
        for &j in &seeds[a + 1..] {
            let d: f64 = y
                .row(i)
                .iter()
                .zip(y.row(j).iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            d2min = d2min.min(d);
        }
    }
    if !(d2min > 0.0) {
        return Err(Error::Data(
            "duplicate points prevent seeding distinct partitions".into(),
        ));
    }
    let gamma = 2.0 * margin / d2min;
    for (c, &s) in seeds.iter().enumerate() {
        let row = y.row(s);
        let nrm2 = row.dot(&row);
        for j in 0..feat {
            w[[c, j]] = gamma * row[j];
        }
        b[[0, c]] = -0.5 * gamma * nrm2;
    }
    // partitions beyond the sample count stay at zero logits
    model.set_head(w, b)
}

/// Builds the untrained partitioner, optionally from a pretext trunk.
pub fn init_partitioner(
    data: &Matrix,
    cfg: &PartitionerConfig,
    seed: u64,
    init_trunk: Option<ResidualTrunk>,
) -> Result<PartitionerModel> {
    cfg.validate()?;
    let dim = data.ncols();
    let mut rng = stage_rng(seed, 20);
    let trunk = match (cfg.trunk, init_trunk) {
        (TrunkKind::Residual, Some(t)) => {
            if t.dim != dim {
                return Err(Error::Shape("pretext trunk dimension differs from data".into()));
            }
            PartitionerTrunk::Residual(t)
        }
        (TrunkKind::Residual, None) => PartitionerTrunk::Residual(ResidualTrunk::new(cfg.shape(dim), 1.0, &mut rng)?),
        (TrunkKind::Unconstrained, _) => PartitionerTrunk::unconstrained(dim, 64, 3, &mut rng),
    };
    let mut model = PartitionerModel::new(trunk, cfg.k, cfg.logit_bias, &mut rng)?;
    match cfg.head_init {
        HeadInit::Kcenter => kcenter_head(&mut model, data, cfg.init_margin, &mut rng)?,
        HeadInit::Random => {
            let feat = model.trunk.feature_dim();
            let w = normal_matrix(cfg.k, feat, 1.0 / (feat as f64).sqrt(), &mut rng);
            model.set_head(w, Matrix::zeros((1, cfg.k)))?;
        }
    }
    Ok(model)
}

/// Maximizes the clustering objective with Adam over anchor batches and
/// all of their graph neighbours.
pub fn train_partitioner(
    data: &Matrix,
    graph: &NeighborGraph,
    cfg: &PartitionerConfig,
    seed: u64,
    init_trunk: Option<ResidualTrunk>,
) -> Result<PartitionerTraining> {
    let n = data.nrows();
    if n == 0 {
        return Err(invalid("data", "partitioner training needs samples"));
    }
    if graph.len() != n {
        return Err(invalid("graph", "neighbour graph must index the training data"));
    }
    if graph.neighbors.iter().any(|ns| ns.is_empty()) {
        return Err(invalid("graph", "every sample needs at least one neighbour"));
    }
    let mut model = init_partitioner(data, cfg, seed, init_trunk)?;
    let hyper = AdamHyper {
        lr: cfg.lr,
        ..AdamHyper::default()
    };
    let mut opt_t = AdamState::new(model.trunk.store(), hyper);
    let mut opt_h = AdamState::new(&model.head, hyper);
    let mut rng = stage_rng(seed, 21);
    let mut order: Vec<usize> = (0..n).collect();
    let weights = cfg.weights();
    let mut trace = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut rows: Vec<usize> = chunk.to_vec();
            let mut edge_anchor = Vec::new();
            for (a, &i) in chunk.iter().enumerate() {
                for &j in &graph.neighbors[i] {
                    rows.push(j);
                    edge_anchor.push(a);
                }
            }
            let x = data.select(ndarray::Axis(0), &rows);
            model.trunk.refresh(1);
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let xv = g.constant(x);
            let f = model.logits_graph(&mut g, &p, xv);
            let s = g.softmax_rows(f);
            let obj = clustering_objective_graph(&mut g, s, chunk.len(), &edge_anchor, weights);
            let loss = g.scale(obj, -1.0 / chunk.len() as f64);
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    stage: "partitioner",
                    step: trace.len(),
                });
            }
            trace.push(-lv);
            g.backward(loss)?;
            opt_t.step(model.trunk.store_mut(), &p.trunk.grads(&g))?;
            opt_h.step(&mut model.head, &p.head.grads(&g))?;
        }
    }
    if let PartitionerTrunk::Residual(t) = &mut model.trunk {
        t.freeze();
    }
    Ok(PartitionerTraining { model, trace })
}
