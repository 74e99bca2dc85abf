//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form, so a reload reproduces every weight bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Dense, Matrix, ParamStore};
use crate::partitioner::model::{PartitionerModel, PartitionerTrunk};
use crate::partitioner::trunk::{ResidualTrunk, TrunkShape};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseRecord {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

pub fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn rows_matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::Checkpoint(format!("{what}: ragged matrix")));
    }
    Matrix::from_shape_vec((r, c), rows.concat()).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
}

impl DenseRecord {
    pub fn from_layer(l: &Dense, store: &ParamStore) -> Self {
        Self {
            w: matrix_rows(&l.realized_weight(store)),
            b: store.get(l.b).row(0).to_vec(),
        }
    }

    /// Copies the record into `l`, checking shapes; the realized weight
    /// becomes exactly the stored one.
    pub fn restore(&self, l: &mut Dense, store: &mut ParamStore, what: &str) -> Result<()> {
        let w = rows_matrix(&self.w, what)?;
        if w.dim() != store.get(l.w).dim() || self.b.len() != store.get(l.b).ncols() {
            return Err(Error::Checkpoint(format!(
                "{what}: expected weight {:?} and bias {}, got {:?} and {}",
                store.get(l.w).dim(),
                store.get(l.b).ncols(),
                w.dim(),
                self.b.len()
            )));
        }
        *store.get_mut(l.w) = w;
        *store.get_mut(l.b) = Matrix::from_shape_vec((1, self.b.len()), self.b.clone()).expect("row");
        if let Some(sn) = &mut l.sn {
            sn.state.sigma_hat = crate::numcore::sigma_max(store.get(l.w));
            sn.scale = 1.0;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionerCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub trunk: String,
    pub dim: usize,
    pub hidden: usize,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    #[serde(rename = "T")]
    pub blocks_count: usize,
    pub m: usize,
    pub k: usize,
    pub logit_bias: bool,
    pub blocks: Vec<Vec<DenseRecord>>,
    #[serde(default)]
    pub layers: Vec<DenseRecord>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

pub fn check_header(version: u32, kind: &str, expected: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {version}, expected {FORMAT_VERSION}"
        )));
    }
    if kind != expected {
        return Err(Error::Checkpoint(format!("kind is `{kind}`, expected `{expected}`")));
    }
    Ok(())
}

impl PartitionerCheckpoint {
    pub fn from_model(m: &PartitionerModel) -> Self {
        let (trunk, dim, hidden, lipschitz, blocks, layers) = match &m.trunk {
            PartitionerTrunk::Residual(t) => (
                "residual",
                t.dim,
                t.hidden,
                t.lipschitz,
                t.blocks
                    .iter()
                    .map(|b| b.layers.iter().map(|l| DenseRecord::from_layer(l, &t.store)).collect())
                    .collect(),
                Vec::new(),
            ),
            PartitionerTrunk::Unconstrained { store, mlp } => (
                "unconstrained",
                m.input_dim(),
                m.trunk.feature_dim(),
                0.0,
                Vec::new(),
                mlp.layers.iter().map(|l| DenseRecord::from_layer(l, store)).collect(),
            ),
        };
        let (t_count, m_count) = match &m.trunk {
            PartitionerTrunk::Residual(t) => (t.num_blocks(), t.layers_per_block()),
            PartitionerTrunk::Unconstrained { mlp, .. } => (mlp.layers.len(), 0),
        };
        Self {
            format_version: FORMAT_VERSION,
            kind: "partitioner".into(),
            trunk: trunk.into(),
            dim,
            hidden,
            lipschitz,
            blocks_count: t_count,
            m: m_count,
            k: m.k,
            logit_bias: m.logit_bias,
            blocks,
            layers,
            w: matrix_rows(m.logit_weight()),
            b: m.logit_bias_row().row(0).to_vec(),
        }
    }

    /// Rebuilds the model without checking the Lipschitz certificate.
    pub fn to_model_unchecked(&self) -> Result<PartitionerModel> {
        check_header(self.format_version, &self.kind, "partitioner")?;
        let mut rng = crate::numcore::stage_rng(0, 0);
        let trunk = match self.trunk.as_str() {
            "residual" => {
                if self.blocks.len() != self.blocks_count || self.blocks.iter().any(|b| b.len() != self.m) {
                    return Err(Error::Checkpoint("blocks do not match T and m".into()));
                }
                let shape = TrunkShape {
                    dim: self.dim,
                    hidden: self.hidden,
                    blocks: self.blocks_count,
                    layers_per_block: self.m,
                    lipschitz: self.lipschitz,
                };
                let mut t = ResidualTrunk::new(shape, 1.0, &mut rng).map_err(|e| Error::Checkpoint(e.to_string()))?;
                for (bi, (block, rec)) in t.blocks.iter_mut().zip(&self.blocks).enumerate() {
                    for (li, (l, r)) in block.layers.iter_mut().zip(rec).enumerate() {
                        r.restore(l, &mut t.store, &format!("blocks[{bi}][{li}]"))?;
                    }
                }
                PartitionerTrunk::Residual(t)
            }
            "unconstrained" => {
                if self.layers.is_empty() {
                    return Err(Error::Checkpoint("unconstrained trunk without layers".into()));
                }
                let width = self.layers[0].w.len();
                let mut t = PartitionerTrunk::unconstrained(self.dim, width, self.layers.len(), &mut rng);
                if let PartitionerTrunk::Unconstrained { store, mlp } = &mut t {
                    if mlp.layers.len() != self.layers.len() {
                        return Err(Error::Checkpoint("layer count mismatch".into()));
                    }
                    for (li, (l, r)) in mlp.layers.iter_mut().zip(&self.layers).enumerate() {
                        r.restore(l, store, &format!("layers[{li}]"))?;
                    }
                }
                t
            }
            other => return Err(Error::Checkpoint(format!("unknown trunk `{other}`"))),
        };
        let mut model = PartitionerModel::new(trunk, self.k, self.logit_bias, &mut rng)?;
        let w = rows_matrix(&self.w, "W")?;
        if self.b.len() != self.k {
            return Err(Error::Checkpoint("logit bias length differs from k".into()));
        }
        let b = Matrix::from_shape_vec((1, self.k), self.b.clone()).expect("row");
        model
            .set_head(w, b)
            .map_err(|_| Error::Checkpoint("W shape does not match k x d".into()))?;
        Ok(model)
    }

    /// Rebuilds the model and re-verifies the spectral certificate.
    pub fn to_model(&self) -> Result<PartitionerModel> {
        let model = self.to_model_unchecked()?;
        model.lipschitz_certificate()?;
        Ok(model)
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string(value)?;
    std::fs::write(path, s)?;
    Ok(())
}

pub fn save_partitioner(path: &Path, m: &PartitionerModel) -> Result<()> {
    save_json(path, &PartitionerCheckpoint::from_model(m))
}

pub fn parse_partitioner(text: &str) -> Result<PartitionerModel> {
    let ck: PartitionerCheckpoint =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("parse error: {e}")))?;
    ck.to_model()
}

pub fn load_partitioner(path: &Path) -> Result<PartitionerModel> {
    parse_partitioner(&std::fs::read_to_string(path)?)
}
