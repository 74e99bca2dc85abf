use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_header, matrix_rows, rows_matrix, DenseRecord, FORMAT_VERSION};
use crate::error::{invalid, Error, Result};
use crate::numcore::nn::normal_matrix;
use crate::numcore::{Bound, Dense, Graph, Matrix, Mlp, ParamId, ParamStore, Unary, Var};
use crate::synthdata::Point;

pub const GAN_ACTIVATION: Unary = Unary::LeakyRelu(0.2);

/// Log clamp used by both adversarial losses.
pub const GAN_LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanShape {
    pub k: usize,
    pub n_z: usize,
    pub embed_dim: usize,
    pub g_hidden: usize,
    pub g_layers: usize,
    pub d_hidden: usize,
    pub d_layers: usize,
}

/// Fan-in uniform biases, so the first-layer kinks do not all pass
/// through the origin.
pub fn init_biases<R: Rng + ?Sized>(mlp: &Mlp, store: &mut ParamStore, rng: &mut R) {
    for l in &mlp.layers {
        let bound = 1.0 / (l.input_dim(store) as f64).sqrt();
        store.get_mut(l.b).mapv_inplace(|_| rng.gen_range(-bound..bound));
    }
}

fn trunk_sizes(input: usize, hidden: usize, layers: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(std::iter::repeat_n(hidden, layers));
    s
}

/// Shared generator trunk fed with `concat(z, embed(i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorMixture {
    pub store: ParamStore,
    pub embed: ParamId,
    pub trunk: Mlp,
    pub n_z: usize,
    pub k: usize,
    pub pi_hat: Vec<f64>,
}

impl GeneratorMixture {
    pub fn new<R: Rng + ?Sized>(shape: &GanShape, init_std: Option<f64>, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let embed = store.add("G.embed", normal_matrix(shape.k, shape.embed_dim, 1.0, rng));
        let mut sizes = trunk_sizes(shape.n_z + shape.embed_dim, shape.g_hidden, shape.g_layers);
        sizes.push(2);
        let trunk = match init_std {
            Some(s) => Mlp::new(&mut store, "G", &sizes, GAN_ACTIVATION, s, rng),
            None => Mlp::new_scaled(&mut store, "G", &sizes, GAN_ACTIVATION, 2f64.sqrt(), rng),
        };
        init_biases(&trunk, &mut store, rng);
        Self {
            store,
            embed,
            trunk,
            n_z: shape.n_z,
            k: shape.k,
            pi_hat: vec![1.0 / shape.k as f64; shape.k],
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.store.get(self.embed).ncols()
    }

    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, z: Var, idx: Vec<usize>) -> Var {
        let e = g.gather_rows(p[self.embed], idx);
        let h = g.concat_cols(z, e);
        self.trunk.forward(g, p, h)
    }

    /// Outputs for every row of `z`, row `r` drawn from `G_{idx[r]}`.
    pub fn generate(&self, z: &Matrix, idx: &[usize]) -> Result<Matrix> {
        if z.ncols() != self.n_z || z.nrows() != idx.len() {
            return Err(Error::Shape(format!(
                "latent batch must be {} x {}",
                idx.len(),
                self.n_z
            )));
        }
        if let Some(&i) = idx.iter().find(|&&i| i >= self.k) {
            return Err(invalid(
                "partition",
                format!("index {i} out of range for k = {}", self.k),
            ));
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let x = self.forward_graph(&mut g, &p, zv, idx.to_vec());
        Ok(g.value(x).clone())
    }

    pub fn g_forward(&self, z: &[f64], i: usize) -> Result<Point> {
        let zm = Matrix::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        let x = self.generate(&zm, &[i])?;
        Ok([x[[0, 0]], x[[0, 1]]])
    }
}

/// Projection discriminator `score_i(x) = embed(i) . h(x) + linear(h(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorMixture {
    pub store: ParamStore,
    pub embed: ParamId,
    pub trunk: Mlp,
    pub head: Dense,
    pub k: usize,
}

impl DiscriminatorMixture {
    pub fn new<R: Rng + ?Sized>(shape: &GanShape, init_std: Option<f64>, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let sizes = trunk_sizes(2, shape.d_hidden, shape.d_layers);
        let h = shape.d_hidden;
        let (trunk, head_std, emb_std) = match init_std {
            Some(s) => (Mlp::new(&mut store, "D", &sizes, GAN_ACTIVATION, s, rng), s, s),
            None => {
                let t = Mlp::new_scaled(&mut store, "D", &sizes, GAN_ACTIVATION, 2f64.sqrt(), rng);
                let s = 1.0 / (h as f64).sqrt();
                (t, s, s)
            }
        };
        init_biases(&trunk, &mut store, rng);
        let embed = store.add("D.embed", normal_matrix(shape.k, h, emb_std, rng));
        let head = Dense::new(&mut store, "D.head", h, 1, head_std, rng);
        Self {
            store,
            embed,
            trunk,
            head,
            k: shape.k,
        }
    }

    pub fn with_spectral_norm<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        self.trunk = self.trunk.with_spectral_norm(&self.store, 1.0, rng);
        self.trunk.refresh(&self.store, 20);
        self
    }

    pub fn refresh(&mut self, iters: usize) {
        self.trunk.refresh(&self.store, iters);
    }

    pub fn score_graph(&self, g: &mut Graph, p: &Bound, x: Var, idx: Vec<usize>) -> Var {
        let h = self.trunk.features(g, p, x);
        let e = g.gather_rows(p[self.embed], idx);
        let he = g.mul(h, e);
        let proj = g.sum_cols(he);
        let lin = self.head.forward(g, p, h);
        g.add(proj, lin)
    }

    pub fn scores(&self, x: &Matrix, idx: &[usize]) -> Result<Vec<f64>> {
        if x.ncols() != 2 || x.nrows() != idx.len() {
            return Err(Error::Shape(
                "discriminator input must be n x 2 with one id per row".into(),
            ));
        }
        if let Some(&i) = idx.iter().find(|&&i| i >= self.k) {
            return Err(invalid(
                "partition",
                format!("index {i} out of range for k = {}", self.k),
            ));
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let s = self.score_graph(&mut g, &p, xv, idx.to_vec());
        Ok(g.value(s).column(0).to_vec())
    }

    pub fn d_score(&self, x: &Point, i: usize) -> Result<f64> {
        let xm = Matrix::from_shape_vec((1, 2), x.to_vec()).expect("1x2");
        Ok(self.scores(&xm, &[i])?[0])
    }
}

/// `-mean log D(real) - mean log(1 - D(fake))` on logits.
pub fn d_loss_graph(g: &mut Graph, s_real: Var, s_fake: Var) -> Var {
    let lr = g.log_sigmoid_clamped(s_real, GAN_LOG_FLOOR);
    let nf = g.neg(s_fake);
    let lf = g.log_sigmoid_clamped(nf, GAN_LOG_FLOOR);
    let a = g.mean(lr);
    let b = g.mean(lf);
    let t = g.add(a, b);
    g.neg(t)
}

pub fn d_loss(s_real: &[f64], s_fake: &[f64]) -> Result<f64> {
    if s_real.is_empty() || s_fake.is_empty() {
        return Err(invalid(
            "batch",
            "discriminator loss needs non-empty real and fake batches",
        ));
    }
    let mut g = Graph::new();
    let r = g.constant(Matrix::from_shape_vec((s_real.len(), 1), s_real.to_vec()).expect("col"));
    let f = g.constant(Matrix::from_shape_vec((s_fake.len(), 1), s_fake.to_vec()).expect("col"));
    let l = d_loss_graph(&mut g, r, f);
    Ok(g.scalar_value(l))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// `-mean log D(fake)`.
    NonSaturating,
    /// `mean log(1 - D(fake))`.
    Minimax,
}

pub fn g_adversarial_graph(g: &mut Graph, s_fake: Var, variant: LossVariant) -> Var {
    match variant {
        LossVariant::NonSaturating => {
            let l = g.log_sigmoid_clamped(s_fake, GAN_LOG_FLOOR);
            let m = g.mean(l);
            g.neg(m)
        }
        LossVariant::Minimax => {
            let nf = g.neg(s_fake);
            let l = g.log_sigmoid_clamped(nf, GAN_LOG_FLOOR);
            g.mean(l)
        }
    }
}

/// Adversarial term plus `lambda` times the mean guide value.
pub fn g_loss_guided_graph(g: &mut Graph, s_fake: Var, guide_rows: Var, lambda: f64, variant: LossVariant) -> Var {
    let adv = g_adversarial_graph(g, s_fake, variant);
    if lambda == 0.0 {
        return adv;
    }
    let r = g.mean(guide_rows);
    let r = g.scale(r, lambda);
    g.add(adv, r)
}

pub fn combine_g_loss(adversarial: f64, mean_guide: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(invalid("lambda", "must be nonnegative"));
    }
    Ok(adversarial + lambda * mean_guide)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start >= 0.0 && self.start.is_finite()) {
            return Err(invalid("gan.lambda_start", "must be finite and nonnegative"));
        }
        if !(self.end >= 0.0 && self.end <= self.start) {
            return Err(invalid("gan.lambda_end", "must lie in [0, lambda_start]"));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(invalid(
                "step",
                format!("{step} exceeds total_steps {}", self.total_steps),
            ));
        }
        if self.total_steps == 0 {
            return Ok(self.start);
        }
        if step == self.total_steps {
            return Ok(self.end);
        }
        let t = step as f64 / self.total_steps as f64;
        Ok(self.start + (self.end - self.start) * t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedNet {
    pub embed: Vec<Vec<f64>>,
    pub layers: Vec<DenseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<DenseRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub shape: GanShape,
    pub generator: EmbeddedNet,
    pub discriminator: EmbeddedNet,
    pub pi_hat: Vec<f64>,
}

impl GanCheckpoint {
    pub fn from_models(gen: &GeneratorMixture, disc: &DiscriminatorMixture, shape: GanShape) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: "ganmix".into(),
            shape,
            generator: EmbeddedNet {
                embed: matrix_rows(gen.store.get(gen.embed)),
                layers: gen
                    .trunk
                    .layers
                    .iter()
                    .map(|l| DenseRecord::from_layer(l, &gen.store))
                    .collect(),
                head: None,
            },
            discriminator: EmbeddedNet {
                embed: matrix_rows(disc.store.get(disc.embed)),
                layers: disc
                    .trunk
                    .layers
                    .iter()
                    .map(|l| DenseRecord::from_layer(l, &disc.store))
                    .collect(),
                head: Some(DenseRecord::from_layer(&disc.head, &disc.store)),
            },
            pi_hat: gen.pi_hat.clone(),
        }
    }

    pub fn to_models(&self) -> Result<(GeneratorMixture, DiscriminatorMixture)> {
        check_header(self.format_version, &self.kind, "ganmix")?;
        let s = &self.shape;
        if self.pi_hat.len() != s.k {
            return Err(Error::Checkpoint("pi_hat length differs from k".into()));
        }
        let total: f64 = self.pi_hat.iter().sum();
        if self.pi_hat.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Checkpoint("pi_hat is not a probability vector".into()));
        }
        let mut rng = crate::numcore::stage_rng(0, 0);
        let mut gen = GeneratorMixture::new(s, None, &mut rng);
        let mut disc = DiscriminatorMixture::new(s, None, &mut rng);
        restore_embed(&mut gen.store, gen.embed, &self.generator.embed, "generator.embed")?;
        restore_layers(&mut gen.trunk, &mut gen.store, &self.generator.layers, "generator")?;
        restore_embed(
            &mut disc.store,
            disc.embed,
            &self.discriminator.embed,
            "discriminator.embed",
        )?;
        restore_layers(
            &mut disc.trunk,
            &mut disc.store,
            &self.discriminator.layers,
            "discriminator",
        )?;
        let head = self
            .discriminator
            .head
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("discriminator head missing".into()))?;
        head.restore(&mut disc.head, &mut disc.store, "discriminator.head")?;
        gen.pi_hat = self.pi_hat.clone();
        Ok((gen, disc))
    }
}

fn restore_embed(store: &mut ParamStore, id: ParamId, rows: &[Vec<f64>], what: &str) -> Result<()> {
    let m = rows_matrix(rows, what)?;
    if m.dim() != store.get(id).dim() {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {:?}, got {:?}",
            store.get(id).dim(),
            m.dim()
        )));
    }
    *store.get_mut(id) = m;
    Ok(())
}

fn restore_layers(mlp: &mut Mlp, store: &mut ParamStore, recs: &[DenseRecord], what: &str) -> Result<()> {
    if recs.len() != mlp.layers.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {} layers, got {}",
            mlp.layers.len(),
            recs.len()
        )));
    }
    for (li, (l, r)) in mlp.layers.iter_mut().zip(recs).enumerate() {
        r.restore(l, store, &format!("{what}.layers[{li}]"))?;
    }
    // restored weights are already the realized ones
    for l in &mut mlp.layers {
        if let Some(sn) = &mut l.sn {
            sn.scale = 1.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> GanShape {
        GanShape {
            k: 3,
            n_z: 4,
            embed_dim: 8,
            g_hidden: 16,
            g_layers: 2,
            d_hidden: 16,
            d_layers: 2,
        }
    }

    #[test]
    fn generator_shapes_and_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = GeneratorMixture::new(&shape(), None, &mut rng);
        let z = [0.3, -0.1, 0.5, 1.0];
        let a = g.g_forward(&z, 0).unwrap();
        let b = g.g_forward(&z, 1).unwrap();
        assert!((a[0] - b[0]).abs() + (a[1] - b[1]).abs() > 1e-6);
        assert!(g.g_forward(&z, 3).is_err());
    }

    #[test]
    fn zero_trunk_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = GeneratorMixture::new(&shape(), None, &mut rng);
        for l in &g.trunk.layers {
            g.store.get_mut(l.w).fill(0.0);
        }
        let a = g.g_forward(&[1.0, 2.0, 3.0, 4.0], 0).unwrap();
        let b = g.g_forward(&[-1.0, 0.0, 0.5, 9.0], 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_projection_scores_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = DiscriminatorMixture::new(&shape(), None, &mut rng);
        d.store.get_mut(d.embed).fill(0.0);
        d.store.get_mut(d.head.w).fill(0.0);
        let s = d.d_score(&[0.4, -2.0], 1).unwrap();
        assert_eq!(s, 0.0);
        assert!((d_loss(&[s], &[s]).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn scores_differ_across_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = DiscriminatorMixture::new(&shape(), None, &mut rng);
        let a = d.d_score(&[0.4, -2.0], 0).unwrap();
        let b = d.d_score(&[0.4, -2.0], 2).unwrap();
        assert!((a - b).abs() > 1e-9);
        assert!(d.d_score(&[0.0, 0.0], 3).is_err());
    }

    #[test]
    fn loss_limits() {
        assert!(d_loss(&[40.0, 50.0], &[-40.0]).unwrap() < 1e-15);
        assert!(d_loss(&[], &[0.0]).is_err());
        assert_eq!(combine_g_loss(1.0, 3.0, 2.0).unwrap(), 7.0);
        assert!(combine_g_loss(1.0, 3.0, -1.0).is_err());
    }

    #[test]
    fn schedule() {
        let s = LambdaSchedule {
            start: 6.0,
            end: 1e-4,
            total_steps: 1000,
        };
        assert_eq!(s.lambda_at(0).unwrap(), 6.0);
        assert_eq!(s.lambda_at(1000).unwrap(), 1e-4);
        assert!((s.lambda_at(500).unwrap() - 3.00005).abs() < 1e-12);
        assert!(s.lambda_at(1001).is_err());
    }
}
