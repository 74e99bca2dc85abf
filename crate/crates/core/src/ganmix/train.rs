use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{
    d_loss_graph, g_loss_guided_graph, DiscriminatorMixture, GanShape, GeneratorMixture, LambdaSchedule, LossVariant,
};
use crate::error::{invalid, Error, Result};
use crate::guide::guide_rows_multi_graph;
use crate::io::fmt17;
use crate::numcore::{stage_rng, AdamHyper, AdamState, Graph, Matrix};
use crate::partitioner::PartitionerModel;
use crate::synthdata::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionSampling {
    /// One partition per optimizer step.
    PerStep,
    /// A partition drawn independently for every batch row.
    PerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub n_z: usize,
    pub embed_dim: usize,
    pub g_hidden: usize,
    pub g_layers: usize,
    pub d_hidden: usize,
    pub d_layers: usize,
    pub lr: f64,
    /// Fraction of `total_steps` after which both learning rates decay
    /// linearly to zero; 1 keeps them constant.
    pub lr_decay_start: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub d_steps_per_g: usize,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub loss_variant: LossVariant,
    /// Std of the initial weights; `null` selects fan-in scaling.
    pub init_std: Option<f64>,
    pub spectral_norm: bool,
    /// Multiplier on the generator's output-layer initial weights.
    pub g_out_gain: f64,
    pub partition_sampling: PartitionSampling,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            n_z: 4,
            embed_dim: 8,
            g_hidden: 64,
            g_layers: 3,
            d_hidden: 64,
            d_layers: 3,
            lr: 2e-4,
            lr_decay_start: 0.5,
            beta1: 0.0,
            beta2: 0.999,
            d_steps_per_g: 4,
            lambda_start: 6.0,
            lambda_end: 1e-4,
            total_steps: 30000,
            batch_size: 64,
            loss_variant: LossVariant::NonSaturating,
            init_std: None,
            spectral_norm: false,
            g_out_gain: 0.1,
            partition_sampling: PartitionSampling::PerSample,
        }
    }
}

impl GanConfig {
    pub fn shape(&self, k: usize) -> GanShape {
        GanShape {
            k,
            n_z: self.n_z,
            embed_dim: self.embed_dim,
            g_hidden: self.g_hidden,
            g_layers: self.g_layers,
            d_hidden: self.d_hidden,
            d_layers: self.d_layers,
        }
    }

    pub fn schedule(&self) -> LambdaSchedule {
        LambdaSchedule {
            start: self.lambda_start,
            end: self.lambda_end,
            total_steps: self.total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("gan.n_z", self.n_z),
            ("gan.embed_dim", self.embed_dim),
            ("gan.g_hidden", self.g_hidden),
            ("gan.g_layers", self.g_layers),
            ("gan.d_hidden", self.d_hidden),
            ("gan.d_layers", self.d_layers),
            ("gan.d_steps_per_g", self.d_steps_per_g),
            ("gan.batch_size", self.batch_size),
        ];
        for (f, v) in pos {
            if v == 0 {
                return Err(invalid(f, "must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("gan.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_start) {
            return Err(invalid("gan.lr_decay_start", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(invalid("gan.beta1", "must lie in [0, 1)"));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(invalid("gan.beta2", "must lie in (0, 1)"));
        }
        if !(self.g_out_gain > 0.0 && self.g_out_gain.is_finite()) {
            return Err(invalid("gan.g_out_gain", "must be positive"));
        }
        if let Some(s) = self.init_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid("gan.init_std", "must be positive"));
            }
        }
        self.schedule().validate()
    }
}

pub struct GanTraining {
    pub generator: GeneratorMixture,
    pub discriminator: DiscriminatorMixture,
    pub shape: GanShape,
    pub d_losses: Vec<f64>,
    pub g_losses: Vec<f64>,
}

fn latent<R: Rng + ?Sized>(n: usize, n_z: usize, rng: &mut R) -> Matrix {
    Matrix::from_shape_simple_fn((n, n_z), || rng.sample(StandardNormal))
}

/// Partition of every data row and the empirical frequencies.
pub fn route(data: &Matrix, partitioner: &PartitionerModel) -> (Vec<Vec<usize>>, Vec<f64>) {
    let a = partitioner.assign_batch(data);
    let mut groups = vec![Vec::new(); partitioner.k];
    for (r, &i) in a.iter().enumerate() {
        groups[i].push(r);
    }
    let n = data.nrows().max(1) as f64;
    let pi = groups.iter().map(|g| g.len() as f64 / n).collect();
    (groups, pi)
}

/// Alternating training: each step draws partition ids in proportion to
/// data mass (once per step or once per batch row, see
/// [`PartitionSampling`]), takes `d_steps_per_g` discriminator steps and
/// one guided generator step.
fn lr_factor(cfg: &GanConfig, step: usize) -> f64 {
    let start = cfg.lr_decay_start * cfg.total_steps as f64;
    let span = cfg.total_steps as f64 - start;
    if (step as f64) < start || span <= 0.0 {
        1.0
    } else {
        (cfg.total_steps - step) as f64 / span
    }
}

pub fn train_gan(data: &Matrix, partitioner: &PartitionerModel, cfg: &GanConfig, seed: u64) -> Result<GanTraining> {
    cfg.validate()?;
    if data.nrows() == 0 || data.ncols() != 2 {
        return Err(invalid("data", "GAN training needs a non-empty n x 2 dataset"));
    }
    let k = partitioner.k;
    let (groups, pi_hat) = route(data, partitioner);
    let assigned = partitioner.assign_batch(data);
    let pick = WeightedIndex::new(&pi_hat).map_err(|_| Error::Data("every partition is empty".into()))?;
    let shape = cfg.shape(k);
    let mut rng = stage_rng(seed, 30);
    let mut gen = GeneratorMixture::new(&shape, cfg.init_std, &mut rng);
    if let Some(last) = gen.trunk.layers.last() {
        *gen.store.get_mut(last.w) *= cfg.g_out_gain;
    }
    gen.pi_hat = pi_hat;
    let mut disc = DiscriminatorMixture::new(&shape, cfg.init_std, &mut rng);
    if cfg.spectral_norm {
        disc = disc.with_spectral_norm(&mut rng);
    }
    let hyper = AdamHyper {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..AdamHyper::default()
    };
    let mut opt_g = AdamState::new(&gen.store, hyper);
    let mut opt_d = AdamState::new(&disc.store, hyper);
    let schedule = cfg.schedule();
    let b = cfg.batch_size;
    let mut d_losses = Vec::with_capacity(cfg.total_steps);
    let mut g_losses = Vec::with_capacity(cfg.total_steps);
    let mut rng = stage_rng(seed, 31);

    for step in 0..cfg.total_steps {
        let idx: Vec<usize> = match cfg.partition_sampling {
            PartitionSampling::PerStep => vec![pick.sample(&mut rng); b],
            PartitionSampling::PerSample => (0..b).map(|_| pick.sample(&mut rng)).collect(),
        };
        let lambda = schedule.lambda_at(step)?;
        let lr = cfg.lr * lr_factor(cfg, step);
        opt_g.hyper.lr = lr;
        opt_d.hyper.lr = lr;
        let mut last_d = 0.0;
        for _ in 0..cfg.d_steps_per_g {
            let rows: Vec<usize> = idx
                .iter()
                .map(|&i| groups[i][rng.gen_range(0..groups[i].len())])
                .collect();
            let real = data.select(ndarray::Axis(0), &rows);
            debug_assert!(rows.iter().zip(&idx).all(|(&r, &i)| assigned[r] == i));
            let fake = gen.generate(&latent(b, cfg.n_z, &mut rng), &idx)?;
            if cfg.spectral_norm {
                disc.refresh(1);
            }
            let mut g = Graph::new();
            let p = disc.store.bind(&mut g, true);
            let rv = g.constant(real);
            let fv = g.constant(fake);
            let sr = disc.score_graph(&mut g, &p, rv, idx.clone());
            let sf = disc.score_graph(&mut g, &p, fv, idx.clone());
            let loss = d_loss_graph(&mut g, sr, sf);
            last_d = g.scalar_value(loss);
            if !last_d.is_finite() {
                return Err(Error::Divergence {
                    stage: "discriminator",
                    step,
                });
            }
            g.backward(loss)?;
            opt_d.step(&mut disc.store, &p.grads(&g))?;
        }
        let mut g = Graph::new();
        let pg = gen.store.bind(&mut g, true);
        let pd = disc.store.bind(&mut g, false);
        let pp = partitioner.bind(&mut g, false);
        let zv = g.constant(latent(b, cfg.n_z, &mut rng));
        let x = gen.forward_graph(&mut g, &pg, zv, idx.clone());
        let sf = disc.score_graph(&mut g, &pd, x, idx.clone());
        let f = partitioner.logits_graph(&mut g, &pp, x);
        let r = guide_rows_multi_graph(&mut g, f, &idx);
        let loss = g_loss_guided_graph(&mut g, sf, r, lambda, cfg.loss_variant);
        let lv = g.scalar_value(loss);
        if !lv.is_finite() {
            return Err(Error::Divergence {
                stage: "generator",
                step,
            });
        }
        g.backward(loss)?;
        opt_g.step(&mut gen.store, &pg.grads(&g))?;
        d_losses.push(last_d);
        g_losses.push(lv);
    }
    if cfg.spectral_norm {
        for l in &mut disc.trunk.layers {
            l.refresh_exact(&disc.store);
            l.freeze(&mut disc.store);
        }
    }
    Ok(GanTraining {
        generator: gen,
        discriminator: disc,
        shape,
        d_losses,
        g_losses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSample {
    pub x: Point,
    pub partition: usize,
    pub tries: usize,
    pub truncated: bool,
}

/// Draws `i ~ pi_hat`, `z ~ N(0, I)` and keeps redrawing `z` until the
/// output lands in `A_i` or `max_tries` is spent, in which case the draw
/// with the smallest guide value is kept.
pub fn sample_mixture(
    gen: &GeneratorMixture,
    partitioner: &PartitionerModel,
    n: usize,
    seed: u64,
    max_tries: usize,
) -> Result<Vec<MixtureSample>> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    if max_tries == 0 {
        return Err(invalid("max_tries", "must be at least 1"));
    }
    if gen.k != partitioner.k {
        return Err(Error::Shape("generator and partitioner disagree on k".into()));
    }
    let mut rng = stage_rng(seed, 40);
    let parts: Vec<usize> = if gen.k == 1 {
        vec![0; n]
    } else {
        let pick = WeightedIndex::new(&gen.pi_hat).map_err(|_| Error::Data("pi_hat has no mass".into()))?;
        (0..n).map(|_| pick.sample(&mut rng)).collect()
    };
    let mut out: Vec<MixtureSample> = parts
        .iter()
        .map(|&i| MixtureSample {
            x: [f64::NAN, f64::NAN],
            partition: i,
            tries: 0,
            truncated: true,
        })
        .collect();
    let mut best_r = vec![f64::INFINITY; n];
    let mut pending: Vec<usize> = (0..n).collect();
    for _ in 0..max_tries {
        if pending.is_empty() {
            break;
        }
        let idx: Vec<usize> = pending.iter().map(|&s| parts[s]).collect();
        let x = gen.generate(&latent(pending.len(), gen.n_z, &mut rng), &idx)?;
        let f = partitioner.logits(&x);
        let mut still = Vec::with_capacity(pending.len());
        for (r, &s) in pending.iter().enumerate() {
            let i = parts[s];
            let row = f.row(r);
            let fi = row[i];
            let rv: f64 = row.iter().map(|&fc| (fc - fi).max(0.0)).sum();
            let o = &mut out[s];
            o.tries += 1;
            let accepted = row.iter().all(|&fc| fc <= fi);
            if accepted || rv < best_r[s] {
                best_r[s] = rv;
                o.x = [x[[r, 0]], x[[r, 1]]];
            }
            if accepted {
                o.truncated = false;
            } else {
                still.push(s);
            }
        }
        pending = still;
    }
    Ok(out)
}

pub fn write_samples_csv<W: Write>(mut w: W, s: &[MixtureSample]) -> Result<()> {
    writeln!(w, "x0,x1,partition_id,tries")?;
    for m in s {
        writeln!(w, "{},{},{},{}", fmt17(m.x[0]), fmt17(m.x[1]), m.partition, m.tries)?;
    }
    Ok(())
}

/// Parses the sample CSV, returning points and partition ids.
pub fn read_samples_csv<R: std::io::BufRead>(r: R) -> Result<Vec<(Point, i64)>> {
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if ln == 0 {
            if line.trim() != "x0,x1,partition_id,tries" {
                return Err(Error::Data(format!("unexpected sample header `{line}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Data(format!("line {}: expected 4 fields", ln + 1)));
        }
        let p = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Data(format!("line {}: bad number `{s}`", ln + 1)))
        };
        let id: i64 = f[2]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad partition id", ln + 1)))?;
        out.push(([p(f[0])?, p(f[1])?], id));
    }
    Ok(out)
}
