//! Empirical check of the total-variation lower bound: a single
//! Lipschitz-capped generator `R -> R` fit to two disjoint segments.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::modes::marginal_tv;
use super::theorems::{delta_bound, TheoremOneInstance};
use crate::error::{invalid, Error, Result};
use crate::ganmix::{d_loss_graph, g_adversarial_graph, LossVariant};
use crate::numcore::{sigma_max, stage_rng, AdamHyper, AdamState, Graph, Matrix, Mlp, ParamStore, Unary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct CappedGanConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub g_hidden: usize,
    /// Hidden layers of the generator; it has `g_layers + 1` dense layers.
    pub g_layers: usize,
    pub d_hidden: usize,
    pub d_layers: usize,
    pub lr: f64,
    pub beta1: f64,
    pub segment_width: f64,
    pub eval_samples: usize,
}

impl Default for CappedGanConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 128,
            g_hidden: 32,
            g_layers: 2,
            d_hidden: 64,
            d_layers: 2,
            lr: 1e-3,
            beta1: 0.5,
            segment_width: 1.0,
            eval_samples: 100_000,
        }
    }
}

impl CappedGanConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("g_hidden", self.g_hidden),
            ("d_hidden", self.d_hidden),
            ("eval_samples", self.eval_samples),
        ] {
            if v == 0 {
                return Err(invalid(f, "must be at least 1"));
            }
        }
        if !(self.lr > 0.0) {
            return Err(invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(invalid("beta1", "must lie in [0, 1)"));
        }
        if !(self.segment_width > 0.0 && self.segment_width.is_finite()) {
            return Err(invalid("segment_width", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CappedGanReport {
    pub delta: f64,
    pub empirical_tv: f64,
    /// Mass on (first segment, second segment, elsewhere).
    pub model_hist: [f64; 3],
    pub data_hist: [f64; 3],
    /// Product of the exact layer spectral norms after training.
    pub lipschitz_upper: f64,
}

/// Segments `[-d/2 - w, -d/2]` and `[d/2, d/2 + w]`.
fn segments(d: f64, w: f64) -> [(f64, f64); 2] {
    [(-0.5 * d - w, -0.5 * d), (0.5 * d, 0.5 * d + w)]
}

fn bin(x: f64, segs: &[(f64, f64); 2]) -> usize {
    segs.iter().position(|&(a, b)| x >= a && x <= b).unwrap_or(2)
}

/// Trains a generator whose layers are each spectrally normalized to
/// `c^(1/depth)` and compares its three-bin marginal to the data's.
pub fn verify_thm1_empirically(
    separation: f64,
    c: f64,
    pis: [f64; 2],
    cfg: &CappedGanConfig,
    seed: u64,
) -> Result<CappedGanReport> {
    cfg.validate()?;
    let inst = TheoremOneInstance::new(pis.to_vec(), vec![separation; 2], c)?;
    let delta = delta_bound(&inst);
    let segs = segments(separation, cfg.segment_width);

    let mut rng = stage_rng(seed, 50);
    let act = Unary::LeakyRelu(0.2);
    let mut gsizes = vec![1];
    gsizes.extend(std::iter::repeat_n(cfg.g_hidden, cfg.g_layers));
    gsizes.push(1);
    let depth = gsizes.len() - 1;
    let mut gs = ParamStore::new();
    let mut gen = Mlp::new_scaled(&mut gs, "g", &gsizes, act, 1.0, &mut rng);
    gen = gen.with_spectral_norm(&gs, c.powf(1.0 / depth as f64), &mut rng);
    gen.refresh(&gs, 20);

    let mut dsizes = vec![1];
    dsizes.extend(std::iter::repeat_n(cfg.d_hidden, cfg.d_layers));
    dsizes.push(1);
    let mut ds = ParamStore::new();
    let disc = Mlp::new_scaled(&mut ds, "d", &dsizes, act, 2f64.sqrt(), &mut rng);

    let hyper = AdamHyper {
        lr: cfg.lr,
        beta1: cfg.beta1,
        ..AdamHyper::default()
    };
    let mut opt_g = AdamState::new(&gs, hyper);
    let mut opt_d = AdamState::new(&ds, hyper);
    let mut rng = stage_rng(seed, 51);
    let b = cfg.batch_size;
    let noise =
        |n: usize, rng: &mut rand_chacha::ChaCha8Rng| Matrix::from_shape_fn((n, 1), |_| StandardNormal.sample(rng));

    for step in 0..cfg.steps {
        let real = Matrix::from_shape_fn((b, 1), |_| {
            let (a, e) = if rng.gen::<f64>() < pis[0] { segs[0] } else { segs[1] };
            rng.gen_range(a..=e)
        });
        let z = noise(b, &mut rng);
        gen.refresh(&gs, 1);

        let mut g = Graph::new();
        let pg = gs.bind(&mut g, false);
        let pd = ds.bind(&mut g, true);
        let zv = g.constant(z);
        let fake = gen.forward(&mut g, &pg, zv);
        let rv = g.constant(real);
        let sr = disc.forward(&mut g, &pd, rv);
        let sf = disc.forward(&mut g, &pd, fake);
        let loss = d_loss_graph(&mut g, sr, sf);
        if !g.scalar_value(loss).is_finite() {
            return Err(Error::Divergence {
                stage: "capped discriminator",
                step,
            });
        }
        g.backward(loss)?;
        opt_d.step(&mut ds, &pd.grads(&g))?;

        let mut g = Graph::new();
        let pg = gs.bind(&mut g, true);
        let pd = ds.bind(&mut g, false);
        let zv = g.constant(noise(b, &mut rng));
        let fake = gen.forward(&mut g, &pg, zv);
        let sf = disc.forward(&mut g, &pd, fake);
        let loss = g_adversarial_graph(&mut g, sf, LossVariant::NonSaturating);
        if !g.scalar_value(loss).is_finite() {
            return Err(Error::Divergence {
                stage: "capped generator",
                step,
            });
        }
        g.backward(loss)?;
        opt_g.step(&mut gs, &pg.grads(&g))?;
    }

    gen.refresh_exact(&gs);
    let lipschitz_upper = gen.layers.iter().map(|l| sigma_max(&l.realized_weight(&gs))).product();
    let mut g = Graph::new();
    let pg = gs.bind(&mut g, false);
    let zv = g.constant(noise(cfg.eval_samples, &mut rng));
    let x = gen.forward(&mut g, &pg, zv);
    let mut counts = [0.0; 3];
    for &v in g.value(x).iter() {
        counts[bin(v, &segs)] += 1.0;
    }
    let n = cfg.eval_samples as f64;
    let model_hist = counts.map(|c| c / n);
    let data_hist = [pis[0], pis[1], 0.0];
    let empirical_tv = marginal_tv(&model_hist, &data_hist)?;
    Ok(CappedGanReport {
        delta,
        empirical_tv,
        model_hist,
        data_hist,
        lipschitz_upper,
    })
}
