use std::sync::OnceLock;

use ndarray::Array2;
use pgmgan_core::config::{DatasetKind, ExperimentConfig};
use pgmgan_core::ganmix::{
    combine_g_loss, d_loss, d_loss_graph, g_adversarial_graph, g_loss_guided_graph, sample_mixture, train_gan,
    DiscriminatorMixture, GanCheckpoint, GanConfig, GeneratorMixture, LambdaSchedule, LossVariant,
};
use pgmgan_core::guide::{guide_rows_multi_graph, GuideField};
use pgmgan_core::numcore::{stage_rng, Graph, Matrix};
use pgmgan_core::partitioner::{train_partitioner, PartitionerModel};
use pgmgan_core::pipeline::{embed_stage, generate_dataset};
use pgmgan_core::synthdata::{points_matrix, LabeledSample};
use proptest::prelude::*;
use rand::Rng;

fn ring() -> &'static (Vec<LabeledSample>, PartitionerModel) {
    static R: OnceLock<(Vec<LabeledSample>, PartitionerModel)> = OnceLock::new();
    R.get_or_init(|| {
        let cfg = ExperimentConfig::preset(DatasetKind::Ring);
        let (_, data) = generate_dataset(&cfg).unwrap();
        let emb = embed_stage(&cfg, &data).unwrap();
        let run = train_partitioner(&points_matrix(&data), &emb.graph, &cfg.partitioner, 0, emb.trunk).unwrap();
        (data, run.model)
    })
}

fn guided_loss_and_grad(
    disc: &DiscriminatorMixture,
    part: &PartitionerModel,
    x: &Matrix,
    idx: &[usize],
    lambda: f64,
) -> (f64, Matrix) {
    let mut g = Graph::new();
    let pd = disc.store.bind(&mut g, false);
    let pp = part.bind(&mut g, false);
    let xv = g.param(x.clone());
    let sf = disc.score_graph(&mut g, &pd, xv, idx.to_vec());
    let f = part.logits_graph(&mut g, &pp, xv);
    let r = guide_rows_multi_graph(&mut g, f, idx);
    let loss = g_loss_guided_graph(&mut g, sf, r, lambda, LossVariant::NonSaturating);
    g.backward(loss).unwrap();
    (g.scalar_value(loss), g.grad(xv))
}

#[test]
fn guide_term_vanishes_inside_partitions() {
    let (data, part) = ring();
    let x = points_matrix(&data[..128]);
    let idx = part.assign_batch(&x);
    let cfg = GanConfig::default();
    let disc = DiscriminatorMixture::new(&cfg.shape(part.k), None, &mut stage_rng(1, 0));
    let (l0, g0) = guided_loss_and_grad(&disc, part, &x, &idx, 0.0);
    let (l6, g6) = guided_loss_and_grad(&disc, part, &x, &idx, 6.0);
    assert_eq!(l0.to_bits(), l6.to_bits());
    assert!(g0.iter().zip(g6.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

    // and the guide rows themselves are exactly zero with zero gradient
    let mut g = Graph::new();
    let pp = part.bind(&mut g, false);
    let xv = g.param(x.clone());
    let f = part.logits_graph(&mut g, &pp, xv);
    let r = guide_rows_multi_graph(&mut g, f, &idx);
    let s = g.sum(r);
    assert_eq!(g.scalar_value(s), 0.0);
    g.backward(s).unwrap();
    assert!(g.grad(xv).iter().all(|&v| v == 0.0));
}

#[test]
fn multi_partition_guide_rows_match_pointwise_field() {
    let (data, part) = ring();
    let mut rng = stage_rng(2, 0);
    let x = Matrix::from_shape_fn((50, 2), |_| rng.gen_range(-2.0..2.0));
    let idx: Vec<usize> = (0..50).map(|_| rng.gen_range(0..part.k)).collect();
    let mut g = Graph::new();
    let pp = part.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let f = part.logits_graph(&mut g, &pp, xv);
    let r = guide_rows_multi_graph(&mut g, f, &idx);
    for (row, &i) in idx.iter().enumerate() {
        let want = GuideField::new(part, i).unwrap().value(&[x[[row, 0]], x[[row, 1]]]);
        assert!((g.value(r)[[row, 0]] - want).abs() <= 1e-12 * want.max(1.0));
    }
    let _ = data;
}

#[test]
fn discriminator_loss_gradient_matches_differences() {
    let mut rng = stage_rng(3, 0);
    let sr: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let sf: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut g = Graph::new();
    let rv = g.param(Array2::from_shape_vec((7, 1), sr.clone()).unwrap());
    let fv = g.param(Array2::from_shape_vec((5, 1), sf.clone()).unwrap());
    let l = d_loss_graph(&mut g, rv, fv);
    g.backward(l).unwrap();
    let (gr, gf) = (g.grad(rv), g.grad(fv));
    let h = 1e-5;
    for j in 0..7 {
        let (mut a, mut b) = (sr.clone(), sr.clone());
        a[j] += h;
        b[j] -= h;
        let fd = (d_loss(&a, &sf).unwrap() - d_loss(&b, &sf).unwrap()) / (2.0 * h);
        assert!((gr[[j, 0]] - fd).abs() / fd.abs().max(1e-3) <= 1e-4);
    }
    for j in 0..5 {
        let (mut a, mut b) = (sf.clone(), sf.clone());
        a[j] += h;
        b[j] -= h;
        let fd = (d_loss(&sr, &a).unwrap() - d_loss(&sr, &b).unwrap()) / (2.0 * h);
        assert!((gf[[j, 0]] - fd).abs() / fd.abs().max(1e-3) <= 1e-4);
    }
}

#[test]
fn loss_arithmetic_examples() {
    assert_eq!(combine_g_loss(1.0, 3.0, 2.0).unwrap(), 7.0);
    assert_eq!(combine_g_loss(1.25, 3.0, 0.0).unwrap(), 1.25);
    assert!(combine_g_loss(1.0, 3.0, -1.0).is_err());
    assert!((d_loss(&[0.0; 4], &[0.0; 3]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!(d_loss(&[40.0], &[-40.0]).unwrap() < 1e-15);

    // one fake with R = 3, lambda = 2: adversarial term plus 6
    let mut g = Graph::new();
    let s = g.constant(Matrix::from_elem((1, 1), 0.3));
    let r = g.constant(Matrix::from_elem((1, 1), 3.0));
    let adv = g_adversarial_graph(&mut g, s, LossVariant::NonSaturating);
    let total = g_loss_guided_graph(&mut g, s, r, 2.0, LossVariant::NonSaturating);
    assert!((g.scalar_value(total) - g.scalar_value(adv) - 6.0).abs() < 1e-12);
}

#[test]
fn schedule_endpoints() {
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn schedule_is_non_increasing(start in 0.0f64..10.0, frac in 0.0f64..1.0, total in 1usize..5000) {
        let s = LambdaSchedule { start, end: start * frac, total_steps: total };
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let l = s.lambda_at(step).unwrap();
            prop_assert!(l <= prev);
            prev = l;
        }
    }
}

#[test]
fn sampling_follows_mixture_weights() {
    let (_, part) = ring();
    let cfg = GanConfig::default();
    let mut gen = GeneratorMixture::new(&cfg.shape(part.k), None, &mut stage_rng(4, 0));
    gen.pi_hat = vec![0.3, 0.05, 0.05, 0.1, 0.2, 0.1, 0.15, 0.05];
    let n = 100_000;
    let s = sample_mixture(&gen, part, n, 9, 1).unwrap();
    let mut counts = vec![0usize; part.k];
    for m in &s {
        counts[m.partition] += 1;
    }
    for (i, (&c, &p)) in counts.iter().zip(&gen.pi_hat).enumerate() {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - n as f64 * p).abs() <= 5.0 * sd, "partition {i}: {c}");
    }
}

fn short_config() -> GanConfig {
    GanConfig {
        total_steps: 60,
        ..GanConfig::default()
    }
}

#[test]
fn accepted_samples_lie_in_their_partition() {
    let (data, part) = ring();
    let t = train_gan(&points_matrix(data), part, &short_config(), 0).unwrap();
    let s = sample_mixture(&t.generator, part, 400, 1, 100).unwrap();
    for m in s.iter().filter(|m| !m.truncated) {
        assert!(GuideField::new(part, m.partition).unwrap().accepts(&m.x));
        assert!(m.tries >= 1 && m.tries <= 100);
    }
}

#[test]
fn single_partition_needs_no_mixing() {
    let cfg = GanConfig::default();
    let mut c1 = ExperimentConfig::preset(DatasetKind::Ring);
    c1.partitioner.k = 1;
    c1.partitioner.epochs = 1;
    c1.dataset.n_train = 200;
    let (_, data) = generate_dataset(&c1).unwrap();
    let emb = embed_stage(&c1, &data).unwrap();
    let part = train_partitioner(&points_matrix(&data), &emb.graph, &c1.partitioner, 0, None)
        .unwrap()
        .model;
    let gen = GeneratorMixture::new(&cfg.shape(1), None, &mut stage_rng(5, 0));
    let s = sample_mixture(&gen, &part, 100, 3, 5).unwrap();
    assert!(s.iter().all(|m| m.partition == 0 && !m.truncated && m.tries == 1));
}

#[test]
fn training_is_seeded() {
    let (data, part) = ring();
    let x = points_matrix(data);
    let a = train_gan(&x, part, &short_config(), 7).unwrap();
    let b = train_gan(&x, part, &short_config(), 7).unwrap();
    let ca = GanCheckpoint::from_models(&a.generator, &a.discriminator, a.shape);
    let cb = GanCheckpoint::from_models(&b.generator, &b.discriminator, b.shape);
    assert_eq!(serde_json::to_string(&ca).unwrap(), serde_json::to_string(&cb).unwrap());
    assert_eq!(a.g_losses, b.g_losses);
    let c = train_gan(&x, part, &short_config(), 8).unwrap();
    assert_ne!(a.g_losses, c.g_losses);
}
