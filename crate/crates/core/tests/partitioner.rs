use std::sync::OnceLock;

use ndarray::{array, Axis};
use pgmgan_core::checkpoint::{load_partitioner, parse_partitioner, save_partitioner, PartitionerCheckpoint};
use pgmgan_core::config::{DatasetKind, ExperimentConfig};
use pgmgan_core::numcore::{stage_rng, Graph, Matrix};
use pgmgan_core::partitioner::{train_partitioner, PartitionerModel, PartitionerTraining};
use pgmgan_core::pipeline::{embed_stage, generate_dataset, partition_nmi};
use pgmgan_core::synthdata::{points_matrix, LabeledSample};
use rand::Rng;

struct Trained {
    data: Vec<LabeledSample>,
    run: PartitionerTraining,
}

fn train(kind: DatasetKind, seed: u64) -> Trained {
    let mut cfg = ExperimentConfig::preset(kind);
    cfg.dataset.seed = seed;
    let (_, data) = generate_dataset(&cfg).unwrap();
    let emb = embed_stage(&cfg, &data).unwrap();
    let run = train_partitioner(&points_matrix(&data), &emb.graph, &cfg.partitioner, seed, emb.trunk).unwrap();
    Trained { data, run }
}

fn grid() -> &'static Trained {
    static G: OnceLock<Trained> = OnceLock::new();
    G.get_or_init(|| train(DatasetKind::Grid, 0))
}

fn model() -> &'static PartitionerModel {
    &grid().run.model
}

#[test]
fn grid_partitions_recover_modes() {
    let t = grid();
    let nmi = partition_nmi(&t.run.model, &t.data).unwrap();
    assert!(nmi >= 0.95, "grid NMI {nmi}");
}

#[test]
fn no_partition_is_degenerate() {
    let t = grid();
    let a = t.run.model.assign_batch(&points_matrix(&t.data));
    let mut counts = vec![0usize; t.run.model.k];
    for i in a {
        counts[i] += 1;
    }
    let n = t.data.len() as f64;
    for (i, &c) in counts.iter().enumerate() {
        let frac = c as f64 / n;
        assert!((0.01..=0.10).contains(&frac), "partition {i} holds {frac}");
    }
}

#[test]
fn trunk_is_bi_lipschitz_on_random_pairs() {
    let m = model();
    let cert = m.lipschitz_certificate().unwrap();
    let upper = (1.0 + cert.max_layer_sigma.powi(cert.layers_per_block as i32)).powi(cert.blocks as i32);
    let mut rng = stage_rng(5, 0);
    let x = Matrix::from_shape_fn((1000, 2), |_| rng.gen_range(-6.0..6.0));
    let y = Matrix::from_shape_fn((1000, 2), |_| rng.gen_range(-6.0..6.0));
    let (fx, fy) = (m.features(&x), m.features(&y));
    for r in 0..1000 {
        let dx = &x.row(r) - &y.row(r);
        let df = &fx.row(r) - &fy.row(r);
        let (nx, nf) = (dx.dot(&dx).sqrt(), df.dot(&df).sqrt());
        assert!(
            nf >= cert.trunk_c0_lower * nx * (1.0 - 1e-9),
            "pair {r}: {nf} < {} * {nx}",
            cert.trunk_c0_lower
        );
        assert!(nf <= upper * nx * (1.0 + 1e-9), "pair {r}: {nf} > {upper} * {nx}");
    }
}

#[test]
fn logit_jacobian_matches_differences() {
    let m = model();
    let mut rng = stage_rng(6, 0);
    for _ in 0..20 {
        let x0 = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        for c in 0..m.k {
            let mut g = Graph::new();
            let p = m.bind(&mut g, false);
            let xv = g.param(array![[x0[0], x0[1]]]);
            let f = m.logits_graph(&mut g, &p, xv);
            let fc = g.column(f, c);
            let s = g.sum(fc);
            g.backward(s).unwrap();
            let ad = g.grad(xv);
            for j in 0..2 {
                let (mut a, mut b) = (x0, x0);
                a[j] += 1e-5;
                b[j] -= 1e-5;
                let fd = (m.logits_point(&a)[c] - m.logits_point(&b)[c]) / 2e-5;
                let rel = (ad[[0, j]] - fd).abs() / ad[[0, j]].abs().max(fd.abs()).max(1e-3);
                assert!(rel <= 1e-4, "logit {c} coord {j}: {} vs {fd}", ad[[0, j]]);
            }
        }
    }
}

#[test]
fn objective_rises_over_first_hundred_steps() {
    let tr = &grid().run.trace;
    assert!(tr.len() >= 100);
    let early: f64 = tr[..20].iter().sum::<f64>() / 20.0;
    let late: f64 = tr[80..100].iter().sum::<f64>() / 20.0;
    assert!(late >= early - 1e-3, "moving average fell: {early} -> {late}");
}

#[test]
fn assignment_is_stable_and_shift_invariant() {
    let m = model();
    let x = points_matrix(&grid().data);
    assert_eq!(m.assign_batch(&x), m.assign_batch(&x));
    let f = m.logits(&x);
    let shifted = &f + 17.5;
    for (r, a) in m.assign_batch(&x).into_iter().enumerate() {
        let best = pgmgan_core::partitioner::argmax(shifted.index_axis(Axis(0), r).iter().copied());
        assert_eq!(a, best);
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    save_partitioner(&path, m).unwrap();
    let back = load_partitioner(&path).unwrap();
    assert_eq!(
        PartitionerCheckpoint::from_model(&back),
        PartitionerCheckpoint::from_model(m)
    );
    let x = points_matrix(&grid().data);
    let (a, b) = (m.logits(&x), back.logits(&x));
    assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let text = std::fs::read_to_string(&path).unwrap();
    assert!(parse_partitioner(&text[..text.len() / 2]).is_err());
    let wrong = text.replacen("\"kind\":\"partitioner\"", "\"kind\":\"ganmix\"", 1);
    assert_ne!(wrong, text);
    assert!(parse_partitioner(&wrong).is_err());
    let ver = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
    assert_ne!(ver, text);
    assert!(parse_partitioner(&ver).is_err());
}

#[test]
fn ring_contingency_is_a_permutation() {
    let t = train(DatasetKind::Ring, 0);
    let a = t.run.model.assign_batch(&points_matrix(&t.data));
    let mut table = vec![vec![0usize; t.run.model.k]; 8];
    for (s, p) in t.data.iter().zip(a) {
        table[s.mode_id as usize][p] += 1;
    }
    let mut used = vec![false; t.run.model.k];
    for row in &table {
        let nz: Vec<usize> = (0..row.len()).filter(|&p| row[p] > 0).collect();
        assert_eq!(nz.len(), 1, "mode split across partitions: {row:?}");
        assert!(!used[nz[0]], "two modes share partition {}", nz[0]);
        used[nz[0]] = true;
    }
}

#[test]
fn single_partition_takes_everything() {
    let mut cfg = ExperimentConfig::preset(DatasetKind::Ring);
    cfg.partitioner.k = 1;
    cfg.partitioner.epochs = 1;
    cfg.dataset.n_train = 300;
    let (_, data) = generate_dataset(&cfg).unwrap();
    let emb = embed_stage(&cfg, &data).unwrap();
    let run = train_partitioner(&points_matrix(&data), &emb.graph, &cfg.partitioner, 0, None).unwrap();
    assert!(run.model.assign_batch(&points_matrix(&data)).iter().all(|&a| a == 0));
    assert!(run.trace.iter().all(|v| v.abs() < 1e-12), "k=1 objective must be 0");
}
