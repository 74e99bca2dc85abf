use criterion::{black_box, criterion_group, criterion_main, Criterion};

use pgmgan_core::embed::knn_graph;
use pgmgan_core::ganmix::{GanConfig, GeneratorMixture};
use pgmgan_core::guide::{descend_to_partition, GuideField};
use pgmgan_core::numcore::nn::normal_matrix;
use pgmgan_core::numcore::{power_iteration, sigma_max, stage_rng, Graph, SpectralState};
use pgmgan_core::partitioner::{init_partitioner, PartitionerConfig};
use pgmgan_core::synthdata::{grid_spec, points_matrix, sample};

fn spectral(c: &mut Criterion) {
    let mut rng = stage_rng(0, 0);
    let w = normal_matrix(64, 64, 0.1, &mut rng);
    let mut st = SpectralState::new(64, &mut rng);
    c.bench_function("power_iteration_64x64_1iter", |b| {
        b.iter(|| power_iteration(black_box(&w), &mut st, 1))
    });
    c.bench_function("jacobi_sigma_max_64x64", |b| b.iter(|| sigma_max(black_box(&w))));
}

fn knn(c: &mut Criterion) {
    let spec = grid_spec(5, 2.0, 0.05).unwrap();
    let x = points_matrix(&sample(&spec, 2000, 0).unwrap());
    c.bench_function("knn_graph_2000_k10", |b| {
        b.iter(|| knn_graph(black_box(&x), 10).unwrap())
    });
}

fn partitioner_and_guide(c: &mut Criterion) {
    let spec = grid_spec(5, 2.0, 0.05).unwrap();
    let x = points_matrix(&sample(&spec, 2000, 0).unwrap());
    let cfg = PartitionerConfig::default();
    let model = init_partitioner(&x, &cfg, 0, None).unwrap();
    c.bench_function("partitioner_logits_2000", |b| b.iter(|| model.logits(black_box(&x))));
    let field = GuideField::new(&model, 12).unwrap();
    c.bench_function("guide_descent_from_corner", |b| {
        b.iter(|| descend_to_partition(&field, black_box([-6.0, 6.0]), 10_000).unwrap())
    });
}

fn gan_forward(c: &mut Criterion) {
    let cfg = GanConfig::default();
    let shape = cfg.shape(25);
    let mut rng = stage_rng(0, 30);
    let gen = GeneratorMixture::new(&shape, None, &mut rng);
    let z = normal_matrix(64, cfg.n_z, 1.0, &mut rng);
    let idx: Vec<usize> = (0..64).map(|i| i % 25).collect();
    c.bench_function("generator_batch64_forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = gen.store.bind(&mut g, true);
            let zv = g.constant(z.clone());
            let x = gen.forward_graph(&mut g, &p, zv, idx.clone());
            let s = g.sum(x);
            g.backward(s).unwrap();
            p.grads(&g)
        })
    });
}

criterion_group!(benches, spectral, knn, partitioner_and_guide, gan_forward);
criterion_main!(benches);
