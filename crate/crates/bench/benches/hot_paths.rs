//! Criterion benchmarks for the forward-pass hot paths: dense matmul on the
//! tape, the GCN propagation stack, a full encoder forward, and ranking.

use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, Criterion};

use seaget_core::flowgraph::normalized_laplacian;
use seaget_core::model::{encoder_forward, init_model_params, positional_encode, ModelConfig};
use seaget_core::numcore::rng::{Rng, Stream};
use seaget_core::numcore::tape::{Tape, Var};
use seaget_core::numcore::tensor::Tensor;
use seaget_core::trainer::metrics::rank_of;

fn rand_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = Rng::new(1, Stream::Synthetic);
    let a = rand_tensor(&mut rng, 128, 128);
    let b = rand_tensor(&mut rng, 128, 128);
    c.bench_function("tape_matmul_128", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let bv = tape.constant(b.clone());
            let m = tape.matmul(av, bv).unwrap();
            std::hint::black_box(tape.value(m).data()[0])
        })
    });
}

fn bench_gcn_forward(c: &mut Criterion) {
    let mut rng = Rng::new(2, Stream::Synthetic);
    let n = 200;
    let feature_dim = 32;
    let cfg = seaget_core::gnn::GcnConfig {
        layers: 2,
        hidden: 64,
        dropout: 0.0,
        leaky_slope: 0.2,
    };
    let mut params = BTreeMap::new();
    seaget_core::gnn::init_gcn_params(&cfg, feature_dim, &mut rng, &mut params);
    let x = rand_tensor(&mut rng, n, feature_dim);
    let adj = rand_tensor(&mut rng, n, n).map(|v| if v > 0.9 { 1.0 } else { 0.0 });
    let lap = normalized_laplacian(&adj).unwrap();
    c.bench_function("gcn_forward_200x64", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let vars: BTreeMap<String, Var> = params
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect();
            let xv = tape.constant(x.clone());
            let lv = tape.constant(lap.clone());
            let mut drop_rng = Rng::new(0, Stream::Dropout);
            let out = seaget_core::gnn::gcn_forward(
                &mut tape, &vars, xv, lv, &cfg, false, &mut drop_rng,
            )
            .unwrap();
            std::hint::black_box(tape.value(out).data()[0])
        })
    });
}

fn bench_encoder_forward(c: &mut Criterion) {
    let mut rng = Rng::new(3, Stream::Init);
    let cfg = ModelConfig {
        user_count: 10,
        poi_count: 50,
        category_count: 8,
        feature_dim: 11,
        gcn_layers: 1,
        omega: 16,
        psi: 16,
        sigma: 16,
        encoder_layers: 2,
        heads: 2,
        ff_dim: 128,
        dropout: 0.0,
        leaky_slope: 0.2,
    };
    let params = init_model_params(&cfg, &mut rng).unwrap();
    let k = 12;
    let x = rand_tensor(&mut rng, k, cfg.d());
    c.bench_function("encoder_forward_k12_d96", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let vars: BTreeMap<String, Var> = params
                .iter()
                .map(|(kk, v)| (kk.clone(), tape.constant(v.clone())))
                .collect();
            let xv = tape.constant(x.clone());
            let xp = positional_encode(&mut tape, xv).unwrap();
            let mut drop_rng = Rng::new(0, Stream::Dropout);
            let out = encoder_forward(&mut tape, &vars, &cfg, xp, k, false, &mut drop_rng).unwrap();
            std::hint::black_box(tape.value(out).data()[0])
        })
    });
}

fn bench_rank_of(c: &mut Criterion) {
    let mut rng = Rng::new(4, Stream::Synthetic);
    let scores: Vec<f64> = (0..5000).map(|_| rng.uniform(-10.0, 10.0)).collect();
    c.bench_function("rank_of_5000", |bch| {
        bch.iter(|| std::hint::black_box(rank_of(&scores, 2500)))
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_gcn_forward,
    bench_encoder_forward,
    bench_rank_of
);
criterion_main!(benches);
