//! Data-parallel kernels on one worker thread versus the full rayon pool.
//!
//! Build with `--no-default-features` to time the sequential fallback; the
//! group names then carry the `sequential` label.

use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmea_core::dataset::Dataset;
use mmea_core::encoders::{encode_all, init_model};
use mmea_core::eval::{rank_metrics, similarity_for, similarity_matrix, DEFAULT_KS};
use mmea_core::kg::synth::{generate_synthetic_pair, SynthConfig};
use mmea_core::kg::Side;
use mmea_core::trainer::{predict_unlabeled, Prediction, TrainConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn dataset(n: usize) -> (Dataset, TrainConfig) {
    let cfg = TrainConfig::default();
    let bench = generate_synthetic_pair(&SynthConfig { n_entities: n, ..SynthConfig::default() }).unwrap();
    (Dataset::from_synthetic(&bench, cfg.train_fraction, 0).unwrap(), cfg)
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
}

/// Run `f` once per available execution mode, labelled by thread count.
fn modes(c: &mut Criterion, group: &str, mut f: impl FnMut() + Send) {
    let mut g = c.benchmark_group(group);
    #[cfg(feature = "parallel")]
    {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function(BenchmarkId::new("one_thread", 1), |b| one.install(|| b.iter(&mut f)));
        g.bench_function(BenchmarkId::new("full_pool", rayon::current_num_threads()), |b| b.iter(&mut f));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function("sequential", |b| b.iter(&mut f));
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let (data, cfg) = dataset(400);
    let enc = cfg.encoder();
    let store = init_model(&enc, &data.shape, 0).unwrap();
    modes(c, "encode_all", || {
        encode_all(&store, &enc, &data.shape, data.inputs(Side::Source)).unwrap();
    });

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let src = randn(&mut rng, 1000, 600);
    let tgt = randn(&mut rng, 1000, 600);
    modes(c, "similarity_1000x1000", || {
        similarity_matrix(&src, &tgt).unwrap();
    });

    let test = data.pair.test_seeds.pairs();
    let rows: Vec<usize> = test.iter().map(|p| p.source).collect();
    let cols: Vec<usize> = test.iter().map(|p| p.target).collect();
    let sim = similarity_for(&src, &tgt, &rows, &cols).unwrap();
    modes(c, "rank_metrics", || {
        rank_metrics(&sim, &data.pair.test_seeds, &DEFAULT_KS).unwrap();
    });

    let candidates: Vec<usize> = (0..1000).collect();
    modes(c, "predict_unlabeled", || {
        let p: BTreeMap<usize, Prediction> = predict_unlabeled(&src, &tgt, &candidates, &candidates);
        assert_eq!(p.len(), 1000);
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
