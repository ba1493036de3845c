use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use funlora::flow::{Method, SolverConfig};
use funlora::funlora::{Adapter, Combine, FunctionalKind};
use funlora::linalg::{numerical_rank, DEFAULT_RANK_TOL};
use funlora::model::{NetConfig, VectorFieldNet};
use funlora::par;
use funlora::pipeline::sample_field;
use funlora::rng::{rng_for, Stream};
use rand_distr::{Distribution, Normal};

fn cos_rank(seed: u64) -> usize {
    let mut rng = rng_for(seed, Stream::Trial, 0);
    let n = Normal::new(1.0, 0.25).unwrap();
    let a: Vec<f64> = (0..32).map(|_| n.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..32).map(|_| n.sample(&mut rng)).collect();
    let ad = Adapter {
        a,
        b,
        alphas: vec![1.0; 10],
        hyper: (1..=10).map(f64::from).collect(),
        kind: FunctionalKind::Cos { p: 10, trainable: true },
        combine: Combine::Mul,
        class_label: 0,
        expand: None,
    };
    numerical_rank(&ad.matrix().unwrap(), DEFAULT_RANK_TOL).unwrap()
}

fn rank_trials(c: &mut Criterion) {
    let seeds: Vec<u64> = (0..64).collect();
    let mut g = c.benchmark_group("rank_trials");
    g.bench_function(BenchmarkId::new("parallel", seeds.len()), |b| b.iter(|| par::map(&seeds, |&s| cos_rank(s))));
    g.bench_function(BenchmarkId::new("sequential", seeds.len()), |b| {
        b.iter(|| par::map_seq(&seeds, |&s| cos_rank(s)))
    });
    g.finish();
}

fn class_sampling(c: &mut Criterion) {
    let mut rng = rng_for(0, Stream::Init, 0);
    let mut net = VectorFieldNet::new(NetConfig::default(), &mut rng).unwrap();
    let labels: Vec<u32> = (0..10).collect();
    for &y in &labels {
        net.add_embedding_class(y, &mut rng).unwrap();
    }
    let solver = SolverConfig { method: Method::Rk4 { steps: 10 } };
    let sample = |&y: &u32| sample_field(&net.class_field(y).unwrap(), 2, 200, &solver, 0, 1, y).unwrap();
    let mut g = c.benchmark_group("class_sampling");
    g.sample_size(20);
    g.bench_function(BenchmarkId::new("parallel", labels.len()), |b| b.iter(|| par::map(&labels, sample)));
    g.bench_function(BenchmarkId::new("sequential", labels.len()), |b| b.iter(|| par::map_seq(&labels, sample)));
    g.finish();
}

criterion_group!(benches, rank_trials, class_sampling);
criterion_main!(benches);
