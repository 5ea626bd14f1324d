use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tul::data::{build_vocab, prepare_split, SplitRule};
use tul::eval::{score_trajectories, LcssIndex};
use tul::model::{ModelConfig, TulModel};
use tul::par::Execution;
use tul::synth::{generate, SynthConfig};
use tul::train::{batch_gradients, make_batch, TrainConfig, TrainingPools};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench(c: &mut Criterion) {
    let records = generate(&SynthConfig::default()).unwrap();
    let split = prepare_split(&records, &SplitRule::default(), 0).unwrap();
    let train = split.train_trajectories();
    let test = split.test_trajectories();
    let vocab = build_vocab(&train, 24).unwrap();
    let cfg = TrainConfig {
        model: ModelConfig {
            dim: 128,
            hidden: 128,
            heads: 4,
            ff_dim: 256,
            ..Default::default()
        },
        ..Default::default()
    };
    let model = TulModel::new(&mut ChaCha8Rng::seed_from_u64(0), &cfg.model, &vocab);
    let pools = TrainingPools::new(&split, &vocab).unwrap();
    let samples = pools.samples();
    let batch = make_batch(&samples[..cfg.batch_size], &pools, &cfg.augment, &mut ChaCha8Rng::seed_from_u64(1));
    let index = LcssIndex::new(
        split
            .train
            .iter()
            .enumerate()
            .flat_map(|(i, u)| u.trajectories.iter().map(move |t| (i, t))),
    );

    let mut group = c.benchmark_group("link");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| score_trajectories(&model, &vocab, &test, 3600.0, 512, exec))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("lcss");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| index.link_all(&test, exec)));
    }
    group.finish();

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&model, &batch, &vocab, &cfg, 0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
