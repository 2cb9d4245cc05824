use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dialogscm::independence::distance_correlation;
use dialogscm::model::{ModelConfig, ModelState, PreparedSample};
use dialogscm::synth::{generate_corpus, SplitSizes, SyntheticConfig};
use dialogscm::{
    build_skeleton, discriminate_pair, independence_test, simulate, Conversation,
    DiscriminationConfig, IndependenceConfig, LinearScm, NoiseSpec, SkeletonVariant, Tape,
};

fn example_data(n: usize) -> dialogscm::SampleMatrix {
    let scm = LinearScm::from_edges(
        4,
        &[(0, 1, 0.8), (0, 2, 0.6), (2, 3, 0.5)],
        NoiseSpec::uniform(-1.0, 1.0),
    )
    .expect("valid scm");
    simulate(&scm, n, 0).expect("simulates")
}

fn independence(c: &mut Criterion) {
    let mut group = c.benchmark_group("independence");
    for n in [500, 2000, 5000] {
        let data = example_data(n);
        let (u, v) = (data.column(0), data.column(1));
        group.bench_with_input(BenchmarkId::new("dcor", n), &n, |b, _| {
            b.iter(|| distance_correlation(&u, &v).unwrap())
        });
        let (u, v) = (data.column(1), data.column(3));
        group.bench_with_input(BenchmarkId::new("permutation_test", n), &n, |b, _| {
            b.iter(|| independence_test(&u, &v, &IndependenceConfig::default(), 0).unwrap())
        });
    }
    group.finish();
}

fn discrimination(c: &mut Criterion) {
    let data = example_data(5000);
    let config = DiscriminationConfig::default();
    c.bench_function("discriminate_pair/n5000", |b| {
        b.iter(|| discriminate_pair(&data, 2, 3, &config).unwrap())
    });
}

fn skeletons(c: &mut Criterion) {
    let speakers: Vec<String> = (0..40)
        .map(|t| if t % 3 == 0 { "A" } else { "B" }.to_string())
        .collect();
    let conversation =
        Conversation::new(speakers, vec![None; 40], Vec::new()).expect("valid conversation");
    let mut group = c.benchmark_group("build_skeleton");
    for variant in SkeletonVariant::ALL {
        group.bench_function(variant.to_string(), |b| {
            b.iter(|| build_skeleton(variant, &conversation, Some(4)).unwrap())
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let synth = SyntheticConfig {
        dimension: 50,
        split_sizes: SplitSizes {
            train: 1,
            val: 0,
            test: 0,
        },
        ..Default::default()
    };
    let corpus = generate_corpus(&[], &synth).expect("corpus");
    let config = ModelConfig::desk();
    let sample = PreparedSample::new(&corpus.train[0], &config).expect("prepared");
    let state = ModelState::init(&config, 50, 0).expect("init");
    c.bench_function("model/forward", |b| {
        b.iter(|| state.forward(&sample).unwrap())
    });
    c.bench_function("model/loss_and_gradients", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let params: Vec<_> = state
                .param_tensors()
                .into_iter()
                .map(|t| tape.var(t))
                .collect();
            let loss = state
                .loss_with(&tape, &params, &sample, None, None)
                .unwrap();
            tape.backward(loss.total).unwrap()
        })
    });
}

criterion_group!(benches, independence, discrimination, skeletons, model);
criterion_main!(benches);
