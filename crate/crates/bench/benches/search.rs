use std::hint::black_box;

use chsurgeon::fixtures::{generate, FixtureSpec};
use chsurgeon::scorer::SegmentationScorer;
use chsurgeon::search::pair_sweep;
use chsurgeon::{apply_map, plan_to_map, run_search, ChannelMap, Scorer, SearchConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn fixture(channels: usize) -> chsurgeon::fixtures::Fixture {
    generate(&FixtureSpec::new(50, channels, 16, 16, 1).with_random_pairs((channels / 3).min(3), 4.0)).expect("fixture")
}

fn scoring(c: &mut Criterion) {
    let fx = fixture(16);
    let scorer = SegmentationScorer::new(&fx.cache, fx.head.clone()).unwrap();
    let identity = ChannelMap::identity(16);
    let planted = plan_to_map(&fx.expected_best, 16).unwrap();
    c.bench_function("score/identity", |b| {
        b.iter(|| scorer.score(black_box(&identity), None).unwrap())
    });
    c.bench_function("score/planted", |b| {
        b.iter(|| scorer.score(black_box(&planted), None).unwrap())
    });
    c.bench_function("apply_map/planted", |b| {
        b.iter(|| apply_map(black_box(&fx.cache), &planted).unwrap())
    });
}

fn sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("pair_sweep");
    group.sample_size(10);
    for channels in [8usize, 16, 32] {
        let fx = fixture(channels);
        let scorer = SegmentationScorer::new(&fx.cache, fx.head.clone()).unwrap();
        for jobs in [1usize, 4] {
            let config = SearchConfig {
                parallelism: jobs,
                ..SearchConfig::default()
            };
            group.bench_with_input(BenchmarkId::new(format!("jobs{jobs}"), channels), &config, |b, cfg| {
                b.iter(|| pair_sweep(&scorer, cfg).unwrap())
            });
        }
    }
    group.finish();
}

fn search(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_search");
    group.sample_size(10);
    let fx = fixture(16);
    let scorer = SegmentationScorer::new(&fx.cache, fx.head.clone()).unwrap();
    for top_n in [6usize, 10, 14] {
        let config = SearchConfig {
            top_n,
            parallelism: 4,
            ..SearchConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(top_n), &config, |b, cfg| {
            b.iter(|| run_search(&scorer, cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, scoring, sweep, search);
criterion_main!(benches);
