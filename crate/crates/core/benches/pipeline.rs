//! One worker vs. all workers on a synthetic fixture. Build with
//! `--no-default-features` to time the plain sequential code path.

use std::hint::black_box;
use std::thread::available_parallelism;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use popgeo::evaluate::default_regions;
use popgeo::extract::{extract_pops, ExtractionConfig};
use popgeo::geodb::SynthDbParams;
use popgeo::ingest::aggregate_edges;
use popgeo::locate::{locate_all, VoteConfig};
use popgeo::par;
use popgeo::report::{evaluate_all, EvalInputs, EvalSettings};
use popgeo::synth::{generate, Scenario};

fn scenario() -> Scenario {
    let db = |name: &str, noise_km, null_rate| SynthDbParams {
        name: name.into(),
        noise_km,
        null_rate,
        hq_override: None,
    };
    Scenario {
        pop_count: 400,
        ips_per_pop: 20,
        as_count: 8,
        singletons_per_pop: 2,
        databases: vec![db("a", 10.0, 0.1), db("b", 150.0, 0.3), db("c", 800.0, 0.6)],
        ..Scenario::default()
    }
}

fn pipeline(c: &mut Criterion) {
    let fx = generate(&scenario()).unwrap();
    let edges = aggregate_edges(&fx.observations);
    let prefixes = fx.prefixes.iter().copied().collect();
    let cfg = ExtractionConfig::default();
    let core = fx.planted_core();
    let regions = default_regions();
    let settings = EvalSettings::default();
    let vote = VoteConfig::default();

    let mut counts = vec![1, 4, available_parallelism().map_or(1, |n| n.get())];
    counts.sort();
    counts.dedup();

    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    for &n in &counts {
        group.bench_with_input(BenchmarkId::new("extract", n), &n, |b, &n| {
            b.iter(|| {
                par::with_threads(n, || {
                    extract_pops(black_box(&edges), &prefixes, &cfg, true).unwrap()
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("locate", n), &n, |b, &n| {
            b.iter(|| {
                par::with_threads(n, || {
                    locate_all(black_box(&core), &fx.databases, &vote, false)
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("evaluate", n), &n, |b, &n| {
            let inputs = EvalInputs {
                core: &core,
                all: &fx.planted,
                dbs: &fx.databases,
                previous: &[],
                regions: &regions,
            };
            b.iter(|| {
                par::with_threads(n, || {
                    evaluate_all(black_box(&inputs), &vote, &settings, false).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
