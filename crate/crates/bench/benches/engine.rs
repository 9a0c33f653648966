use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use subenum_bench::{config, workloads};
use subenum_core::cache::LrbuCache;
use subenum_core::{generators, optimal_plan, oracle, run_query, PlanStats, QueryGraph};

fn end_to_end(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_query");
    group.sample_size(10);
    for w in workloads() {
        for k in [1, 4] {
            group.bench_with_input(BenchmarkId::new(w.label, format!("k={k}")), &k, |b, &k| {
                b.iter(|| run_query(&w.graph, &w.query, &config(k, true)).expect("run").count)
            });
        }
        group.bench_function(BenchmarkId::new(w.label, "oracle"), |b| {
            b.iter(|| oracle::count(&w.query, &w.graph, true))
        });
    }
    group.finish();
}

fn stealing(c: &mut Criterion) {
    let g = generators::hub_skewed(5000, 2000, 0);
    let q = QueryGraph::named("2-path").expect("built-in query");
    let mut group = c.benchmark_group("hub_skew_2path");
    group.sample_size(10);
    for steal in [true, false] {
        group.bench_function(if steal { "steal" } else { "no-steal" }, |b| {
            b.iter(|| run_query(&g, &q, &config(4, steal)).expect("run").count)
        });
    }
    group.finish();
}

fn planning(c: &mut Criterion) {
    let stats = PlanStats { vertices: 4_847_571, edges: 43_369_619, max_degree: 20_333, machines: 10 };
    let mut group = c.benchmark_group("optimal_plan");
    for name in ["4-clique", "house", "5-path", "5-clique"] {
        let q = QueryGraph::named(name).expect("built-in query");
        group.bench_function(name, |b| b.iter(|| optimal_plan(&q, &stats).expect("plan").cost));
    }
    group.finish();
}

fn cache_churn(c: &mut Criterion) {
    c.bench_function("lrbu_insert_seal_release", |b| {
        b.iter(|| {
            let mut cache = LrbuCache::new(4096);
            for batch in 0..64u32 {
                for v in 0..128u32 {
                    let vid = batch * 97 + v;
                    if !cache.contains(vid) {
                        cache.insert(vid, vec![0; 16].into_boxed_slice());
                    }
                    cache.seal(vid).expect("resident");
                }
                cache.release();
            }
            cache.occupancy()
        })
    });
}

criterion_group!(benches, end_to_end, stealing, planning, cache_churn);
criterion_main!(benches);
