//! Fixtures shared by the engine benchmarks.

use subenum_core::{generators, EngineConfig, Graph, QueryGraph};

/// A workload: data graph, query and a short label for reports.
pub struct Workload {
    pub label: &'static str,
    pub graph: Graph,
    pub query: QueryGraph,
}

pub fn workloads() -> Vec<Workload> {
    let q = |name| QueryGraph::named(name).expect("built-in query");
    vec![
        Workload { label: "triangle/power-law", graph: generators::power_law_dense_2000(0), query: q("triangle") },
        Workload { label: "4-clique/power-law", graph: generators::power_law_dense_2000(0), query: q("4-clique") },
        Workload { label: "square/gnp", graph: generators::gnp(400, 0.03, 1), query: q("square") },
        Workload { label: "5-path/power-law", graph: generators::power_law(1000, 2, 0.9, 2), query: q("5-path") },
    ]
}

pub fn config(machines: usize, steal: bool) -> EngineConfig {
    EngineConfig {
        machines,
        workers: 2,
        batch_size: 4096,
        ..EngineConfig::default()
    }
    .stealing(steal)
}
