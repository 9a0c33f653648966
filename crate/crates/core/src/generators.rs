//! Small deterministic graph families for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graphstore::Graph;

pub fn complete(n: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n as u32 {
        for v in u + 1..n as u32 {
            edges.push((u, v));
        }
    }
    Graph::from_edges(n, edges)
}

pub fn cycle(n: usize) -> Graph {
    let edges: Vec<_> = (0..n as u32).map(|i| (i, (i + 1) % n as u32)).collect();
    Graph::from_edges(n, edges)
}

/// Path on `n` vertices.
pub fn path(n: usize) -> Graph {
    let edges: Vec<_> = (1..n as u32).map(|i| (i - 1, i)).collect();
    Graph::from_edges(n, edges)
}

/// Star with vertex 0 as the hub.
pub fn star(leaves: usize) -> Graph {
    let edges: Vec<_> = (1..=leaves as u32).map(|i| (0, i)).collect();
    Graph::from_edges(leaves + 1, edges)
}

pub fn petersen() -> Graph {
    let mut edges = Vec::new();
    for i in 0..5u32 {
        edges.push((i, (i + 1) % 5));
        edges.push((i, i + 5));
        edges.push((i + 5, (i + 2) % 5 + 5));
    }
    Graph::from_edges(10, edges)
}

pub fn gnp(n: usize, p: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n as u32 {
        for v in u + 1..n as u32 {
            if rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    Graph::from_edges(n, edges)
}

/// Preferential attachment with triad formation: each new vertex adds `m`
/// edges, the first to a degree-weighted target and each later one, with
/// probability `triad`, to a neighbour of the previous target. Produces a
/// heavy-tailed degree distribution with many triangles.
pub fn power_law(n: usize, m: usize, triad: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = m.max(1);
    let core = (m + 1).min(n);
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
    // Endpoint list: sampling uniformly from it is degree-proportional.
    let mut ends: Vec<u32> = Vec::new();
    let add = |adj: &mut Vec<Vec<u32>>, ends: &mut Vec<u32>, u: u32, v: u32| {
        if u == v || adj[u as usize].contains(&v) {
            return false;
        }
        adj[u as usize].push(v);
        adj[v as usize].push(u);
        ends.push(u);
        ends.push(v);
        true
    };
    for u in 0..core as u32 {
        for v in u + 1..core as u32 {
            add(&mut adj, &mut ends, u, v);
        }
    }
    for v in core as u32..n as u32 {
        let mut last: Option<u32> = None;
        let mut added = 0;
        let mut attempts = 0;
        while added < m && attempts < 20 * m {
            attempts += 1;
            let target = match last {
                Some(prev) if rng.gen_bool(triad) && !adj[prev as usize].is_empty() => {
                    let nb = &adj[prev as usize];
                    nb[rng.gen_range(0..nb.len())]
                }
                _ => ends[rng.gen_range(0..ends.len())],
            };
            if add(&mut adj, &mut ends, v, target) {
                added += 1;
                last = Some(target);
            }
        }
    }
    let mut edges = Vec::new();
    for (u, nb) in adj.iter().enumerate() {
        for &v in nb {
            if (u as u32) < v {
                edges.push((u as u32, v));
            }
        }
    }
    Graph::from_edges(n, edges)
}

/// Sparse heavy-tailed graphs (2000 vertices, average degree 6) small
/// enough to enumerate 5-paths exhaustively.
pub fn power_law_2000(seed: u64) -> Graph {
    power_law(2000, 3, 0.9, seed)
}

/// Denser variant (average degree about 20) with thousands of 5-cliques,
/// used for memory and scheduling runs.
pub fn power_law_dense_2000(seed: u64) -> Graph {
    power_law(2000, 10, 0.6, seed)
}

/// Vertex 0 joined to `hub_degree` leaves, plus `extra` random edges among
/// the leaves.
pub fn hub_skewed(hub_degree: usize, extra: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = hub_degree + 1;
    let mut edges: Vec<(u32, u32)> = (1..n as u32).map(|i| (0, i)).collect();
    for _ in 0..extra {
        let a = rng.gen_range(1..n as u32);
        let b = rng.gen_range(1..n as u32);
        edges.push((a, b));
    }
    Graph::from_edges(n, edges)
}
