//! Reference enumerator: plain backtracking over the whole graph.

use crate::error::{Error, Result};
use crate::graphstore::Graph;
use crate::querymodel::QueryGraph;
use crate::VertexId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleEmit {
    Count,
    /// Sorted result list, failing past the limit.
    List { limit: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleConfig {
    pub apply_symmetry: bool,
    pub emit: OracleEmit,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            apply_symmetry: true,
            emit: OracleEmit::Count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleResult {
    pub count: u64,
    /// Results in query-vertex order, lexicographically sorted.
    pub results: Option<Vec<Vec<VertexId>>>,
}

/// Matching order where each vertex after the first is adjacent to an
/// earlier one.
fn matching_order(q: &QueryGraph) -> Vec<usize> {
    let mut order = vec![0];
    let mut placed = 1u16;
    while order.len() < q.n() {
        let next = (0..q.n())
            .filter(|&v| placed >> v & 1 == 0)
            .max_by_key(|&v| ((q.neighbour_mask(v) & placed).count_ones(), std::cmp::Reverse(v)))
            .expect("vertices remain");
        order.push(next);
        placed |= 1 << next;
    }
    order
}

pub fn enumerate(q: &QueryGraph, g: &Graph, cfg: OracleConfig) -> Result<OracleResult> {
    let order = matching_order(q);
    let orders: &[(usize, usize)] = if cfg.apply_symmetry { q.orders() } else { &[] };
    let mut state = State {
        q,
        g,
        order: &order,
        orders,
        assignment: vec![u32::MAX; q.n()],
        count: 0,
        list: matches!(cfg.emit, OracleEmit::List { .. }).then(Vec::new),
        limit: match cfg.emit {
            OracleEmit::List { limit } => limit,
            OracleEmit::Count => usize::MAX,
        },
    };
    state.extend(0)?;
    let results = state.list.map(|mut l| {
        l.sort_unstable();
        l
    });
    Ok(OracleResult {
        count: state.count,
        results,
    })
}

pub fn count(q: &QueryGraph, g: &Graph, apply_symmetry: bool) -> u64 {
    enumerate(
        q,
        g,
        OracleConfig {
            apply_symmetry,
            emit: OracleEmit::Count,
        },
    )
    .expect("count mode has no limit")
    .count
}

struct State<'a> {
    q: &'a QueryGraph,
    g: &'a Graph,
    order: &'a [usize],
    orders: &'a [(usize, usize)],
    assignment: Vec<VertexId>,
    count: u64,
    list: Option<Vec<Vec<VertexId>>>,
    limit: usize,
}

impl State<'_> {
    fn consistent(&self, v: usize, x: VertexId) -> bool {
        for &(a, b) in self.orders {
            let (fa, fb) = (self.assignment[a], self.assignment[b]);
            if a == v && fb != u32::MAX && x >= fb {
                return false;
            }
            if b == v && fa != u32::MAX && fa >= x {
                return false;
            }
        }
        true
    }

    fn extend(&mut self, depth: usize) -> Result<()> {
        if depth == self.order.len() {
            self.count += 1;
            if let Some(list) = &mut self.list {
                if list.len() >= self.limit {
                    return Err(Error::ResultLimit(self.limit));
                }
                list.push(self.assignment.clone());
            }
            return Ok(());
        }
        let v = self.order[depth];
        let matched_nbrs: Vec<usize> = self.order[..depth]
            .iter()
            .copied()
            .filter(|&w| self.q.adjacent(v, w))
            .collect();
        let candidates: Vec<VertexId> = match matched_nbrs.first() {
            None => (0..self.g.vertex_count() as u32).collect(),
            Some(&w) => self
                .g
                .neighbours(self.assignment[w])
                .iter()
                .copied()
                .filter(|&x| {
                    matched_nbrs[1..]
                        .iter()
                        .all(|&w2| self.g.has_edge(self.assignment[w2], x))
                })
                .collect(),
        };
        for x in candidates {
            if self.assignment.contains(&x) || !self.consistent(v, x) {
                continue;
            }
            self.assignment[v] = x;
            self.extend(depth + 1)?;
            self.assignment[v] = u32::MAX;
        }
        Ok(())
    }
}
