//! Cost-based join planning over star join units, and physical configuration
//! of each two-way join.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphstore::GraphStats;
use crate::querymodel::{
    all_connected_subgraphs, automorphism_count, is_complete_star_join, is_join_unit, mask_to_vec,
    CanonicalCode, EdgeSet, QueryGraph, Star,
};
use crate::QueryVertex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JoinAlgorithm {
    Hash,
    Wco,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommMode {
    Pushing,
    Pulling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PhysicalSetting {
    pub algorithm: JoinAlgorithm,
    pub comm: CommMode,
}

impl fmt::Display for PhysicalSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = match self.algorithm {
            JoinAlgorithm::Hash => "hash",
            JoinAlgorithm::Wco => "wco",
        };
        let c = match self.comm {
            CommMode::Pushing => "pushing",
            CommMode::Pulling => "pulling",
        };
        write!(f, "({a}, {c})")
    }
}

/// Data-graph statistics seen by the planner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanStats {
    pub vertices: u64,
    pub edges: u64,
    pub max_degree: u64,
    pub machines: usize,
}

impl PlanStats {
    pub fn new(graph: &GraphStats, machines: usize) -> PlanStats {
        PlanStats {
            vertices: graph.vertex_count as u64,
            edges: graph.edge_count as u64,
            max_degree: graph.max_degree as u64,
            machines: machines.max(1),
        }
    }

    pub fn edge_probability(&self) -> f64 {
        if self.vertices < 2 {
            return 0.0;
        }
        let v = self.vertices as f64;
        (2.0 * self.edges as f64 / (v * (v - 1.0))).min(1.0)
    }

    fn pull_cost(&self) -> f64 {
        self.machines as f64 * self.edges as f64
    }
}

/// Erdős–Rényi estimate of the number of matches of an `n`-vertex,
/// `m`-edge pattern with `aut` automorphisms.
pub fn estimate_from_shape(n: usize, m: usize, aut: u64, stats: &PlanStats) -> f64 {
    if (stats.vertices as usize) < n {
        return 0.0;
    }
    let v = stats.vertices as f64;
    let falling: f64 = (0..n).map(|i| v - i as f64).product();
    falling * stats.edge_probability().powi(m as i32) / aut as f64
}

/// Estimated match count of sub-query `set` of `q`.
pub fn estimate_cardinality(q: &QueryGraph, set: EdgeSet, stats: &PlanStats) -> f64 {
    let verts = q.vertices(set);
    let (n, local) = local_edges(q, set, &verts);
    let aut = automorphism_count(n, &local).expect("sub-query within size cap");
    estimate_from_shape(n, set.len(), aut, stats)
}

fn local_edges(q: &QueryGraph, set: EdgeSet, verts: &[QueryVertex]) -> (usize, Vec<(usize, usize)>) {
    let pos = |v: usize| verts.iter().position(|&x| x == v).unwrap();
    let edges = set
        .iter()
        .map(|e| {
            let (u, v) = q.edges()[e];
            (pos(u), pos(v))
        })
        .collect();
    (verts.len(), edges)
}

/// A two-way join `output = left ⋈ right`, oriented so that `right` is the
/// side matching the chosen physical case.
#[derive(Clone, Debug, PartialEq)]
pub struct JoinStep {
    pub output: EdgeSet,
    pub left: EdgeSet,
    pub right: EdgeSet,
    pub setting: PhysicalSetting,
    /// Root of `right` as a star, for pulling joins.
    pub right_root: Option<QueryVertex>,
    pub estimate: f64,
}

impl JoinStep {
    pub fn is_complete_star(&self) -> bool {
        self.setting.algorithm == JoinAlgorithm::Wco
    }
}

/// A join order over star units. An empty join list means the query is
/// itself a star and runs as a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionPlan {
    pub query: QueryGraph,
    pub joins: Vec<JoinStep>,
    pub cost: f64,
}

impl ExecutionPlan {
    /// Star shape of a unit sub-query; single edges root at the lower vertex.
    pub fn unit_star(&self, set: EdgeSet) -> Star {
        unit_star(&self.query, set)
    }

    /// The join producing `set`, if `set` is not a unit.
    pub fn producer(&self, set: EdgeSet) -> Option<&JoinStep> {
        self.joins.iter().find(|j| j.output == set)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.tree_node(self.query.full())).expect("plan tree serialises")
    }

    fn tree_node(&self, set: EdgeSet) -> PlanNode {
        let query_vertices = self.query.vertices(set);
        match self.producer(set) {
            Some(j) => PlanNode {
                query_vertices,
                children: Some(vec![self.tree_node(j.left), self.tree_node(j.right)]),
                leaf_star: None,
                algorithm: Some(j.setting.algorithm),
                comm: Some(j.setting.comm),
            },
            None => {
                let star = self.unit_star(set);
                PlanNode {
                    query_vertices,
                    children: None,
                    leaf_star: Some(LeafStar {
                        root: star.root,
                        leaves: star.leaves,
                    }),
                    algorithm: None,
                    comm: None,
                }
            }
        }
    }

    pub fn describe(&self, stats: &PlanStats) -> String {
        let mut out = String::new();
        if self.joins.is_empty() {
            let s = self.unit_star(self.query.full());
            out.push_str(&format!(
                "no joins; scan rewrite only: star({}; {:?})\n",
                s.root, s.leaves
            ));
        }
        for (i, j) in self.joins.iter().enumerate() {
            out.push_str(&format!(
                "join {i}: {:?} = {:?} + {:?} {} est={:.3e}\n",
                self.query.vertices(j.output),
                self.query.vertices(j.left),
                self.query.vertices(j.right),
                j.setting,
                j.estimate,
            ));
        }
        out.push_str(&format!("cost {:.6e}\n", plan_cost(self, stats)));
        out
    }
}

pub(crate) fn unit_star(q: &QueryGraph, set: EdgeSet) -> Star {
    let root = q.star_roots(set)[0];
    q.as_star(set, root).expect("unit is a star")
}

/// The oriented configuration of one triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfiguredJoin {
    pub left: EdgeSet,
    pub right: EdgeSet,
    pub setting: PhysicalSetting,
    pub right_root: Option<QueryVertex>,
}

/// Pulling orientations ranked best first: a genuine extend to a new root,
/// a closing verification extend, then a pulling hash join.
fn pulling_orientations(q: &QueryGraph, a: EdgeSet, b: EdgeSet) -> Vec<(u8, ConfiguredJoin)> {
    let mut out = Vec::new();
    for (l, r) in [(a, b), (b, a)] {
        let lv = q.vertex_mask(l);
        for root in q.star_roots(r) {
            let leaves = q.vertex_mask(r) & !(1 << root);
            let root_in_left = lv >> root & 1 == 1;
            let (rank, algorithm) = if leaves & !lv == 0 {
                (if root_in_left { 1 } else { 0 }, JoinAlgorithm::Wco)
            } else if root_in_left {
                (2, JoinAlgorithm::Hash)
            } else {
                continue;
            };
            out.push((
                rank,
                ConfiguredJoin {
                    left: l,
                    right: r,
                    setting: PhysicalSetting {
                        algorithm,
                        comm: CommMode::Pulling,
                    },
                    right_root: Some(root),
                },
            ));
        }
    }
    out.sort_by_key(|(rank, _)| *rank);
    out
}

/// Physical setting of `a ⋈ b`, examining both orientations.
pub fn configure_join(q: &QueryGraph, a: EdgeSet, b: EdgeSet) -> ConfiguredJoin {
    pulling_orientations(q, a, b)
        .into_iter()
        .next()
        .map(|(_, c)| c)
        .unwrap_or(ConfiguredJoin {
            left: a,
            right: b,
            setting: PhysicalSetting {
                algorithm: JoinAlgorithm::Hash,
                comm: CommMode::Pushing,
            },
            right_root: None,
        })
}

/// Applies an explicit setting, rejecting ones the triple cannot support.
pub fn configure_with_override(
    q: &QueryGraph,
    a: EdgeSet,
    b: EdgeSet,
    setting: PhysicalSetting,
) -> Result<ConfiguredJoin> {
    match (setting.algorithm, setting.comm) {
        (JoinAlgorithm::Wco, CommMode::Pushing) => Err(Error::InvalidPlan(
            "wco joins are only supported with pulling".into(),
        )),
        (JoinAlgorithm::Hash, CommMode::Pushing) => Ok(ConfiguredJoin {
            left: a,
            right: b,
            setting,
            right_root: None,
        }),
        (algorithm, CommMode::Pulling) => pulling_orientations(q, a, b)
            .into_iter()
            .find(|(rank, _)| match algorithm {
                JoinAlgorithm::Wco => *rank < 2,
                JoinAlgorithm::Hash => *rank == 2 || *rank == 1,
            })
            .map(|(_, mut c)| {
                c.setting = setting;
                c
            })
            .ok_or_else(|| {
                Error::InvalidPlan(format!(
                    "{setting} not applicable to {:?} + {:?}",
                    q.vertices(a),
                    q.vertices(b)
                ))
            }),
    }
}

fn join_cost(
    setting: PhysicalSetting,
    est_out: f64,
    est_l: f64,
    est_r: f64,
    cost_l: f64,
    cost_r: f64,
    stats: &PlanStats,
) -> f64 {
    let comm = match setting.comm {
        CommMode::Pulling => stats.pull_cost(),
        CommMode::Pushing => est_l + est_r,
    };
    cost_l + cost_r + est_out + comm
}

struct Entry {
    cost: f64,
    est: f64,
    code: CanonicalCode,
    split: Option<(EdgeSet, EdgeSet)>,
}

/// Dynamic program over connected sub-queries choosing the cheapest
/// decomposition into star units.
pub fn optimal_plan(q: &QueryGraph, stats: &PlanStats) -> Result<ExecutionPlan> {
    let mut subs = all_connected_subgraphs(q);
    subs.sort_by_key(|s| (s.len(), q.vertex_count(*s), s.0));
    let mut table: HashMap<EdgeSet, Entry> = HashMap::with_capacity(subs.len());
    for s in subs {
        let est = estimate_cardinality(q, s, stats);
        let code = q.canonical_code(s);
        if is_join_unit(q, s) {
            table.insert(
                s,
                Entry {
                    cost: est,
                    est,
                    code,
                    split: None,
                },
            );
            continue;
        }
        let mut best: Option<(f64, (CanonicalCode, CanonicalCode, EdgeSet, EdgeSet))> = None;
        let full = s.0;
        let mut sub = (full - 1) & full;
        while sub != 0 {
            let l = EdgeSet(sub);
            let r = s.minus(l);
            sub = (sub - 1) & full;
            let (Some(el), Some(er)) = (table.get(&l), table.get(&r)) else {
                continue;
            };
            if q.vertex_mask(l) & q.vertex_mask(r) == 0 {
                continue;
            }
            let setting = configure_join(q, l, r).setting;
            let cost = join_cost(setting, est, el.est, er.est, el.cost, er.cost, stats);
            let key = (el.code, er.code, l, r);
            let better = match &best {
                None => true,
                Some((c, k)) => cost < *c || (cost == *c && key < *k),
            };
            if better {
                best = Some((cost, key));
            }
        }
        let (cost, (_, _, l, r)) = best.ok_or_else(|| {
            Error::InvalidPlan(format!("no decomposition for {:?}", q.vertices(s)))
        })?;
        table.insert(
            s,
            Entry {
                cost,
                est,
                code,
                split: Some((l, r)),
            },
        );
    }
    let mut joins = Vec::new();
    fn recover(
        q: &QueryGraph,
        table: &HashMap<EdgeSet, Entry>,
        set: EdgeSet,
        joins: &mut Vec<JoinStep>,
    ) {
        let entry = &table[&set];
        if let Some((l, r)) = entry.split {
            let c = configure_join(q, l, r);
            recover(q, table, c.left, joins);
            recover(q, table, c.right, joins);
            joins.push(JoinStep {
                output: set,
                left: c.left,
                right: c.right,
                setting: c.setting,
                right_root: c.right_root,
                estimate: entry.est,
            });
        }
    }
    recover(q, &table, q.full(), &mut joins);
    let cost = table[&q.full()].cost;
    Ok(ExecutionPlan {
        query: q.clone(),
        joins,
        cost,
    })
}

/// Cost of an arbitrary plan under the shared estimator.
pub fn plan_cost(plan: &ExecutionPlan, stats: &PlanStats) -> f64 {
    fn cost_of(plan: &ExecutionPlan, set: EdgeSet, stats: &PlanStats) -> f64 {
        let est = estimate_cardinality(&plan.query, set, stats);
        match plan.producer(set) {
            None => est,
            Some(j) => join_cost(
                j.setting,
                est,
                estimate_cardinality(&plan.query, j.left, stats),
                estimate_cardinality(&plan.query, j.right, stats),
                cost_of(plan, j.left, stats),
                cost_of(plan, j.right, stats),
                stats,
            ),
        }
    }
    cost_of(plan, plan.query.full(), stats)
}

fn build_plan(
    q: &QueryGraph,
    stats: &PlanStats,
    steps: Vec<(EdgeSet, EdgeSet, Option<PhysicalSetting>)>,
) -> Result<ExecutionPlan> {
    let mut joins = Vec::new();
    for (a, b, setting) in steps {
        let c = match setting {
            Some(s) => configure_with_override(q, a, b, s)?,
            None => configure_join(q, a, b),
        };
        let output = a.union(b);
        joins.push(JoinStep {
            output,
            left: c.left,
            right: c.right,
            setting: c.setting,
            right_root: c.right_root,
            estimate: estimate_cardinality(q, output, stats),
        });
    }
    let mut plan = ExecutionPlan {
        query: q.clone(),
        joins,
        cost: 0.0,
    };
    validate_plan(&plan)?;
    plan.cost = plan_cost(&plan, stats);
    Ok(plan)
}

/// Vertex-at-a-time plan: start from an edge and repeatedly extend to the
/// smallest unmatched vertex adjacent to the matched set.
pub fn left_deep_wco_plan(q: &QueryGraph, stats: &PlanStats) -> Result<ExecutionPlan> {
    if is_join_unit(q, q.full()) {
        return build_plan(q, stats, Vec::new());
    }
    let (u0, v0) = q.edges()[0];
    let mut matched: u16 = 1 << u0 | 1 << v0;
    let mut current = EdgeSet::default().with(0);
    let mut steps = Vec::new();
    while current != q.full() {
        let next = (0..q.n())
            .find(|&v| matched >> v & 1 == 0 && q.neighbour_mask(v) & matched != 0)
            .ok_or_else(|| Error::InvalidPlan("query not connected".into()))?;
        let leaves = mask_to_vec(q.neighbour_mask(next) & matched);
        let star = q.star_edges(next, &leaves).expect("edges exist");
        steps.push((current, star, None));
        current = current.union(star);
        matched |= 1 << next;
    }
    build_plan(q, stats, steps)
}

/// Star decomposition joined left-deep: repeatedly take the vertex covering
/// the most remaining edges, then join the stars in a connected order.
pub fn star_join_plan(q: &QueryGraph, stats: &PlanStats) -> Result<ExecutionPlan> {
    let mut remaining = q.full();
    let mut stars = Vec::new();
    while !remaining.is_empty() {
        let incident = |v: usize| {
            remaining
                .iter()
                .filter(|&e| {
                    let (a, b) = q.edges()[e];
                    a == v || b == v
                })
                .fold(EdgeSet::default(), |s, e| s.with(e))
        };
        let root = (0..q.n())
            .max_by_key(|&v| (incident(v).len(), std::cmp::Reverse(v)))
            .expect("non-empty query");
        let star = incident(root);
        stars.push(star);
        remaining = remaining.minus(star);
    }
    let mut current = stars.remove(0);
    let mut steps = Vec::new();
    while !stars.is_empty() {
        let idx = stars
            .iter()
            .position(|s| q.vertex_mask(*s) & q.vertex_mask(current) != 0)
            .ok_or_else(|| Error::InvalidPlan("stars do not connect".into()))?;
        let s = stars.remove(idx);
        steps.push((current, s, None));
        current = current.union(s);
    }
    build_plan(q, stats, steps)
}

/// Structural checks: each join combines edge-disjoint connected inputs with
/// a shared vertex, inputs are units or earlier outputs, and the last join
/// produces the whole query.
pub fn validate_plan(plan: &ExecutionPlan) -> Result<()> {
    let q = &plan.query;
    if plan.joins.is_empty() {
        return if is_join_unit(q, q.full()) {
            Ok(())
        } else {
            Err(Error::InvalidPlan("empty plan for a non-star query".into()))
        };
    }
    let mut produced: Vec<EdgeSet> = Vec::new();
    for j in &plan.joins {
        if !j.left.is_disjoint(j.right) || j.left.union(j.right) != j.output {
            return Err(Error::InvalidPlan("join inputs must partition the output".into()));
        }
        for side in [j.left, j.right] {
            if !q.is_connected(side) {
                return Err(Error::InvalidPlan("join input not connected".into()));
            }
            if !is_join_unit(q, side) && !produced.contains(&side) {
                return Err(Error::InvalidPlan(format!(
                    "sub-query {:?} used before it is produced",
                    q.vertices(side)
                )));
            }
        }
        if q.vertex_mask(j.left) & q.vertex_mask(j.right) == 0 {
            return Err(Error::InvalidPlan("join key is empty".into()));
        }
        if j.setting.algorithm == JoinAlgorithm::Wco && !is_complete_star_join(q, j.left, j.right) {
            return Err(Error::InvalidPlan("wco join on a non complete star join".into()));
        }
        produced.push(j.output);
    }
    if plan.joins.last().map(|j| j.output) != Some(q.full()) {
        return Err(Error::InvalidPlan("plan does not produce the query".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LeafStar {
    pub root: QueryVertex,
    pub leaves: Vec<QueryVertex>,
}

/// A join tree node as stored in plan files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanNode {
    pub query_vertices: Vec<QueryVertex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub children: Option<Vec<PlanNode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaf_star: Option<LeafStar>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<JoinAlgorithm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comm: Option<CommMode>,
}

/// Builds a plan from a join tree; physical settings follow the tree's
/// overrides, or are derived when absent.
pub fn plan_from_tree(q: &QueryGraph, tree: &PlanNode, stats: &PlanStats) -> Result<ExecutionPlan> {
    fn walk(
        q: &QueryGraph,
        node: &PlanNode,
        steps: &mut Vec<(EdgeSet, EdgeSet, Option<PhysicalSetting>)>,
    ) -> Result<EdgeSet> {
        let set = match (&node.children, &node.leaf_star) {
            (Some(children), None) => {
                let [a, b] = children.as_slice() else {
                    return Err(Error::InvalidPlan("join nodes need two children".into()));
                };
                let l = walk(q, a, steps)?;
                let r = walk(q, b, steps)?;
                if !l.is_disjoint(r) {
                    return Err(Error::InvalidPlan("children share edges".into()));
                }
                let setting = match (node.algorithm, node.comm) {
                    (None, None) => None,
                    (a, c) => {
                        let derived = configure_join(q, l, r).setting;
                        Some(PhysicalSetting {
                            algorithm: a.unwrap_or(derived.algorithm),
                            comm: c.unwrap_or(derived.comm),
                        })
                    }
                };
                steps.push((l, r, setting));
                l.union(r)
            }
            (None, Some(star)) => {
                if star.leaves.is_empty() {
                    return Err(Error::InvalidPlan("star without leaves".into()));
                }
                if star.root >= q.n() || star.leaves.iter().any(|&l| l >= q.n()) {
                    return Err(Error::InvalidPlan("star vertex out of range".into()));
                }
                q.star_edges(star.root, &star.leaves).ok_or_else(|| {
                    Error::InvalidPlan(format!("star({}; {:?}) not in query", star.root, star.leaves))
                })?
            }
            _ => {
                return Err(Error::InvalidPlan(
                    "node needs exactly one of children or leaf_star".into(),
                ))
            }
        };
        let mut declared = node.query_vertices.clone();
        declared.sort_unstable();
        if declared != q.vertices(set) {
            return Err(Error::InvalidPlan(format!(
                "declared vertices {:?} but sub-tree covers {:?}",
                node.query_vertices,
                q.vertices(set)
            )));
        }
        Ok(set)
    }
    let mut steps = Vec::new();
    let root = walk(q, tree, &mut steps)?;
    if root != q.full() {
        return Err(Error::InvalidPlan("plan does not cover the query".into()));
    }
    build_plan(q, stats, steps)
}

pub fn parse_logical_plan(text: &str, q: &QueryGraph, stats: &PlanStats) -> Result<ExecutionPlan> {
    let tree: PlanNode = serde_json::from_str(text)
        .map_err(|e| Error::InvalidPlan(format!("malformed plan file: {e}")))?;
    plan_from_tree(q, &tree, stats)
}

pub fn load_logical_plan(path: &Path, q: &QueryGraph, stats: &PlanStats) -> Result<ExecutionPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_logical_plan(&text, q, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(v: u64, e: u64, k: usize) -> PlanStats {
        PlanStats {
            vertices: v,
            edges: e,
            max_degree: 0,
            machines: k,
        }
    }

    /// LiveJournal-scale statistics.
    fn lj() -> PlanStats {
        stats(4_847_571, 43_369_619, 10)
    }

    fn q(name: &str) -> QueryGraph {
        QueryGraph::named(name).unwrap()
    }

    fn set(q: &QueryGraph, edges: &[(usize, usize)]) -> EdgeSet {
        edges
            .iter()
            .fold(EdgeSet::default(), |s, &(u, v)| s.with(q.edge_index(u, v).unwrap()))
    }

    const WCO_PULL: PhysicalSetting = PhysicalSetting {
        algorithm: JoinAlgorithm::Wco,
        comm: CommMode::Pulling,
    };
    const HASH_PULL: PhysicalSetting = PhysicalSetting {
        algorithm: JoinAlgorithm::Hash,
        comm: CommMode::Pulling,
    };
    const HASH_PUSH: PhysicalSetting = PhysicalSetting {
        algorithm: JoinAlgorithm::Hash,
        comm: CommMode::Pushing,
    };

    #[test]
    fn estimates() {
        let k4 = stats(4, 6, 1);
        let e = q("edge");
        assert!((estimate_cardinality(&e, e.full(), &k4) - 6.0).abs() < 1e-9);
        let t = q("triangle");
        assert!((estimate_cardinality(&t, t.full(), &k4) - 4.0).abs() < 1e-9);
        let p = q("2-path");
        let c4 = stats(4, 4, 1);
        let est = estimate_cardinality(&p, p.full(), &c4);
        assert!((est - 4.0 * 3.0 * 2.0 * (2.0f64 / 3.0).powi(2) / 2.0).abs() < 1e-9);
        assert!((est - 5.333).abs() < 1e-3);
        assert_eq!(estimate_cardinality(&t, t.full(), &stats(2, 1, 1)), 0.0);
    }

    #[test]
    fn triangle_plan() {
        let t = q("triangle");
        let plan = optimal_plan(&t, &lj()).unwrap();
        assert_eq!(plan.joins.len(), 1);
        let j = &plan.joins[0];
        assert_eq!(j.setting, WCO_PULL);
        assert_eq!(j.left, set(&t, &[(0, 1)]));
        assert_eq!(j.right, set(&t, &[(0, 2), (1, 2)]));
        assert_eq!(j.right_root, Some(2));
    }

    /// Small and fairly dense: a three-leaf star unit is cheaper than closing
    /// the clique edge by edge, and a diamond is estimated to be more common
    /// than a triangle.
    fn clique_friendly() -> PlanStats {
        stats(60, 210, 10)
    }

    fn assert_left_deep_wco_chain(k4: &QueryGraph, plan: &ExecutionPlan) {
        for (i, j) in plan.joins.iter().enumerate() {
            assert_eq!(j.setting, WCO_PULL);
            assert!(is_join_unit(k4, j.right));
            if i > 0 {
                assert_eq!(j.left, plan.joins[i - 1].output);
            }
        }
        assert!(is_join_unit(k4, plan.joins[0].left));
    }

    #[test]
    fn four_clique_edge_triangle_clique() {
        let k4 = q("4-clique");
        let plan = optimal_plan(&k4, &clique_friendly()).unwrap();
        let sizes: Vec<usize> = plan.joins.iter().map(|j| j.output.len()).collect();
        assert_eq!(sizes, vec![3, 6]);
        assert_eq!(k4.vertex_count(plan.joins[0].left), 2);
        assert_left_deep_wco_chain(&k4, &plan);
    }

    #[test]
    fn four_clique_chain_on_dense_stats() {
        let k4 = q("4-clique");
        let plan = optimal_plan(&k4, &lj()).unwrap();
        assert_left_deep_wco_chain(&k4, &plan);
    }

    #[test]
    fn five_path_mixes_pushing_hash_and_pulling_wco() {
        let p = q("5-path");
        let plan = optimal_plan(&p, &lj()).unwrap();
        let push = plan.joins.iter().filter(|j| j.setting == HASH_PUSH).count();
        let wco = plan.joins.iter().filter(|j| j.setting == WCO_PULL).count();
        assert_eq!((push, wco, plan.joins.len()), (1, 1, 2));
    }

    #[test]
    fn configure_cases() {
        let t = q("triangle");
        let c = configure_join(&t, set(&t, &[(0, 1)]), set(&t, &[(0, 2), (1, 2)]));
        assert_eq!(c.setting, WCO_PULL);
        // star(1; {4, 5}) hanging off a matched root
        let g = QueryGraph::new(6, &[(0, 1), (1, 2), (2, 3), (1, 4), (1, 5)]).unwrap();
        let c = configure_join(
            &g,
            set(&g, &[(0, 1), (1, 2), (2, 3)]),
            set(&g, &[(1, 4), (1, 5)]),
        );
        assert_eq!(c.setting, HASH_PULL);
        assert_eq!(c.right_root, Some(1));
        let p = q("5-path");
        let c = configure_join(
            &p,
            set(&p, &[(0, 1), (1, 2)]),
            set(&p, &[(2, 3), (3, 4)]),
        );
        assert_eq!(c.setting, HASH_PUSH);
    }

    #[test]
    fn determinism() {
        for name in ["house", "5-path", "chordal-square", "5-clique"] {
            let a = optimal_plan(&q(name), &lj()).unwrap();
            let b = optimal_plan(&q(name), &lj()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn dp_cost_matches_plan_cost_and_dominates_baselines() {
        for s in [lj(), stats(2000, 20_000, 4), stats(50, 120, 1)] {
            for name in [
                "2-path", "triangle", "square", "4-clique", "house", "5-path", "5-clique",
                "chordal-square",
            ] {
                let query = q(name);
                let dp = optimal_plan(&query, &s).unwrap();
                validate_plan(&dp).unwrap();
                let recomputed = plan_cost(&dp, &s);
                assert!((recomputed - dp.cost).abs() <= 1e-9 * dp.cost.abs().max(1.0), "{name}");
                let left = left_deep_wco_plan(&query, &s).unwrap();
                assert!(left.joins.iter().all(|j| j.setting == WCO_PULL), "{name}");
                assert!(dp.cost <= left.cost, "{name}");
                let star = star_join_plan(&query, &s).unwrap();
                assert!(dp.cost <= star.cost, "{name}");
            }
        }
    }

    #[test]
    fn emitted_settings_satisfy_their_invariants() {
        for name in ["house", "5-path", "chordal-square", "5-clique", "square"] {
            let query = q(name);
            let plan = optimal_plan(&query, &lj()).unwrap();
            for j in &plan.joins {
                if j.setting.algorithm == JoinAlgorithm::Wco {
                    assert!(is_complete_star_join(&query, j.left, j.right));
                }
                if j.setting.comm == CommMode::Pulling {
                    let root = j.right_root.unwrap();
                    let r = query.as_star(j.right, root).unwrap();
                    let lv = query.vertex_mask(j.left);
                    let c1 = lv >> root & 1 == 1;
                    let c2 = r.leaves.iter().all(|&l| lv >> l & 1 == 1);
                    assert!(c1 || c2);
                }
            }
        }
    }

    #[test]
    fn star_query_has_empty_plan() {
        let s = q("3-star");
        let plan = optimal_plan(&s, &lj()).unwrap();
        assert!(plan.joins.is_empty());
        let json = r#"{"query_vertices":[0,1,2,3],"leaf_star":{"root":0,"leaves":[1,2,3]}}"#;
        let loaded = parse_logical_plan(json, &s, &lj()).unwrap();
        assert!(loaded.joins.is_empty());
    }

    #[test]
    fn vertex_at_a_time_plan_for_four_clique_is_all_wco() {
        let k4 = q("4-clique");
        let json = r#"{"query_vertices":[0,1,2,3],"children":[
            {"query_vertices":[0,1,2],"children":[
                {"query_vertices":[0,1],"leaf_star":{"root":0,"leaves":[1]}},
                {"query_vertices":[0,1,2],"leaf_star":{"root":2,"leaves":[0,1]}}]},
            {"query_vertices":[0,1,2,3],"leaf_star":{"root":3,"leaves":[0,1,2]}}]}"#;
        let plan = parse_logical_plan(json, &k4, &lj()).unwrap();
        assert_eq!(plan.joins.len(), 2);
        assert!(plan.joins.iter().all(|j| j.setting == WCO_PULL));
    }

    #[test]
    fn two_star_plan_for_square() {
        let sq = q("square");
        let json = r#"{"query_vertices":[0,1,2,3],"children":[
            {"query_vertices":[0,1,3],"leaf_star":{"root":0,"leaves":[1,3]}},
            {"query_vertices":[1,2,3],"leaf_star":{"root":2,"leaves":[1,3]}}]}"#;
        let plan = parse_logical_plan(json, &sq, &lj()).unwrap();
        // Both leaves of the second star are matched by the first.
        assert_eq!(plan.joins[0].setting, WCO_PULL);
        let forced = json.replacen(
            r#""query_vertices":[0,1,2,3],"children""#,
            r#""query_vertices":[0,1,2,3],"algorithm":"hash","comm":"pushing","children""#,
            1,
        );
        let plan = parse_logical_plan(&forced, &sq, &lj()).unwrap();
        assert_eq!(plan.joins[0].setting, HASH_PUSH);
    }

    #[test]
    fn rejects_bad_plans() {
        let sq = q("square");
        let overlapping = r#"{"query_vertices":[0,1,2,3],"children":[
            {"query_vertices":[0,1,3],"leaf_star":{"root":0,"leaves":[1,3]}},
            {"query_vertices":[0,1],"leaf_star":{"root":0,"leaves":[1]}}]}"#;
        assert!(parse_logical_plan(overlapping, &sq, &lj()).is_err());
        let short = r#"{"query_vertices":[0,1,3],"leaf_star":{"root":0,"leaves":[1,3]}}"#;
        assert!(parse_logical_plan(short, &sq, &lj()).is_err());
        assert!(parse_logical_plan("{", &sq, &lj()).is_err());
        let wco_push = r#"{"query_vertices":[0,1,2,3],"algorithm":"wco","comm":"pushing","children":[
            {"query_vertices":[0,1,3],"leaf_star":{"root":0,"leaves":[1,3]}},
            {"query_vertices":[1,2,3],"leaf_star":{"root":2,"leaves":[1,3]}}]}"#;
        assert!(parse_logical_plan(wco_push, &sq, &lj()).is_err());
        let p = q("5-path");
        let bad_pull = r#"{"query_vertices":[0,1,2,3,4,5],"comm":"pulling","children":[
            {"query_vertices":[0,1,2],"leaf_star":{"root":1,"leaves":[0,2]}},
            {"query_vertices":[2,3,4,5],"children":[
                {"query_vertices":[2,3,4],"leaf_star":{"root":3,"leaves":[2,4]}},
                {"query_vertices":[4,5],"leaf_star":{"root":4,"leaves":[5]}}]}]}"#;
        assert!(parse_logical_plan(bad_pull, &p, &lj()).is_err());
    }

    #[test]
    fn json_round_trip() {
        let h = q("house");
        let plan = optimal_plan(&h, &lj()).unwrap();
        let text = plan.to_json().to_string();
        let back = parse_logical_plan(&text, &h, &lj()).unwrap();
        assert_eq!(back.joins, plan.joins);
    }
}
