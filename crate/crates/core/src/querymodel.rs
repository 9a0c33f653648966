//! Query graphs, connected sub-queries, star join units and symmetry breaking.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::QueryVertex;

/// Exhaustive permutation methods bound the query size.
pub const MAX_QUERY_VERTICES: usize = 10;

/// A subset of a query's edges, bit `i` standing for `QueryGraph::edges()[i]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeSet(pub u64);

impl EdgeSet {
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, edge: usize) -> bool {
        self.0 >> edge & 1 == 1
    }

    pub fn with(self, edge: usize) -> EdgeSet {
        EdgeSet(self.0 | 1 << edge)
    }

    pub fn union(self, other: EdgeSet) -> EdgeSet {
        EdgeSet(self.0 | other.0)
    }

    pub fn minus(self, other: EdgeSet) -> EdgeSet {
        EdgeSet(self.0 & !other.0)
    }

    pub fn is_disjoint(self, other: EdgeSet) -> bool {
        self.0 & other.0 == 0
    }

    pub fn is_subset(self, other: EdgeSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let i = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(i)
            }
        })
    }
}

/// A star `(root; leaves)`: a depth-1 tree.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Star {
    pub root: QueryVertex,
    /// Ascending.
    pub leaves: Vec<QueryVertex>,
}

/// Isomorphism-invariant identifier of a small graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalCode {
    vertices: u8,
    edges: u8,
    bits: u64,
}

/// Connected, simple, undirected pattern graph with symmetry-breaking orders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryGraph {
    n: usize,
    edges: Vec<(QueryVertex, QueryVertex)>,
    adjacency: Vec<u16>,
    orders: Vec<(QueryVertex, QueryVertex)>,
    aut_count: u64,
}

impl QueryGraph {
    /// Builds a query and computes its symmetry-breaking orders.
    pub fn new(n: usize, edges: &[(QueryVertex, QueryVertex)]) -> Result<QueryGraph> {
        let mut q = Self::bare(n, edges)?;
        q.orders = symmetry_break_orders(&q);
        Ok(q)
    }

    /// Builds a query with explicitly given orders `a < b`.
    pub fn with_orders(
        n: usize,
        edges: &[(QueryVertex, QueryVertex)],
        orders: &[(QueryVertex, QueryVertex)],
    ) -> Result<QueryGraph> {
        let mut q = Self::bare(n, edges)?;
        for &(a, b) in orders {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidQuery(format!("bad order {a} < {b}")));
            }
        }
        if has_cycle(n, orders) {
            return Err(Error::InvalidQuery("partial orders are cyclic".into()));
        }
        q.orders = orders.to_vec();
        Ok(q)
    }

    fn bare(n: usize, edges: &[(QueryVertex, QueryVertex)]) -> Result<QueryGraph> {
        if n == 0 {
            return Err(Error::InvalidQuery("query has no vertices".into()));
        }
        if n > MAX_QUERY_VERTICES {
            return Err(Error::QueryTooLarge(n));
        }
        let mut list = BTreeSet::new();
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidQuery(format!("edge ({u}, {v}) out of range")));
            }
            if u == v {
                return Err(Error::InvalidQuery(format!("self-loop on {u}")));
            }
            list.insert((u.min(v), u.max(v)));
        }
        let edges: Vec<_> = list.into_iter().collect();
        let mut adjacency = vec![0u16; n];
        for &(u, v) in &edges {
            adjacency[u] |= 1 << v;
            adjacency[v] |= 1 << u;
        }
        let mut q = QueryGraph {
            n,
            edges,
            adjacency,
            orders: Vec::new(),
            aut_count: 1,
        };
        if n > 1 && !q.is_connected(q.full()) {
            return Err(Error::DisconnectedQuery);
        }
        q.aut_count = automorphisms(n, &q.adjacency).len() as u64;
        Ok(q)
    }

    /// Same pattern with no symmetry-breaking orders (raw mapping semantics).
    pub fn without_orders(&self) -> QueryGraph {
        QueryGraph {
            orders: Vec::new(),
            ..self.clone()
        }
    }

    /// Queries used throughout tests and the CLI. Paths are named by edge
    /// count (`5-path` has six vertices).
    pub fn named(name: &str) -> Option<QueryGraph> {
        let edges: Vec<(usize, usize)> = match name {
            "edge" => vec![(0, 1)],
            "2-path" => vec![(0, 1), (1, 2)],
            "3-path" => vec![(0, 1), (1, 2), (2, 3)],
            "triangle" => vec![(0, 1), (1, 2), (0, 2)],
            "square" => vec![(0, 1), (1, 2), (2, 3), (0, 3)],
            "chordal-square" => vec![(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)],
            "4-clique" => vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
            "house" => vec![(0, 1), (1, 2), (2, 3), (0, 3), (0, 4), (1, 4)],
            "5-path" => vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)],
            "5-clique" => {
                let mut e = Vec::new();
                for u in 0..5 {
                    for v in u + 1..5 {
                        e.push((u, v));
                    }
                }
                e
            }
            "3-star" => vec![(0, 1), (0, 2), (0, 3)],
            _ => return None,
        };
        let n = edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(1);
        QueryGraph::new(n, &edges).ok()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(QueryVertex, QueryVertex)] {
        &self.edges
    }

    pub fn edge_index(&self, u: QueryVertex, v: QueryVertex) -> Option<usize> {
        let key = (u.min(v), u.max(v));
        self.edges.binary_search(&key).ok()
    }

    pub fn full(&self) -> EdgeSet {
        EdgeSet(if self.edges.len() == 64 {
            u64::MAX
        } else {
            (1u64 << self.edges.len()) - 1
        })
    }

    pub fn adjacent(&self, u: QueryVertex, v: QueryVertex) -> bool {
        self.adjacency[u] >> v & 1 == 1
    }

    pub fn neighbour_mask(&self, v: QueryVertex) -> u16 {
        self.adjacency[v]
    }

    pub fn orders(&self) -> &[(QueryVertex, QueryVertex)] {
        &self.orders
    }

    pub fn aut_count(&self) -> u64 {
        self.aut_count
    }

    /// Bitmask of vertices touched by `set`.
    pub fn vertex_mask(&self, set: EdgeSet) -> u16 {
        set.iter().fold(0u16, |m, e| {
            let (u, v) = self.edges[e];
            m | 1 << u | 1 << v
        })
    }

    pub fn vertices(&self, set: EdgeSet) -> Vec<QueryVertex> {
        mask_to_vec(self.vertex_mask(set))
    }

    pub fn vertex_count(&self, set: EdgeSet) -> usize {
        self.vertex_mask(set).count_ones() as usize
    }

    pub fn is_connected(&self, set: EdgeSet) -> bool {
        if set.is_empty() {
            return false;
        }
        let verts = self.vertex_mask(set);
        let start = verts.trailing_zeros() as usize;
        let mut seen = 1u16 << start;
        let mut stack = vec![start];
        while let Some(x) = stack.pop() {
            for e in set.iter() {
                let (u, v) = self.edges[e];
                let other = if u == x {
                    v
                } else if v == x {
                    u
                } else {
                    continue;
                };
                if seen & 1 << other == 0 {
                    seen |= 1 << other;
                    stack.push(other);
                }
            }
        }
        seen == verts
    }

    /// Vertices that can serve as the root of `set` viewed as a star. A single
    /// edge has two candidate roots; a larger star has one; a non-star none.
    pub fn star_roots(&self, set: EdgeSet) -> Vec<QueryVertex> {
        let mut common: Option<u16> = None;
        for e in set.iter() {
            let (u, v) = self.edges[e];
            let m = 1u16 << u | 1 << v;
            common = Some(common.map_or(m, |c| c & m));
        }
        common.map(mask_to_vec).unwrap_or_default()
    }

    pub fn as_star(&self, set: EdgeSet, root: QueryVertex) -> Option<Star> {
        if !self.star_roots(set).contains(&root) {
            return None;
        }
        let leaves = mask_to_vec(self.vertex_mask(set) & !(1 << root));
        Some(Star { root, leaves })
    }

    /// The edge set of the star `(root; leaves)`, if all its edges exist.
    pub fn star_edges(&self, root: QueryVertex, leaves: &[QueryVertex]) -> Option<EdgeSet> {
        let mut set = EdgeSet::default();
        for &l in leaves {
            set = set.with(self.edge_index(root, l)?);
        }
        Some(set)
    }

    /// Sub-query `set` as a standalone graph over compacted vertex labels.
    pub fn canonical_code(&self, set: EdgeSet) -> CanonicalCode {
        let verts = self.vertices(set);
        let mut local = [usize::MAX; MAX_QUERY_VERTICES];
        for (i, &v) in verts.iter().enumerate() {
            local[v] = i;
        }
        let edges: Vec<_> = set
            .iter()
            .map(|e| {
                let (u, v) = self.edges[e];
                (local[u], local[v])
            })
            .collect();
        canonical_code(verts.len(), &edges)
    }
}

impl fmt::Display for QueryGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n {}", self.n)?;
        for &(u, v) in &self.edges {
            writeln!(f, "e {u} {v}")?;
        }
        for &(a, b) in &self.orders {
            writeln!(f, "order {a} {b}")?;
        }
        Ok(())
    }
}

pub(crate) fn mask_to_vec(mask: u16) -> Vec<QueryVertex> {
    (0..16).filter(|i| mask >> i & 1 == 1).collect()
}

/// Parses a query file. The primary format is
///
/// ```text
/// n 3
/// e 0 1
/// e 1 2
/// order 0 2
/// ```
///
/// A compact `3; 0 1; 1 2; 0 2` form is also accepted. Without `order`
/// lines the symmetry-breaking orders are computed automatically.
pub fn parse_query(text: &str) -> Result<QueryGraph> {
    let has_keywords = text
        .lines()
        .any(|l| matches!(l.split_whitespace().next(), Some("n" | "e" | "order")));
    let mut n = None;
    let mut edges = Vec::new();
    let mut orders = Vec::new();
    let num = |tok: Option<&str>, line: usize| -> Result<usize> {
        tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
            line,
            message: "expected a vertex index".into(),
        })
    };
    if has_keywords {
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let mut toks = line.split_whitespace();
            match toks.next() {
                None => continue,
                Some(t) if t.starts_with('#') => continue,
                Some("n") => n = Some(num(toks.next(), line_no)?),
                Some("e") => edges.push((num(toks.next(), line_no)?, num(toks.next(), line_no)?)),
                Some("order") => {
                    orders.push((num(toks.next(), line_no)?, num(toks.next(), line_no)?))
                }
                Some(other) => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unknown directive {other:?}"),
                    })
                }
            }
        }
    } else {
        for (i, part) in text.split([';', '\n']).enumerate() {
            let mut toks = part.split_whitespace();
            let Some(first) = toks.next() else { continue };
            if n.is_none() {
                n = Some(num(Some(first), i + 1)?);
            } else {
                edges.push((num(Some(first), i + 1)?, num(toks.next(), i + 1)?));
            }
        }
    }
    let n = n.ok_or(Error::Parse {
        line: 1,
        message: "missing vertex count".into(),
    })?;
    if orders.is_empty() {
        QueryGraph::new(n, &edges)
    } else {
        QueryGraph::with_orders(n, &edges, &orders)
    }
}

pub fn load_query(path: &Path) -> Result<QueryGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_query(&text)
}

fn has_cycle(n: usize, orders: &[(usize, usize)]) -> bool {
    let closure = transitive_closure(n, orders);
    (0..n).any(|v| closure[v] >> v & 1 == 1)
}

fn transitive_closure(n: usize, orders: &[(usize, usize)]) -> Vec<u16> {
    let mut reach = vec![0u16; n];
    for &(a, b) in orders {
        reach[a] |= 1 << b;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i] >> k & 1 == 1 {
                reach[i] |= reach[k];
            }
        }
    }
    reach
}

/// All permutations `p` with `p(u) ~ p(v)` iff `u ~ v`.
fn automorphisms(n: usize, adjacency: &[u16]) -> Vec<Vec<usize>> {
    fn extend(
        depth: usize,
        n: usize,
        adj: &[u16],
        perm: &mut Vec<usize>,
        used: u16,
        out: &mut Vec<Vec<usize>>,
    ) {
        if depth == n {
            out.push(perm.clone());
            return;
        }
        for img in 0..n {
            if used >> img & 1 == 1 || adj[img].count_ones() != adj[depth].count_ones() {
                continue;
            }
            let consistent = (0..depth).all(|prev| {
                (adj[depth] >> prev & 1) == (adj[img] >> perm[prev] & 1)
            });
            if consistent {
                perm.push(img);
                extend(depth + 1, n, adj, perm, used | 1 << img, out);
                perm.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(0, n, adjacency, &mut Vec::with_capacity(n), 0, &mut out);
    out
}

/// Exact automorphism group size by permutation enumeration.
pub fn automorphism_count(n: usize, edges: &[(QueryVertex, QueryVertex)]) -> Result<u64> {
    if n > MAX_QUERY_VERTICES {
        return Err(Error::QueryTooLarge(n));
    }
    let mut adj = vec![0u16; n];
    for &(u, v) in edges {
        adj[u] |= 1 << v;
        adj[v] |= 1 << u;
    }
    Ok(automorphisms(n, &adj).len() as u64)
}

/// Orbit-stabiliser symmetry breaking: repeatedly take the smallest vertex
/// with a non-trivial orbit, order it below the rest of its orbit, and
/// restrict to its stabiliser. The result is transitively reduced.
pub fn symmetry_break_orders(q: &QueryGraph) -> Vec<(QueryVertex, QueryVertex)> {
    let mut group = automorphisms(q.n, &q.adjacency);
    let mut orders = Vec::new();
    loop {
        let pick = (0..q.n).find_map(|v| {
            let orbit: BTreeSet<usize> = group.iter().map(|g| g[v]).collect();
            (orbit.len() > 1).then_some((v, orbit))
        });
        let Some((v, orbit)) = pick else { break };
        for w in orbit {
            if w != v {
                orders.push((v, w));
            }
        }
        group.retain(|g| g[v] == v);
    }
    transitive_reduction(q.n, &orders)
}

fn transitive_reduction(n: usize, orders: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let closure = transitive_closure(n, orders);
    let mut kept: Vec<(usize, usize)> = Vec::new();
    let mut pairs: Vec<_> = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| closure[a] >> b & 1 == 1)
        .collect();
    pairs.sort();
    for (a, b) in pairs {
        let implied = (0..n).any(|c| c != a && c != b && closure[a] >> c & 1 == 1 && closure[c] >> b & 1 == 1);
        if !implied {
            kept.push((a, b));
        }
    }
    kept
}

/// Canonical code by maximising the adjacency bit string over all
/// permutations that respect the degree partition.
pub fn canonical_code(n: usize, edges: &[(usize, usize)]) -> CanonicalCode {
    let mut adj = vec![0u16; n];
    for &(u, v) in edges {
        adj[u] |= 1 << v;
        adj[v] |= 1 << u;
    }
    // Vertices sorted by descending degree; new labels are assigned class by
    // class, so only permutations within a degree class are explored.
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| std::cmp::Reverse(adj[v].count_ones()));
    let classes: Vec<Vec<usize>> = {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for &v in &by_degree {
            match out.last_mut() {
                Some(c) if adj[c[0]].count_ones() == adj[v].count_ones() => c.push(v),
                _ => out.push(vec![v]),
            }
        }
        out
    };
    let pair_bit = |i: usize, j: usize| -> u32 {
        let (a, b) = (i.min(j), i.max(j));
        // position of (a, b) in the upper triangle, row-major
        (a * (2 * n - a - 1) / 2 + (b - a - 1)) as u32
    };
    let mut best = 0u64;
    let mut label = vec![usize::MAX; n];
    fn assign(
        class_idx: usize,
        classes: &[Vec<usize>],
        next_label: usize,
        label: &mut Vec<usize>,
        used: &mut Vec<bool>,
        adj: &[u16],
        pair_bit: &dyn Fn(usize, usize) -> u32,
        best: &mut u64,
    ) {
        if class_idx == classes.len() {
            let mut bits = 0u64;
            for u in 0..adj.len() {
                for v in u + 1..adj.len() {
                    if adj[u] >> v & 1 == 1 {
                        bits |= 1 << pair_bit(label[u], label[v]);
                    }
                }
            }
            *best = (*best).max(bits);
            return;
        }
        let class = &classes[class_idx];
        let offset = next_label;
        let k = class.len();
        // enumerate permutations of the class onto labels offset..offset+k
        fn permute(
            slot: usize,
            k: usize,
            offset: usize,
            class: &[usize],
            label: &mut Vec<usize>,
            used: &mut Vec<bool>,
            cont: &mut dyn FnMut(&mut Vec<usize>),
        ) {
            if slot == k {
                cont(label);
                return;
            }
            for (i, &v) in class.iter().enumerate() {
                if !used[i] {
                    used[i] = true;
                    label[v] = offset + slot;
                    permute(slot + 1, k, offset, class, label, used, cont);
                    used[i] = false;
                }
            }
        }
        let mut local_used = vec![false; k];
        permute(0, k, offset, class, label, &mut local_used, &mut |label| {
            assign(
                class_idx + 1,
                classes,
                offset + k,
                label,
                used,
                adj,
                pair_bit,
                best,
            )
        });
    }
    let mut used = Vec::new();
    assign(0, &classes, 0, &mut label, &mut used, &adj, &pair_bit, &mut best);
    CanonicalCode {
        vertices: n as u8,
        edges: edges.len() as u8,
        bits: best,
    }
}

/// Every connected edge subgraph of `q` (not necessarily induced).
pub fn all_connected_subgraphs(q: &QueryGraph) -> Vec<EdgeSet> {
    let mut seen: HashSet<EdgeSet> = HashSet::new();
    let mut frontier: Vec<EdgeSet> = (0..q.edges.len()).map(|e| EdgeSet(1 << e)).collect();
    seen.extend(frontier.iter().copied());
    while let Some(set) = frontier.pop() {
        let verts = q.vertex_mask(set);
        for e in 0..q.edges.len() {
            if set.contains(e) {
                continue;
            }
            let (u, v) = q.edges[e];
            if verts & (1 << u | 1 << v) == 0 {
                continue;
            }
            let grown = set.with(e);
            if seen.insert(grown) {
                frontier.push(grown);
            }
        }
    }
    let mut out: Vec<_> = seen.into_iter().collect();
    out.sort_by_key(|s| (q.vertex_count(*s), s.len(), s.0));
    out
}

/// Connected sub-queries with exactly `n` vertices, with their codes.
pub fn connected_subgraphs(q: &QueryGraph, n: usize) -> Vec<(EdgeSet, CanonicalCode)> {
    all_connected_subgraphs(q)
        .into_iter()
        .filter(|&s| q.vertex_count(s) == n)
        .map(|s| (s, q.canonical_code(s)))
        .collect()
}

pub fn is_join_unit(q: &QueryGraph, set: EdgeSet) -> bool {
    !set.is_empty() && !q.star_roots(set).is_empty()
}

/// `right` is a star whose leaves all lie in `left`, for some root choice.
pub(crate) fn is_complete_star_oriented(q: &QueryGraph, left: EdgeSet, right: EdgeSet) -> bool {
    let left_verts = q.vertex_mask(left);
    q.star_roots(right).into_iter().any(|root| {
        let leaves = q.vertex_mask(right) & !(1 << root);
        leaves & !left_verts == 0
    })
}

/// Whether `(left ∪ right, left, right)` is a complete star join, checking
/// both orientations.
pub fn is_complete_star_join(q: &QueryGraph, left: EdgeSet, right: EdgeSet) -> bool {
    is_complete_star_oriented(q, left, right) || is_complete_star_oriented(q, right, left)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(name: &str) -> QueryGraph {
        QueryGraph::named(name).unwrap()
    }

    fn set(q: &QueryGraph, edges: &[(usize, usize)]) -> EdgeSet {
        edges
            .iter()
            .fold(EdgeSet::default(), |s, &(u, v)| s.with(q.edge_index(u, v).unwrap()))
    }

    #[test]
    fn parses_compact_and_keyword_formats() {
        let tri = parse_query("3; 0 1; 1 2; 0 2").unwrap();
        assert_eq!(tri.edges().len(), 3);
        let edge = parse_query("2; 0 1").unwrap();
        assert_eq!(edge.orders(), &[(0, 1)]);
        let kw = parse_query("n 3\ne 0 1\ne 1 2\norder 0 2\n").unwrap();
        assert_eq!(kw.orders(), &[(0, 2)]);
        assert!(matches!(
            parse_query("4; 0 1; 2 3"),
            Err(Error::DisconnectedQuery)
        ));
        assert!(parse_query("n 3\ne 0 x\n").is_err());
        assert!(parse_query("n 2\ne 0 1\norder 0 1\norder 1 0\n").is_err());
    }

    #[test]
    fn automorphism_counts() {
        assert_eq!(q("triangle").aut_count(), 6);
        assert_eq!(q("square").aut_count(), 8);
        assert_eq!(q("edge").aut_count(), 2);
        assert_eq!(automorphism_count(11, &[]).unwrap_err().to_string().contains("11"), true);
    }

    #[test]
    fn symmetry_orders_for_small_queries() {
        assert_eq!(q("edge").orders(), &[(0, 1)]);
        assert_eq!(q("triangle").orders(), &[(0, 1), (1, 2)]);
    }

    /// Counts order-respecting injective mappings of `q` into `K_n`.
    fn ordered_matches_in_clique(q: &QueryGraph, n: usize, orders: &[(usize, usize)]) -> usize {
        let mut count = 0;
        let k = q.n();
        let mut map = vec![0usize; k];
        fn rec(
            i: usize,
            k: usize,
            n: usize,
            map: &mut Vec<usize>,
            orders: &[(usize, usize)],
            count: &mut usize,
        ) {
            if i == k {
                if orders.iter().all(|&(a, b)| map[a] < map[b]) {
                    *count += 1;
                }
                return;
            }
            for x in 0..n {
                if !map[..i].contains(&x) {
                    map[i] = x;
                    rec(i + 1, k, n, map, orders, count);
                }
            }
        }
        rec(0, k, n, &mut map, orders, &mut count);
        count
    }

    #[test]
    fn triangle_orders_reduce_k4_mappings() {
        let tri = q("triangle");
        assert_eq!(ordered_matches_in_clique(&tri, 4, &[]), 24);
        assert_eq!(ordered_matches_in_clique(&tri, 4, tri.orders()), 4);
    }

    #[test]
    fn square_orders_leave_three_matches_in_k4() {
        let sq = q("square");
        assert_eq!(ordered_matches_in_clique(&sq, 4, &[]), 24);
        assert_eq!(ordered_matches_in_clique(&sq, 4, sq.orders()), 24 / 8);
    }

    #[test]
    fn connected_subgraphs_of_triangle() {
        let tri = q("triangle");
        let three = connected_subgraphs(&tri, 3);
        assert_eq!(three.len(), 4);
        let codes: HashSet<_> = three.iter().map(|(_, c)| *c).collect();
        assert_eq!(codes.len(), 2);
        assert_eq!(connected_subgraphs(&tri, 2).len(), 3);
    }

    /// Exhaustive oracle: every edge subset, filtered by connectivity and size.
    fn brute_connected(q: &QueryGraph, n: usize) -> usize {
        (1u64..1 << q.edges().len())
            .map(EdgeSet)
            .filter(|&s| q.is_connected(s) && q.vertex_count(s) == n)
            .count()
    }

    #[test]
    fn connected_subgraphs_of_k4_match_brute_force() {
        let k4 = q("4-clique");
        let three = connected_subgraphs(&k4, 3);
        assert_eq!(three.len(), brute_connected(&k4, 3));
        assert_eq!(three.len(), 16);
        let triangles = three.iter().filter(|(s, _)| s.len() == 3).count();
        assert_eq!(triangles, 4);
        for name in ["house", "5-path", "chordal-square", "5-clique"] {
            let g = q(name);
            for n in 2..=g.n() {
                assert_eq!(connected_subgraphs(&g, n).len(), brute_connected(&g, n), "{name} {n}");
            }
        }
    }

    #[test]
    fn full_query_among_its_subgraphs() {
        for name in ["triangle", "house", "5-path", "3-star"] {
            let g = q(name);
            assert!(connected_subgraphs(&g, g.n()).iter().any(|(s, _)| *s == g.full()));
        }
    }

    #[test]
    fn join_units() {
        assert!(is_join_unit(&q("edge"), q("edge").full()));
        assert!(!is_join_unit(&q("triangle"), q("triangle").full()));
        assert!(is_join_unit(&q("3-star"), q("3-star").full()));
        assert_eq!(q("3-star").as_star(q("3-star").full(), 0).unwrap().leaves, vec![1, 2, 3]);
    }

    #[test]
    fn complete_star_join_examples() {
        let tri = q("triangle");
        assert!(is_complete_star_join(&tri, set(&tri, &[(0, 1)]), set(&tri, &[(0, 2), (1, 2)])));
        let p = q("2-path");
        assert!(is_complete_star_join(&p, set(&p, &[(0, 1)]), set(&p, &[(1, 2)])));
        let p4 = QueryGraph::new(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        assert!(!is_complete_star_join(
            &p4,
            set(&p4, &[(0, 1), (1, 2)]),
            set(&p4, &[(2, 3), (3, 4)])
        ));
    }

    fn graphs_on(n: usize) -> Vec<Vec<(usize, usize)>> {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .collect();
        (0u64..1 << pairs.len())
            .map(|mask| {
                pairs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask >> i & 1 == 1)
                    .map(|(_, &p)| p)
                    .collect()
            })
            .collect()
    }

    fn isomorphic(n: usize, a: &[(usize, usize)], b: &[(usize, usize)]) -> bool {
        if a.len() != b.len() {
            return false;
        }
        let bs: HashSet<(usize, usize)> = b.iter().copied().collect();
        let mut perm: Vec<usize> = (0..n).collect();
        fn next_perm(p: &mut [usize]) -> bool {
            let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
                return false;
            };
            let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
            p.swap(i - 1, j);
            p[i..].reverse();
            true
        }
        loop {
            if a.iter().all(|&(u, v)| {
                let (x, y) = (perm[u], perm[v]);
                bs.contains(&(x.min(y), x.max(y)))
            }) {
                return true;
            }
            if !next_perm(&mut perm) {
                return false;
            }
        }
    }

    #[test]
    fn canonical_code_matches_isomorphism_up_to_five_vertices() {
        for n in 1..=5 {
            let graphs = graphs_on(n);
            let codes: Vec<_> = graphs.iter().map(|g| canonical_code(n, g)).collect();
            // compare each graph against a representative handful to keep runtime low
            for i in 0..graphs.len() {
                for j in (i..graphs.len()).step_by(7) {
                    assert_eq!(
                        codes[i] == codes[j],
                        isomorphic(n, &graphs[i], &graphs[j]),
                        "n={n} {:?} vs {:?}",
                        graphs[i],
                        graphs[j]
                    );
                }
            }
        }
    }

    #[test]
    fn canonical_code_class_count_on_six_vertices() {
        // There are 156 non-isomorphic simple graphs on 6 vertices.
        let codes: HashSet<_> = graphs_on(6).iter().map(|g| canonical_code(6, g)).collect();
        assert_eq!(codes.len(), 156);
    }
}
