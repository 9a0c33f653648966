//! Immutable CSR data graph: loading, degree relabeling, random partitioning.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::VertexId;

const BINARY_MAGIC: &[u8; 6] = b"HUGEG1";
const BINARY_VERSION: u8 = 1;

/// Simple undirected graph in CSR form. Neighbour lists are sorted and
/// free of duplicates and self-loops; adjacency is symmetric.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbours: Vec<VertexId>,
}

impl Graph {
    /// Builds a graph over `vertex_count` vertices. Duplicate edges are merged
    /// and self-loops dropped.
    pub fn from_edges<I>(vertex_count: usize, edges: I) -> Graph
    where
        I: IntoIterator<Item = (VertexId, VertexId)>,
    {
        let mut adj: Vec<Vec<VertexId>> = vec![Vec::new(); vertex_count];
        for (u, v) in edges {
            if u == v {
                continue;
            }
            assert!(
                (u as usize) < vertex_count && (v as usize) < vertex_count,
                "edge ({u}, {v}) out of range for {vertex_count} vertices"
            );
            adj[u as usize].push(v);
            adj[v as usize].push(u);
        }
        let mut offsets = Vec::with_capacity(vertex_count + 1);
        let mut neighbours = Vec::new();
        offsets.push(0);
        for mut list in adj {
            list.sort_unstable();
            list.dedup();
            neighbours.extend_from_slice(&list);
            offsets.push(neighbours.len());
        }
        Graph {
            offsets,
            neighbours,
        }
    }

    pub fn empty() -> Graph {
        Graph {
            offsets: vec![0],
            neighbours: Vec::new(),
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbours.len() / 2
    }

    #[inline]
    pub fn neighbours(&self, v: VertexId) -> &[VertexId] {
        let v = v as usize;
        &self.neighbours[self.offsets[v]..self.offsets[v + 1]]
    }

    #[inline]
    pub fn degree(&self, v: VertexId) -> usize {
        let v = v as usize;
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.vertex_count() as VertexId)
            .map(|v| self.degree(v))
            .max()
            .unwrap_or(0)
    }

    pub fn has_edge(&self, u: VertexId, v: VertexId) -> bool {
        self.neighbours(u).binary_search(&v).is_ok()
    }

    /// Every undirected edge once, as `(u, v)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (VertexId, VertexId)> + '_ {
        (0..self.vertex_count() as VertexId).flat_map(move |u| {
            self.neighbours(u)
                .iter()
                .copied()
                .filter(move |&v| u < v)
                .map(move |v| (u, v))
        })
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            vertex_count: self.vertex_count(),
            edge_count: self.edge_count(),
            max_degree: self.max_degree(),
        }
    }

    /// Writes the little-endian binary CSR cache format.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(BINARY_MAGIC)?;
        write(&[BINARY_VERSION])?;
        write(&(self.vertex_count() as u64).to_le_bytes())?;
        write(&(self.edge_count() as u64).to_le_bytes())?;
        for &o in &self.offsets {
            write(&(o as u64).to_le_bytes())?;
        }
        for &n in &self.neighbours {
            write(&n.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Graph> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode_binary(&bytes)
    }

    fn decode_binary(bytes: &[u8]) -> Result<Graph> {
        let bad = |m: &str| Error::BadBinary(m.to_string());
        if bytes.len() < 23 || &bytes[..6] != BINARY_MAGIC {
            return Err(bad("missing magic header"));
        }
        if bytes[6] != BINARY_VERSION {
            return Err(Error::BadBinary(format!("unsupported version {}", bytes[6])));
        }
        let u64_at = |at: usize| -> Result<u64> {
            bytes
                .get(at..at + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated"))
        };
        let n = u64_at(7)? as usize;
        let m = u64_at(15)? as usize;
        let mut at = 23;
        let mut offsets = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            offsets.push(u64_at(at)? as usize);
            at += 8;
        }
        let body = bytes.get(at..).ok_or_else(|| bad("truncated"))?;
        if body.len() != 2 * m * 4 || offsets.last() != Some(&(2 * m)) {
            return Err(bad("neighbour array size mismatch"));
        }
        let neighbours = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Graph {
            offsets,
            neighbours,
        })
    }
}

/// Global statistics shared by every partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct GraphStats {
    pub vertex_count: usize,
    pub edge_count: usize,
    pub max_degree: usize,
}

impl GraphStats {
    pub fn average_degree(&self) -> f64 {
        if self.vertex_count == 0 {
            0.0
        } else {
            2.0 * self.edge_count as f64 / self.vertex_count as f64
        }
    }
}

/// Reads a whitespace-separated `u v` edge list. Lines starting with `#`
/// are comments. Vertex tokens are compacted to a dense range in first-seen
/// order.
pub fn load_edge_list(path: &Path) -> Result<Graph> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(BufReader::new(file))
}

pub fn parse_edge_list<R: BufRead>(reader: R) -> Result<Graph> {
    let mut ids: HashMap<u64, VertexId> = HashMap::new();
    let mut edges = Vec::new();
    let mut dense = |raw: u64| -> VertexId {
        let next = ids.len() as VertexId;
        *ids.entry(raw).or_insert(next)
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let mut next = || -> Result<u64> {
            let tok = tokens.next().ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected two vertex ids".into(),
            })?;
            tok.parse::<u64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("not a vertex id: {tok:?}"),
            })
        };
        let (a, b) = (next()?, next()?);
        if tokens.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                message: "expected exactly two vertex ids".into(),
            });
        }
        let (u, v) = (dense(a), dense(b));
        edges.push((u, v));
    }
    Ok(Graph::from_edges(ids.len(), edges))
}

/// Relabels vertices so that lower degree means lower ID, ties broken by the
/// old ID. Returns the relabeled graph and the old→new mapping.
pub fn relabel_by_degree(g: &Graph) -> (Graph, Vec<VertexId>) {
    let n = g.vertex_count();
    let mut order: Vec<VertexId> = (0..n as VertexId).collect();
    order.sort_by_key(|&v| (g.degree(v), v));
    let mut mapping = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        mapping[old as usize] = new as VertexId;
    }
    let relabeled = Graph::from_edges(
        n,
        g.edges()
            .map(|(u, v)| (mapping[u as usize], mapping[v as usize])),
    );
    (relabeled, mapping)
}

/// Deterministic random ownership: a multiplicative hash of the vertex ID,
/// salted with the seed, reduced modulo the machine count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ownership {
    machines: usize,
    seed: u64,
}

impl Ownership {
    pub fn new(machines: usize, seed: u64) -> Result<Self> {
        if machines < 1 {
            return Err(Error::InvalidMachineCount(machines));
        }
        Ok(Ownership { machines, seed })
    }

    pub fn machines(&self) -> usize {
        self.machines
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn owner(&self, v: VertexId) -> usize {
        if self.machines == 1 {
            return 0;
        }
        let x = (v as u64 ^ self.seed.wrapping_mul(0xD1B5_4A32_D192_ED03))
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
        ((x >> 32) % self.machines as u64) as usize
    }
}

/// One machine's slice of the data graph: adjacency lists of the vertices it
/// owns, plus the global ownership function and statistics.
#[derive(Clone, Debug)]
pub struct GraphPartition {
    machine_id: usize,
    ownership: Ownership,
    stats: GraphStats,
    owned: Vec<VertexId>,
    local_index: Vec<u32>,
    offsets: Vec<usize>,
    neighbours: Vec<VertexId>,
}

const NOT_LOCAL: u32 = u32::MAX;

impl GraphPartition {
    pub fn build(g: &Graph, ownership: Ownership, machine_id: usize) -> GraphPartition {
        let mut owned = Vec::new();
        let mut local_index = vec![NOT_LOCAL; g.vertex_count()];
        let mut offsets = vec![0];
        let mut neighbours = Vec::new();
        for v in 0..g.vertex_count() as VertexId {
            if ownership.owner(v) == machine_id {
                local_index[v as usize] = owned.len() as u32;
                owned.push(v);
                neighbours.extend_from_slice(g.neighbours(v));
                offsets.push(neighbours.len());
            }
        }
        GraphPartition {
            machine_id,
            ownership,
            stats: g.stats(),
            owned,
            local_index,
            offsets,
            neighbours,
        }
    }

    pub fn machine_id(&self) -> usize {
        self.machine_id
    }

    pub fn ownership(&self) -> Ownership {
        self.ownership
    }

    pub fn stats(&self) -> GraphStats {
        self.stats
    }

    /// Locally owned vertices in ascending ID order.
    pub fn owned_vertices(&self) -> &[VertexId] {
        &self.owned
    }

    #[inline]
    pub fn is_local(&self, v: VertexId) -> bool {
        self.local_index
            .get(v as usize)
            .is_some_and(|&i| i != NOT_LOCAL)
    }

    #[inline]
    pub fn owner(&self, v: VertexId) -> usize {
        self.ownership.owner(v)
    }

    /// Adjacency of a locally owned vertex, borrowed from the partition.
    #[inline]
    pub fn neighbours(&self, v: VertexId) -> Result<&[VertexId]> {
        match self.local_index.get(v as usize) {
            Some(&i) if i != NOT_LOCAL => {
                let i = i as usize;
                Ok(&self.neighbours[self.offsets[i]..self.offsets[i + 1]])
            }
            _ => Err(Error::NotOwned {
                vertex: v,
                machine: self.machine_id,
            }),
        }
    }
}

/// Splits `g` into `k` partitions by [`Ownership`].
pub fn partition(g: &Graph, k: usize, seed: u64) -> Result<Vec<GraphPartition>> {
    let ownership = Ownership::new(k, seed)?;
    Ok((0..k)
        .map(|m| GraphPartition::build(g, ownership, m))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Graph {
        parse_edge_list(text.as_bytes()).unwrap()
    }

    fn k(n: usize) -> Graph {
        let mut e = Vec::new();
        for u in 0..n as u32 {
            for v in u + 1..n as u32 {
                e.push((u, v));
            }
        }
        Graph::from_edges(n, e)
    }

    #[test]
    fn loads_triangle() {
        let g = parse("0 1\n1 2\n0 2");
        assert_eq!(g.vertex_count(), 3);
        assert_eq!(g.edge_count(), 3);
    }

    #[test]
    fn merges_duplicates_and_drops_self_loops() {
        let g = parse("0 1\n1 0\n2 2");
        assert_eq!(g.vertex_count(), 3);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.neighbours(0), &[1]);
        assert!(g.neighbours(2).is_empty());
    }

    #[test]
    fn empty_file_gives_empty_graph() {
        let g = parse("");
        assert_eq!(g.vertex_count(), 0);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn comments_and_first_seen_compaction() {
        let g = parse("# header\n100 7\n7 42\n");
        // 100 -> 0, 7 -> 1, 42 -> 2
        assert_eq!(g.neighbours(1), &[0, 2]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_edge_list("0 1\n1 x\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(
            parse_edge_list("0\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_edge_list(Path::new("/nonexistent/graph.txt")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn relabel_star_hub_gets_largest_id() {
        let star = Graph::from_edges(4, [(0, 1), (0, 2), (0, 3)]);
        let (_, map) = relabel_by_degree(&star);
        assert_eq!(map[0], 3);
    }

    #[test]
    fn relabel_regular_graph_is_identity() {
        let (g, map) = relabel_by_degree(&k(4));
        assert_eq!(map, vec![0, 1, 2, 3]);
        assert_eq!(g, k(4));
    }

    #[test]
    fn relabel_path_middle_gets_top_id() {
        let path = Graph::from_edges(3, [(0, 1), (1, 2)]);
        let (_, map) = relabel_by_degree(&path);
        assert_eq!(map[1], 2);
        let mut ends = vec![map[0], map[2]];
        ends.sort();
        assert_eq!(ends, vec![0, 1]);
    }

    #[test]
    fn single_machine_owns_everything() {
        let g = k(3);
        let parts = partition(&g, 1, 0).unwrap();
        assert_eq!(parts[0].owned_vertices(), &[0, 1, 2]);
        assert_eq!(parts[0].neighbours(0).unwrap(), &[1, 2]);
    }

    #[test]
    fn isolated_vertex_has_no_neighbours() {
        let g = parse("0 1\n2 2");
        let p = &partition(&g, 1, 0).unwrap()[0];
        assert!(p.neighbours(2).unwrap().is_empty());
    }

    #[test]
    fn remote_vertex_is_ownership_error() {
        let g = k(16);
        let parts = partition(&g, 2, 0).unwrap();
        let remote = (0..16u32).find(|&v| parts[0].owner(v) == 1).unwrap();
        assert!(matches!(
            parts[0].neighbours(remote),
            Err(Error::NotOwned { vertex, machine: 0 }) if vertex == remote
        ));
    }

    #[test]
    fn zero_machines_rejected() {
        assert!(matches!(
            partition(&k(3), 0, 0),
            Err(Error::InvalidMachineCount(0))
        ));
    }

    #[test]
    fn ownership_is_deterministic_and_disjoint() {
        let g = k(4);
        let a = partition(&g, 4, 9).unwrap();
        let b = partition(&g, 4, 9).unwrap();
        let mut all = Vec::new();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.owned_vertices(), pb.owned_vertices());
            all.extend_from_slice(pa.owned_vertices());
        }
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn binary_round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        let g = parse("0 1\n1 2\n2 3\n3 0\n0 2\n");
        g.write_binary(&path).unwrap();
        assert_eq!(Graph::read_binary(&path).unwrap(), g);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"HUGEG1");
        assert_eq!(bytes[6], 1);
        std::fs::write(&path, b"NOTAGRAPH-------------------").unwrap();
        assert!(matches!(Graph::read_binary(&path), Err(Error::BadBinary(_))));
    }

    fn arb_graph() -> impl Strategy<Value = Graph> {
        (1usize..40).prop_flat_map(|n| {
            prop::collection::vec((0..n as u32, 0..n as u32), 0..120)
                .prop_map(move |edges| Graph::from_edges(n, edges))
        })
    }

    proptest! {
        #[test]
        fn csr_invariants(g in arb_graph()) {
            let mut total = 0;
            let mut max = 0;
            for v in 0..g.vertex_count() as u32 {
                let nb = g.neighbours(v);
                prop_assert!(nb.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(!nb.contains(&v));
                for &u in nb {
                    prop_assert!(g.has_edge(u, v));
                }
                total += nb.len();
                max = max.max(nb.len());
            }
            prop_assert_eq!(total, 2 * g.edge_count());
            prop_assert_eq!(max, g.max_degree());
        }

        #[test]
        fn relabel_is_idempotent_and_degree_ordered(g in arb_graph()) {
            let (once, map) = relabel_by_degree(&g);
            let (twice, map2) = relabel_by_degree(&once);
            prop_assert_eq!(&once, &twice);
            prop_assert!(map2.iter().enumerate().all(|(i, &m)| i as u32 == m));
            let mut seen = map.clone();
            seen.sort();
            prop_assert!(seen.iter().enumerate().all(|(i, &m)| i as u32 == m));
            for u in 0..once.vertex_count() as u32 {
                for v in 0..once.vertex_count() as u32 {
                    if once.degree(u) < once.degree(v) {
                        prop_assert!(u < v);
                    }
                }
            }
        }

        #[test]
        fn partitions_reconstruct_graph(g in arb_graph(), k in 1usize..5, seed in 0u64..100) {
            let parts = partition(&g, k, seed).unwrap();
            let mut edges = Vec::new();
            let mut owned = 0;
            for p in &parts {
                prop_assert_eq!(p.stats(), g.stats());
                owned += p.owned_vertices().len();
                for &v in p.owned_vertices() {
                    for &u in p.neighbours(v).unwrap() {
                        edges.push((v, u));
                    }
                }
            }
            prop_assert_eq!(owned, g.vertex_count());
            let rebuilt = Graph::from_edges(g.vertex_count(), edges);
            prop_assert_eq!(rebuilt, g);
        }
    }
}
