//! Translation of an execution plan into an operator DAG, split into
//! subplans at push-join barriers.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::optimiser::{unit_star, CommMode, ExecutionPlan, JoinAlgorithm, JoinStep};
use crate::querymodel::{EdgeSet, QueryGraph};
use crate::QueryVertex;

pub const DEFAULT_QUEUE_CAPACITY: usize = 50_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OperatorKind {
    /// Emits `(f(root), f(leaf))` for every locally owned `f(root)`.
    Scan { root: QueryVertex, leaf: QueryVertex },
    /// Intersects the neighbour lists at positions `ext`. With `verify` set,
    /// keeps the input iff the vertex at that position is a candidate;
    /// otherwise appends each candidate as `target`.
    PullExtend {
        ext: Vec<usize>,
        target: QueryVertex,
        verify: Option<usize>,
    },
    /// Joins two shuffled inputs on equal key positions.
    PushJoin {
        left_key: Vec<usize>,
        right_key: Vec<usize>,
        /// Right positions appended after the left result.
        right_rest: Vec<usize>,
    },
    /// Emits results projected to query-vertex order.
    Sink { projection: Vec<usize> },
}

impl OperatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::Scan { .. } => "SCAN",
            OperatorKind::PullExtend { verify: None, .. } => "PULL-EXTEND",
            OperatorKind::PullExtend { .. } => "PULL-EXTEND(verify)",
            OperatorKind::PushJoin { .. } => "PUSH-JOIN",
            OperatorKind::Sink { .. } => "SINK",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperatorSpec {
    pub id: usize,
    pub kind: OperatorKind,
    /// Upstream operators; two only for push joins (left, right).
    pub inputs: Vec<usize>,
    pub output_schema: Vec<QueryVertex>,
    /// `(a, b)` positions in the output schema with `f[a] < f[b]` required.
    pub filters: Vec<(usize, usize)>,
    pub queue_capacity: usize,
    pub subplan: usize,
}

/// A chain of operators between barriers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subplan {
    pub operators: Vec<usize>,
    /// Subplans that must complete on all machines first.
    pub depends_on: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataflow {
    pub query: QueryGraph,
    pub operators: Vec<OperatorSpec>,
    pub subplans: Vec<Subplan>,
}

/// Positions of each leaf within `schema`.
pub fn get_ext(schema: &[QueryVertex], leaves: &[QueryVertex]) -> Result<Vec<usize>> {
    leaves
        .iter()
        .map(|l| {
            schema
                .iter()
                .position(|v| v == l)
                .ok_or_else(|| Error::InvalidPlan(format!("leaf {l} not in schema {schema:?}")))
        })
        .collect()
}

struct Builder<'a> {
    plan: &'a ExecutionPlan,
    ops: Vec<OperatorSpec>,
    subplans: Vec<Subplan>,
}

impl<'a> Builder<'a> {
    fn q(&self) -> &QueryGraph {
        &self.plan.query
    }

    fn new_subplan(&mut self) -> usize {
        self.subplans.push(Subplan {
            operators: Vec::new(),
            depends_on: Vec::new(),
        });
        self.subplans.len() - 1
    }

    fn push(&mut self, sp: usize, kind: OperatorKind, inputs: Vec<usize>, schema: Vec<usize>) -> usize {
        let id = self.ops.len();
        let mut filters = Vec::new();
        for &(a, b) in self.q().orders() {
            let (Some(pa), Some(pb)) = (
                schema.iter().position(|&v| v == a),
                schema.iter().position(|&v| v == b),
            ) else {
                continue;
            };
            // Constraints already held by one input were checked upstream.
            let held_by_one_input = inputs.iter().any(|&i| {
                let s = &self.ops[i].output_schema;
                s.contains(&a) && s.contains(&b)
            });
            if !held_by_one_input {
                filters.push((pa, pb));
            }
        }
        self.ops.push(OperatorSpec {
            id,
            kind,
            inputs,
            output_schema: schema,
            filters,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            subplan: sp,
        });
        self.subplans[sp].operators.push(id);
        id
    }

    fn extend(&mut self, sp: usize, prev: usize, ext: Vec<usize>, target: QueryVertex, verify: Option<usize>) -> usize {
        let mut schema = self.ops[prev].output_schema.clone();
        if verify.is_none() {
            schema.push(target);
        }
        self.push(sp, OperatorKind::PullExtend { ext, target, verify }, vec![prev], schema)
    }

    /// Scan of a star: one edge scan, then one extend from the root per
    /// remaining leaf.
    fn scan_star(&mut self, sp: usize, set: EdgeSet) -> usize {
        let star = unit_star(self.q(), set);
        let first = star.leaves[0];
        let mut last = self.push(
            sp,
            OperatorKind::Scan {
                root: star.root,
                leaf: first,
            },
            Vec::new(),
            vec![star.root, first],
        );
        for &leaf in &star.leaves[1..] {
            last = self.extend(sp, last, vec![0], leaf, None);
        }
        last
    }

    fn build(&mut self, set: EdgeSet, sp: usize) -> Result<usize> {
        let Some(join) = self.plan.producer(set).cloned() else {
            return Ok(self.scan_star(sp, set));
        };
        match (join.setting.algorithm, join.setting.comm) {
            (JoinAlgorithm::Wco, CommMode::Pulling) => {
                let prev = self.build(join.left, sp)?;
                let (root, leaves) = self.right_star(&join)?;
                let schema = self.ops[prev].output_schema.clone();
                let ext = get_ext(&schema, &leaves)?;
                let verify = schema.iter().position(|&v| v == root);
                Ok(self.extend(sp, prev, ext, root, verify))
            }
            (JoinAlgorithm::Hash, CommMode::Pulling) => {
                let prev = self.build(join.left, sp)?;
                Ok(self.pull_hash_join(sp, prev, &join)?)
            }
            (JoinAlgorithm::Hash, CommMode::Pushing) => {
                if !self.subplans[sp].operators.is_empty() {
                    return Err(Error::InvalidPlan(
                        "pushing join output must start its own subplan".into(),
                    ));
                }
                let lsp = self.new_subplan();
                let left = self.build(join.left, lsp)?;
                let rsp = self.new_subplan();
                let right = self.build(join.right, rsp)?;
                self.subplans[sp].depends_on = vec![lsp, rsp];
                let ls = self.ops[left].output_schema.clone();
                let rs = self.ops[right].output_schema.clone();
                let key: Vec<QueryVertex> = {
                    let mut k: Vec<_> = ls.iter().copied().filter(|v| rs.contains(v)).collect();
                    k.sort_unstable();
                    k
                };
                let left_key = get_ext(&ls, &key)?;
                let right_key = get_ext(&rs, &key)?;
                let right_rest: Vec<usize> = (0..rs.len()).filter(|p| !right_key.contains(p)).collect();
                let mut schema = ls;
                schema.extend(right_rest.iter().map(|&p| rs[p]));
                Ok(self.push(
                    sp,
                    OperatorKind::PushJoin {
                        left_key,
                        right_key,
                        right_rest,
                    },
                    vec![left, right],
                    schema,
                ))
            }
            (JoinAlgorithm::Wco, CommMode::Pushing) => {
                Err(Error::InvalidPlan("wco joins require pulling".into()))
            }
        }
    }

    fn right_star(&self, join: &JoinStep) -> Result<(QueryVertex, Vec<QueryVertex>)> {
        let root = join
            .right_root
            .ok_or_else(|| Error::InvalidPlan("pulling join without a star root".into()))?;
        let star = self
            .q()
            .as_star(join.right, root)
            .ok_or_else(|| Error::InvalidPlan("pulling join right side is not a star".into()))?;
        Ok((root, star.leaves))
    }

    /// Replaces a pulling hash join: verify the leaves already matched, then
    /// grow the new leaves from the root.
    fn pull_hash_join(&mut self, sp: usize, prev: usize, join: &JoinStep) -> Result<usize> {
        let (root, leaves) = self.right_star(join)?;
        let schema = self.ops[prev].output_schema.clone();
        let root_pos = schema
            .iter()
            .position(|&v| v == root)
            .ok_or_else(|| Error::InvalidPlan("pulling hash join root not matched".into()))?;
        let (v1, v2): (Vec<_>, Vec<_>) = leaves.into_iter().partition(|l| schema.contains(l));
        let mut last = prev;
        if !v1.is_empty() {
            let ext = get_ext(&schema, &v1)?;
            last = self.extend(sp, last, ext, root, Some(root_pos));
        }
        for v in v2 {
            last = self.extend(sp, last, vec![root_pos], v, None);
        }
        Ok(last)
    }
}

/// Builds the operator DAG for `plan`.
pub fn translate(plan: &ExecutionPlan) -> Result<Dataflow> {
    let mut b = Builder {
        plan,
        ops: Vec::new(),
        subplans: Vec::new(),
    };
    let top = b.new_subplan();
    let last = b.build(plan.query.full(), top)?;
    let schema = b.ops[last].output_schema.clone();
    let projection = get_ext(&schema, &(0..plan.query.n()).collect::<Vec<_>>())?;
    b.push(
        top,
        OperatorKind::Sink { projection },
        vec![last],
        (0..plan.query.n()).collect(),
    );
    let df = Dataflow {
        query: plan.query.clone(),
        operators: b.ops,
        subplans: b.subplans,
    };
    df.validate()?;
    Ok(df)
}

impl Dataflow {
    pub fn with_queue_capacity(mut self, capacity: usize) -> Dataflow {
        for op in &mut self.operators {
            op.queue_capacity = capacity;
        }
        self
    }

    /// Subplans in an order where every dependency precedes its dependent.
    pub fn order_subplans(&self) -> Vec<usize> {
        fn visit(df: &Dataflow, sp: usize, seen: &mut Vec<bool>, out: &mut Vec<usize>) {
            if seen[sp] {
                return;
            }
            seen[sp] = true;
            for &d in &df.subplans[sp].depends_on {
                visit(df, d, seen, out);
            }
            out.push(sp);
        }
        let mut seen = vec![false; self.subplans.len()];
        let mut out = Vec::new();
        for sp in 0..self.subplans.len() {
            visit(self, sp, &mut seen, &mut out);
        }
        out
    }

    /// The operator consuming `op`'s output.
    pub fn successor(&self, op: usize) -> Option<usize> {
        self.operators.iter().find(|o| o.inputs.contains(&op)).map(|o| o.id)
    }

    pub fn sink(&self) -> usize {
        self.operators.len() - 1
    }

    /// Removes all ordering filters; only used to build negative controls.
    pub fn drop_order_filters(&mut self) {
        for op in &mut self.operators {
            op.filters.clear();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(m));
        for sp in &self.subplans {
            let Some(&first) = sp.operators.first() else {
                return bad("empty subplan".into());
            };
            match self.operators[first].kind {
                OperatorKind::Scan { .. } | OperatorKind::PushJoin { .. } => {}
                _ => return bad("subplan must begin with a scan or a join".into()),
            }
        }
        for op in &self.operators {
            for &i in &op.inputs {
                if i >= op.id {
                    return bad(format!("operator {} reads a later operator", op.id));
                }
            }
            let input_schema = |i: usize| &self.operators[op.inputs[i]].output_schema;
            let ok = match &op.kind {
                OperatorKind::Scan { root, leaf } => {
                    op.inputs.is_empty()
                        && self.query.adjacent(*root, *leaf)
                        && op.output_schema == [*root, *leaf]
                }
                OperatorKind::PullExtend { ext, target, verify } => {
                    let s = input_schema(0);
                    let mut expect = s.clone();
                    if verify.is_none() {
                        expect.push(*target);
                    }
                    op.inputs.len() == 1
                        && !ext.is_empty()
                        && ext.iter().all(|&p| p < s.len() && self.query.adjacent(s[p], *target))
                        && verify.map_or(!s.contains(target), |h| s.get(h) == Some(target))
                        && op.output_schema == expect
                }
                OperatorKind::PushJoin {
                    left_key,
                    right_key,
                    right_rest,
                } => {
                    let (l, r) = (input_schema(0), input_schema(1));
                    let mut expect = l.clone();
                    expect.extend(right_rest.iter().map(|&p| r[p]));
                    op.inputs.len() == 2
                        && !left_key.is_empty()
                        && left_key.len() == right_key.len()
                        && left_key.iter().zip(right_key).all(|(&a, &b)| l[a] == r[b])
                        && op.output_schema == expect
                }
                OperatorKind::Sink { projection } => {
                    let s = input_schema(0);
                    op.id == self.operators.len() - 1
                        && projection.iter().enumerate().all(|(v, &p)| s.get(p) == Some(&v))
                        && op.output_schema == (0..self.query.n()).collect::<Vec<_>>()
                }
            };
            if !ok {
                return bad(format!("operator {} ({}) is malformed", op.id, op.kind.name()));
            }
        }
        if !matches!(self.operators.last().map(|o| &o.kind), Some(OperatorKind::Sink { .. })) {
            return bad("dataflow must end with a sink".into());
        }
        Ok(())
    }

    /// Graphviz rendering with operator kind and schema per node.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph dataflow {\n  rankdir=LR;\n");
        for op in &self.operators {
            let detail = match &op.kind {
                OperatorKind::Scan { root, leaf } => format!("edge ({root},{leaf})"),
                OperatorKind::PullExtend { ext, target, verify } => match verify {
                    Some(h) => format!("Ext={ext:?} verify @{h}"),
                    None => format!("Ext={ext:?} -> v{target}"),
                },
                OperatorKind::PushJoin { left_key, .. } => format!("key={left_key:?}"),
                OperatorKind::Sink { .. } => String::new(),
            };
            let _ = writeln!(
                out,
                "  op{} [shape=box,label=\"{}: {} {}\\nschema {:?}\\nsubplan {}\"];",
                op.id,
                op.id,
                op.kind.name(),
                detail,
                op.output_schema,
                op.subplan
            );
            for &i in &op.inputs {
                let _ = writeln!(out, "  op{i} -> op{};", op.id);
            }
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimiser::{optimal_plan, parse_logical_plan, PlanStats};

    fn lj() -> PlanStats {
        PlanStats {
            vertices: 4_847_571,
            edges: 43_369_619,
            max_degree: 0,
            machines: 10,
        }
    }

    fn flow(name: &str) -> Dataflow {
        let q = QueryGraph::named(name).unwrap();
        translate(&optimal_plan(&q, &lj()).unwrap()).unwrap()
    }

    fn kinds(df: &Dataflow) -> Vec<&'static str> {
        df.operators.iter().map(|o| o.kind.name()).collect()
    }

    #[test]
    fn get_ext_positions() {
        assert_eq!(get_ext(&[0, 1], &[0, 1]).unwrap(), vec![0, 1]);
        assert_eq!(get_ext(&[0, 1, 2], &[1]).unwrap(), vec![1]);
        assert_eq!(get_ext(&[2, 0], &[0, 2]).unwrap(), vec![1, 0]);
        assert!(get_ext(&[0, 1], &[3]).is_err());
    }

    #[test]
    fn triangle_dataflow() {
        let df = flow("triangle");
        assert_eq!(kinds(&df), ["SCAN", "PULL-EXTEND", "SINK"]);
        assert_eq!(
            df.operators[1].kind,
            OperatorKind::PullExtend {
                ext: vec![0, 1],
                target: 2,
                verify: None
            }
        );
        assert_eq!(df.operators[0].filters, vec![(0, 1)]);
        assert_eq!(df.operators[1].filters, vec![(1, 2)]);
        assert_eq!(df.subplans.len(), 1);
    }

    #[test]
    fn four_clique_dataflow() {
        let q = QueryGraph::named("4-clique").unwrap();
        let stats = PlanStats {
            vertices: 60,
            edges: 210,
            max_degree: 0,
            machines: 10,
        };
        let df = translate(&optimal_plan(&q, &stats).unwrap()).unwrap();
        assert_eq!(kinds(&df), ["SCAN", "PULL-EXTEND", "PULL-EXTEND", "SINK"]);
        let exts: Vec<_> = df.operators[1..3]
            .iter()
            .map(|o| match &o.kind {
                OperatorKind::PullExtend { ext, .. } => ext.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(exts, vec![vec![0, 1], vec![0, 1, 2]]);
    }

    #[test]
    fn five_path_dataflow_has_one_barrier() {
        let df = flow("5-path");
        let joins = df
            .operators
            .iter()
            .filter(|o| matches!(o.kind, OperatorKind::PushJoin { .. }))
            .count();
        assert_eq!(joins, 1);
        assert_eq!(df.subplans.len(), 3);
        assert_eq!(df.order_subplans(), vec![1, 2, 0]);
        assert_eq!(df.subplans[0].depends_on, vec![1, 2]);
        let tail = &df.subplans[0].operators;
        assert!(matches!(df.operators[tail[0]].kind, OperatorKind::PushJoin { .. }));
        assert!(matches!(df.operators[*tail.last().unwrap()].kind, OperatorKind::Sink { .. }));
    }

    #[test]
    fn scan_star_rewrite() {
        let df = flow("3-star");
        assert_eq!(kinds(&df), ["SCAN", "PULL-EXTEND", "PULL-EXTEND", "SINK"]);
        for op in &df.operators[1..3] {
            assert!(matches!(&op.kind, OperatorKind::PullExtend { ext, verify: None, .. } if ext == &[0]));
        }
        let q = QueryGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let plan = parse_logical_plan(
            r#"{"query_vertices":[0,1,2],"leaf_star":{"root":1,"leaves":[0,2]}}"#,
            &q,
            &lj(),
        )
        .unwrap();
        let df = translate(&plan).unwrap();
        assert_eq!(df.operators[0].output_schema, vec![1, 0]);
        assert_eq!(
            df.operators[1].kind,
            OperatorKind::PullExtend {
                ext: vec![0],
                target: 2,
                verify: None
            }
        );
    }

    #[test]
    fn verification_then_plain_extend() {
        let q = QueryGraph::named("house").unwrap();
        // path 4-1-2-3 (via 1) plus square closure, then star(0; {1, 3, 4})
        let json = r#"{"query_vertices":[0,1,2,3,4],"algorithm":"hash","comm":"pulling","children":[
            {"query_vertices":[1,2,3,4],"children":[
                {"query_vertices":[1,2,4],"leaf_star":{"root":1,"leaves":[2,4]}},
                {"query_vertices":[2,3],"leaf_star":{"root":2,"leaves":[3]}}]},
            {"query_vertices":[0,1,3,4],"leaf_star":{"root":0,"leaves":[1,3,4]}}]}"#;
        // Root 0 is not matched on the left, so hash pulling is not applicable.
        assert!(parse_logical_plan(json, &q, &lj()).is_err());
        // ((path 0-1-2-3) + star(0; {3, 4})) + edge(1, 4): 3 is matched, 4 is new
        let json = r#"{"query_vertices":[0,1,2,3,4],"children":[
            {"query_vertices":[0,1,2,3,4],"algorithm":"hash","comm":"pulling","children":[
                {"query_vertices":[0,1,2,3],"children":[
                    {"query_vertices":[0,1,2],"leaf_star":{"root":1,"leaves":[0,2]}},
                    {"query_vertices":[2,3],"leaf_star":{"root":2,"leaves":[3]}}]},
                {"query_vertices":[0,3,4],"leaf_star":{"root":0,"leaves":[3,4]}}]},
            {"query_vertices":[1,4],"leaf_star":{"root":1,"leaves":[4]}}]}"#;
        let plan = parse_logical_plan(json, &q, &lj()).unwrap();
        assert_eq!(
            plan.joins
                .iter()
                .filter(|j| j.setting.algorithm == JoinAlgorithm::Hash)
                .count(),
            1
        );
        let df = translate(&plan).unwrap();
        let ops = &df.operators;
        let v = ops
            .iter()
            .position(|o| matches!(&o.kind, OperatorKind::PullExtend { verify: Some(_), target: 0, .. }))
            .unwrap();
        assert!(matches!(&ops[v].kind, OperatorKind::PullExtend { ext, .. } if ext.len() == 1));
        assert_eq!(ops[v].output_schema.len(), 4);
        assert!(matches!(&ops[v + 1].kind, OperatorKind::PullExtend { verify: None, target: 4, ext, .. } if ext.len() == 1));
        assert_eq!(ops[v + 1].output_schema.len(), 5);
        assert!(!df
            .operators
            .iter()
            .any(|o| matches!(o.kind, OperatorKind::PushJoin { .. })));
    }

    #[test]
    fn empty_v1_gives_only_plain_extends() {
        let q = QueryGraph::new(6, &[(0, 1), (1, 2), (2, 3), (1, 4), (1, 5)]).unwrap();
        let json = r#"{"query_vertices":[0,1,2,3,4,5],"children":[
            {"query_vertices":[0,1,2,3],"children":[
                {"query_vertices":[0,1,2],"leaf_star":{"root":1,"leaves":[0,2]}},
                {"query_vertices":[2,3],"leaf_star":{"root":2,"leaves":[3]}}]},
            {"query_vertices":[1,4,5],"leaf_star":{"root":1,"leaves":[4,5]}}]}"#;
        let df = translate(&parse_logical_plan(json, &q, &lj()).unwrap()).unwrap();
        let ops = &df.operators;
        let n = ops.len();
        for op in &ops[n - 3..n - 1] {
            assert!(matches!(&op.kind, OperatorKind::PullExtend { verify: None, ext, .. } if ext.len() == 1));
        }
        assert_eq!(ops[n - 2].output_schema.len(), 6);
    }

    #[test]
    fn rewrites_leave_no_star_scans_or_pull_hash_joins() {
        for name in [
            "edge", "2-path", "triangle", "square", "4-clique", "house", "5-path", "5-clique",
            "chordal-square", "3-star",
        ] {
            let df = flow(name);
            for op in &df.operators {
                if let OperatorKind::Scan { root, leaf } = op.kind {
                    assert!(df.query.adjacent(root, leaf));
                    assert_eq!(op.output_schema.len(), 2);
                }
            }
            let sink = &df.operators[df.sink()];
            assert_eq!(sink.output_schema, (0..df.query.n()).collect::<Vec<_>>());
            // every order constraint is checked exactly once
            let total: usize = df.operators.iter().map(|o| o.filters.len()).sum();
            assert_eq!(total, df.query.orders().len(), "{name}");
        }
    }

    #[test]
    fn dot_dump_mentions_every_operator() {
        let df = flow("5-path");
        let dot = df.to_dot();
        for op in &df.operators {
            assert!(dot.contains(&format!("op{} [", op.id)));
        }
    }
}
