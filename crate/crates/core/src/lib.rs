//! Distributed subgraph enumeration.
//!
//! A query graph is compiled into a plan of two-way joins over star-shaped
//! join units ([`optimiser`]), each join configured with a join algorithm
//! (hash or worst-case optimal) and a communication mode (pushing or
//! pulling). The plan is translated into a dataflow of `Scan`,
//! `PullExtend`, `PushJoin` and `Sink` operators ([`dataflow`]) and executed
//! over a randomly partitioned data graph by a cluster of machine runtimes
//! ([`cluster`]). Each machine runs a DFS/BFS-adaptive scheduler with
//! bounded output queues ([`scheduler`]), a least-recent-batch-used
//! neighbour cache ([`cache`]) and two layers of work stealing.
//!
//! [`oracle`] is a plain backtracking enumerator used as ground truth.

pub mod cache;
pub mod cluster;
pub mod comm;
pub mod config;
pub mod dataflow;
pub mod error;
pub mod generators;
pub mod graphstore;
pub mod metrics;
pub mod operators;
pub mod optimiser;
pub mod oracle;
pub mod querymodel;
pub mod scheduler;

pub use cache::{CacheStats, LrbuCache};
pub use cluster::{run_query, RunOutcome};
pub use config::{EngineConfig, SinkMode, TransportKind};
pub use dataflow::{translate, Dataflow, OperatorKind, OperatorSpec};
pub use error::{Error, Result};
pub use graphstore::{Graph, GraphPartition, GraphStats, Ownership};
pub use metrics::RunMetrics;
pub use optimiser::{
    optimal_plan, CommMode, ExecutionPlan, JoinAlgorithm, PhysicalSetting, PlanStats,
};
pub use querymodel::{EdgeSet, QueryGraph};

/// Data-graph vertex identifier (dense, after relabeling).
pub type VertexId = u32;

/// Query-graph vertex index, `0..n`.
pub type QueryVertex = usize;
