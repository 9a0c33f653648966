//! Engine parameters.

use std::net::SocketAddr;
use std::path::PathBuf;

use serde::Serialize;

pub const DEFAULT_BATCH_SIZE: usize = 512 * 1024;
pub const DEFAULT_QUEUE_CAPACITY: usize = crate::dataflow::DEFAULT_QUEUE_CAPACITY;
pub const DEFAULT_CACHE_FRACTION: f64 = 0.3;
pub const DEFAULT_SPILL_THRESHOLD: usize = 64 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq)]
pub enum SinkMode {
    Count,
    /// One line per result. With several processes each writes its own
    /// `<path>.<machine>` file.
    File(PathBuf),
    /// Keep results in memory (tests and verification).
    Collect,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransportKind {
    /// All machines inside this process, exchanging encoded frames.
    InProcess,
    /// All machines inside this process, connected over localhost TCP.
    TcpLocal,
    /// This process is one machine of a TCP cluster; `peers[i]` is the
    /// listen address of machine `i`.
    Tcp {
        machine_id: usize,
        peers: Vec<SocketAddr>,
    },
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub machines: usize,
    pub workers: usize,
    pub batch_size: usize,
    /// Output queue capacity in results; `usize::MAX` means unbounded.
    pub queue_capacity: usize,
    /// Absolute cache capacity in neighbour entries; overrides the fraction.
    pub cache_capacity: Option<usize>,
    /// Cache capacity as a fraction of `2|E|`.
    pub cache_fraction: f64,
    /// Per-side join buffer size in bytes before spilling a sorted run.
    pub spill_threshold: usize,
    pub spill_dir: Option<PathBuf>,
    pub intra_steal: bool,
    pub inter_steal: bool,
    pub transport: TransportKind,
    pub sink: SinkMode,
    /// Partition hash seed; also seeds steal-victim selection.
    pub seed: u64,
    /// Record the sequence of scheduled operators per machine.
    pub record_trace: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            machines: 1,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get().min(4)),
            batch_size: DEFAULT_BATCH_SIZE,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            cache_capacity: None,
            cache_fraction: DEFAULT_CACHE_FRACTION,
            spill_threshold: DEFAULT_SPILL_THRESHOLD,
            spill_dir: None,
            intra_steal: true,
            inter_steal: true,
            transport: TransportKind::InProcess,
            sink: SinkMode::Count,
            seed: 0,
            record_trace: false,
        }
    }
}

impl EngineConfig {
    pub fn cache_capacity_for(&self, edge_count: usize) -> usize {
        self.cache_capacity
            .unwrap_or_else(|| (self.cache_fraction * 2.0 * edge_count as f64).round() as usize)
    }

    pub fn stealing(mut self, on: bool) -> Self {
        self.intra_steal = on;
        self.inter_steal = on;
        self
    }

    pub(crate) fn echo(&self, edge_count: usize, plan_hash: u64) -> ConfigEcho {
        ConfigEcho {
            machines: self.machines,
            workers: self.workers,
            batch_size: self.batch_size,
            queue_capacity: self.queue_capacity,
            cache_capacity: self.cache_capacity_for(edge_count),
            spill_threshold: self.spill_threshold,
            intra_steal: self.intra_steal,
            inter_steal: self.inter_steal,
            seed: self.seed,
            plan_hash: format!("{plan_hash:016x}"),
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ConfigEcho {
    pub machines: usize,
    pub workers: usize,
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub cache_capacity: usize,
    pub spill_threshold: usize,
    pub intra_steal: bool,
    pub inter_steal: bool,
    pub seed: u64,
    pub plan_hash: String,
}
