//! Run measurements: per-machine atomic counters and the aggregated JSON
//! report.

use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cache::CacheStats;
use crate::config::ConfigEcho;

/// Counters shared by a machine's scheduler, dispatcher and workers.
#[derive(Debug, Default)]
pub struct MachineCounters {
    pub bytes_sent: AtomicU64,
    pub rpc_bytes: AtomicU64,
    pub push_bytes: AtomicU64,
    pub get_nbrs_messages: AtomicU64,
    pub get_nbrs_requested: AtomicU64,
    pub remote_touched: AtomicU64,
    pub max_get_nbrs_per_target: AtomicU64,
    pub extend_batches: AtomicU64,
    pub cache_releases: AtomicU64,
    pub comm_nanos: AtomicU64,
    pub processed_results: AtomicU64,
    pub intra_steals: AtomicU64,
    pub steal_requests: AtomicU64,
    pub stolen_batches: AtomicU64,
    pub stolen_results: AtomicU64,
    pub served_batches: AtomicU64,
    pub spilled_runs: AtomicU64,
}

impl MachineCounters {
    pub fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Relaxed);
    }

    pub fn max(counter: &AtomicU64, n: u64) {
        counter.fetch_max(n, Relaxed);
    }

    pub fn blocked(&self, d: Duration) {
        self.comm_nanos.fetch_add(d.as_nanos() as u64, Relaxed);
    }

    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Relaxed)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StealStats {
    pub intra_steals: u64,
    pub steal_requests: u64,
    pub stolen_batches: u64,
    pub stolen_results: u64,
    pub served_batches: u64,
}

impl StealStats {
    fn merge(self, o: StealStats) -> StealStats {
        StealStats {
            intra_steals: self.intra_steals + o.intra_steals,
            steal_requests: self.steal_requests + o.steal_requests,
            stolen_batches: self.stolen_batches + o.stolen_batches,
            stolen_results: self.stolen_results + o.stolen_results,
            served_batches: self.served_batches + o.served_batches,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MachineMetrics {
    pub machine_id: usize,
    pub total_s: f64,
    pub compute_s: f64,
    pub comm_s: f64,
    pub bytes_sent: u64,
    pub rpc_bytes: u64,
    pub push_bytes: u64,
    pub get_nbrs_messages: u64,
    /// Vertices requested over GetNbrs, summed over extend batches.
    pub get_nbrs_requested: u64,
    /// Distinct remote vertices referenced, summed over extend batches.
    pub remote_vertices_touched: u64,
    /// Largest number of GetNbrs messages sent to one machine for one batch.
    pub max_get_nbrs_per_batch_target: u64,
    pub extend_batches: u64,
    pub cache_releases: u64,
    /// Input results consumed plus results scanned.
    pub processed_results: u64,
    pub result_count: u64,
    pub peak_intermediate_results: u64,
    /// Peak occupancy of each operator's output queue, by operator id.
    pub max_operator_occupancy: Vec<u64>,
    pub occupancy_bound: u64,
    pub occupancy_violations: u64,
    pub peak_rss_estimate: u64,
    pub cache: CacheStats,
    pub steals: StealStats,
    /// Results handled by each intersect worker.
    pub worker_processed: Vec<u64>,
    pub spilled_runs: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<usize>,
}

impl MachineMetrics {
    pub(crate) fn fill_counters(&mut self, c: &MachineCounters) {
        let g = MachineCounters::get;
        self.bytes_sent = g(&c.bytes_sent);
        self.rpc_bytes = g(&c.rpc_bytes);
        self.push_bytes = g(&c.push_bytes);
        self.get_nbrs_messages = g(&c.get_nbrs_messages);
        self.get_nbrs_requested = g(&c.get_nbrs_requested);
        self.remote_vertices_touched = g(&c.remote_touched);
        self.max_get_nbrs_per_batch_target = g(&c.max_get_nbrs_per_target);
        self.extend_batches = g(&c.extend_batches);
        self.cache_releases = g(&c.cache_releases);
        self.processed_results = g(&c.processed_results);
        self.spilled_runs = g(&c.spilled_runs);
        self.steals = StealStats {
            intra_steals: g(&c.intra_steals),
            steal_requests: g(&c.steal_requests),
            stolen_batches: g(&c.stolen_batches),
            stolen_results: g(&c.stolen_results),
            served_batches: g(&c.served_batches),
        };
        self.comm_s = (g(&c.comm_nanos) as f64 / 1e9).min(self.total_s);
        self.compute_s = self.total_s - self.comm_s;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub total_s: f64,
    pub compute_s: f64,
    pub comm_s: f64,
    pub bytes_sent: u64,
    pub rpc_bytes: u64,
    pub push_bytes: u64,
    pub get_nbrs_messages: u64,
    pub peak_intermediate_results: u64,
    pub peak_rss_estimate: u64,
    pub result_count: u64,
    pub occupancy_violations: u64,
    pub cache: CacheStats,
    pub steals: StealStats,
    pub config: ConfigEcho,
    pub per_machine: Vec<MachineMetrics>,
}

impl RunMetrics {
    /// Sums traffic and counts; times and peaks take the maximum.
    pub fn aggregate(per_machine: Vec<MachineMetrics>, config: ConfigEcho) -> RunMetrics {
        let max_f = |f: fn(&MachineMetrics) -> f64| per_machine.iter().map(f).fold(0.0, f64::max);
        let sum = |f: fn(&MachineMetrics) -> u64| per_machine.iter().map(f).sum::<u64>();
        let max = |f: fn(&MachineMetrics) -> u64| per_machine.iter().map(f).max().unwrap_or(0);
        let total_s = max_f(|m| m.total_s);
        let comm_s = max_f(|m| m.comm_s).min(total_s);
        let cache = per_machine.iter().fold(CacheStats::default(), |a, m| CacheStats {
            hits: a.hits + m.cache.hits,
            misses: a.misses + m.cache.misses,
            evictions: a.evictions + m.cache.evictions,
            occupancy: a.occupancy.max(m.cache.occupancy),
            resident_vertices: a.resident_vertices.max(m.cache.resident_vertices),
        });
        let steals = per_machine
            .iter()
            .fold(StealStats::default(), |a, m| a.merge(m.steals));
        RunMetrics {
            total_s,
            compute_s: total_s - comm_s,
            comm_s,
            bytes_sent: sum(|m| m.bytes_sent),
            rpc_bytes: sum(|m| m.rpc_bytes),
            push_bytes: sum(|m| m.push_bytes),
            get_nbrs_messages: sum(|m| m.get_nbrs_messages),
            peak_intermediate_results: max(|m| m.peak_intermediate_results),
            peak_rss_estimate: max(|m| m.peak_rss_estimate),
            result_count: sum(|m| m.result_count),
            occupancy_violations: sum(|m| m.occupancy_violations),
            cache,
            steals,
            config,
            per_machine,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("metrics serialise")
    }

    /// Relative standard deviation of per-machine processed results.
    pub fn processed_rsd(&self) -> f64 {
        relative_std_dev(
            &self
                .per_machine
                .iter()
                .map(|m| m.processed_results as f64)
                .collect::<Vec<_>>(),
        )
    }
}

/// Population standard deviation over the mean; 0 for an all-zero sample.
pub fn relative_std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    var.sqrt() / mean
}
