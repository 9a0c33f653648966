//! Cluster entry points: partition the graph, connect machines and run a
//! dataflow to completion.

use std::fs::File;
use std::io::BufWriter;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;

use crate::comm::{in_process_network, tcp_local_network, Inbox, TcpTransport, Transport};
use crate::config::{EngineConfig, SinkMode, TransportKind};
use crate::dataflow::{translate, Dataflow};
use crate::error::{Error, Result};
use crate::graphstore::{partition, Graph, GraphPartition, Ownership};
use crate::metrics::{MachineMetrics, RunMetrics};
use crate::optimiser::{optimal_plan, ExecutionPlan, PlanStats};
use crate::querymodel::QueryGraph;
use crate::operators::SinkTarget;
use crate::scheduler::{run_machine, MachineOutput, MachineSetup};
use crate::VertexId;

#[derive(Debug)]
pub struct RunOutcome {
    pub count: u64,
    pub metrics: RunMetrics,
    /// Sorted results, in collect mode.
    pub results: Option<Vec<Vec<VertexId>>>,
}

impl RunOutcome {
    /// Scheduled-operator sequence of each machine (empty unless recorded).
    pub fn traces(&self) -> Vec<&[usize]> {
        self.metrics.per_machine.iter().map(|m| m.trace.as_slice()).collect()
    }
}

/// Plans `q` against `g` and runs it.
pub fn run_query(g: &Graph, q: &QueryGraph, cfg: &EngineConfig) -> Result<RunOutcome> {
    let plan = optimal_plan(q, &PlanStats::new(&g.stats(), cfg.machines))?;
    run_plan(g, &plan, cfg)
}

pub fn run_plan(g: &Graph, plan: &ExecutionPlan, cfg: &EngineConfig) -> Result<RunOutcome> {
    run_dataflow(g, translate(plan)?, cfg, plan_hash(plan))
}

/// FNV-1a of the plan's JSON form.
pub fn plan_hash(plan: &ExecutionPlan) -> u64 {
    plan.to_json()
        .to_string()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
}

fn machine_file(path: &Path, id: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".{id}"));
    PathBuf::from(s)
}

fn create_writer(path: &Path) -> Result<Arc<Mutex<BufWriter<File>>>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(Arc::new(Mutex::new(BufWriter::new(f))))
}

/// Runs `df` with every machine of the cluster inside this process, or as
/// one machine of a multi-process TCP cluster.
pub fn run_dataflow(g: &Graph, df: Dataflow, cfg: &EngineConfig, plan_hash: u64) -> Result<RunOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidPlan("batch size must be positive".into()));
    }
    let df = Arc::new(df.with_queue_capacity(cfg.queue_capacity));
    df.validate()?;
    if let TransportKind::Tcp { machine_id, peers } = &cfg.transport {
        return run_tcp_machine(g, df, cfg, plan_hash, *machine_id, peers);
    }
    let k = cfg.machines;
    let parts = partition(g, k, cfg.seed)?;
    let network: Vec<(Arc<dyn Transport>, Inbox)> = match cfg.transport {
        TransportKind::TcpLocal => tcp_local_network(k)?,
        _ => in_process_network(k),
    };
    let shared_file = match &cfg.sink {
        SinkMode::File(p) => Some(create_writer(p)?),
        _ => None,
    };
    let handles: Vec<_> = parts
        .into_iter()
        .zip(network)
        .enumerate()
        .map(|(id, (part, (transport, inbox)))| {
            let sink = match (&cfg.sink, &shared_file) {
                (SinkMode::File(_), Some(w)) => SinkTarget::File(w.clone()),
                (SinkMode::Collect, _) => SinkTarget::Collect(Vec::new()),
                _ => SinkTarget::Count,
            };
            let setup = MachineSetup {
                partition: Arc::new(part),
                dataflow: df.clone(),
                config: cfg.clone(),
                transport,
                inbox,
                sink,
                report_to_coordinator: false,
            };
            thread::Builder::new()
                .name(format!("machine-{id}"))
                .spawn(move || run_machine(setup))
                .map_err(|e| Error::Runtime(format!("spawn machine {id}: {e}")))
        })
        .collect::<Result<_>>()?;
    let outputs: Vec<Result<MachineOutput>> = handles
        .into_iter()
        .map(|h| {
            h.join()
                .unwrap_or_else(|_| Err(Error::Runtime("machine thread panicked".into())))
        })
        .collect();
    let outputs = first_root_error(outputs)?;
    let collect = matches!(cfg.sink, SinkMode::Collect);
    let mut results: Vec<Vec<VertexId>> = Vec::new();
    let mut per_machine = Vec::with_capacity(k);
    let mut count = 0;
    for out in outputs {
        count += out.count;
        results.extend(out.results.unwrap_or_default());
        per_machine.push(out.metrics);
    }
    results.sort_unstable();
    Ok(RunOutcome {
        count,
        metrics: RunMetrics::aggregate(per_machine, cfg.echo(g.edge_count(), plan_hash)),
        results: collect.then_some(results),
    })
}

/// Prefers the error of the machine that failed first over the aborts it
/// caused elsewhere.
fn first_root_error(outputs: Vec<Result<MachineOutput>>) -> Result<Vec<MachineOutput>> {
    if outputs.iter().all(Result::is_ok) {
        return Ok(outputs.into_iter().map(|o| o.expect("checked")).collect());
    }
    let errors: Vec<Error> = outputs.into_iter().filter_map(Result::err).collect();
    let is_echo = |e: &Error| matches!(e, Error::Runtime(m) if m.starts_with("machine "));
    let pick = errors.iter().position(|e| !is_echo(e)).unwrap_or(0);
    Err(errors.into_iter().nth(pick).expect("at least one error"))
}

fn run_tcp_machine(
    g: &Graph,
    df: Arc<Dataflow>,
    cfg: &EngineConfig,
    plan_hash: u64,
    id: usize,
    peers: &[std::net::SocketAddr],
) -> Result<RunOutcome> {
    let k = peers.len();
    if id >= k {
        return Err(Error::InvalidMachineCount(k));
    }
    let part = GraphPartition::build(g, Ownership::new(k, cfg.seed)?, id);
    let listener = TcpListener::bind(peers[id])
        .map_err(|e| Error::Transport(format!("bind {}: {e}", peers[id])))?;
    let (transport, inbox) = TcpTransport::start(id, listener, peers.to_vec())?;
    let sink = match &cfg.sink {
        SinkMode::File(p) => SinkTarget::File(create_writer(&machine_file(p, id))?),
        SinkMode::Collect => SinkTarget::Collect(Vec::new()),
        SinkMode::Count => SinkTarget::Count,
    };
    let out = run_machine(MachineSetup {
        partition: Arc::new(part),
        dataflow: df,
        config: cfg.clone(),
        transport,
        inbox,
        sink,
        report_to_coordinator: true,
    })?;
    let mut per_machine: Vec<MachineMetrics> = vec![out.metrics];
    let mut count = out.count;
    for (c, m) in out.peer_reports {
        count += c;
        per_machine.push(m);
    }
    per_machine.sort_by_key(|m| m.machine_id);
    let echo = EngineConfig {
        machines: k,
        ..cfg.clone()
    }
    .echo(g.edge_count(), plan_hash);
    Ok(RunOutcome {
        count,
        metrics: RunMetrics::aggregate(per_machine, echo),
        results: out.results.map(|mut r| {
            r.sort_unstable();
            r
        }),
    })
}
