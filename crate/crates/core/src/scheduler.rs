//! One machine's runtime: a dispatcher thread serving RPCs and routed
//! input, and a scheduler running the DFS/BFS-adaptive loop over each
//! subplan, followed by inter-machine stealing and the subplan barrier.
//!
//! Machine 0 doubles as coordinator: it collects `Done` messages and
//! broadcasts the finished list, then collects `Terminated` messages with
//! per-destination push counts and releases the barrier.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::LrbuCache;
use crate::comm::{decode, encode, route, Envelope, Inbox, Message, Transport};
use crate::config::EngineConfig;
use crate::dataflow::{Dataflow, OperatorKind};
use crate::error::{Error, Result};
use crate::graphstore::GraphPartition;
use crate::metrics::{MachineCounters, MachineMetrics};
use crate::operators::{
    fetch_stage, intersect_stage, Batch, ExtendPlan, JoinBuffer, JoinStream, NeighbourSource,
    ScanCursor, Sink, SinkTarget,
};
use crate::VertexId;

const RPC_TIMEOUT: Duration = Duration::from_secs(300);
const POLL: Duration = Duration::from_millis(20);
const IDLE_WAIT: Duration = Duration::from_micros(500);

/// Everything one machine needs to run.
pub struct MachineSetup {
    pub partition: Arc<GraphPartition>,
    pub dataflow: Arc<Dataflow>,
    pub config: EngineConfig,
    pub transport: Arc<dyn Transport>,
    pub inbox: Inbox,
    pub sink: SinkTarget,
    /// Send final metrics to machine 0, which waits for every report.
    pub report_to_coordinator: bool,
}

#[derive(Debug)]
pub struct MachineOutput {
    pub metrics: MachineMetrics,
    pub count: u64,
    pub results: Option<Vec<Vec<VertexId>>>,
    /// `(count, metrics)` from the other machines, on a reporting coordinator.
    pub peer_reports: Vec<(u64, MachineMetrics)>,
}

struct Work {
    /// Output queue of each operator, consumed by its successor.
    queues: Vec<VecDeque<Batch>>,
    rows: Vec<u64>,
    live_rows: u64,
    live_values: u64,
    /// Subplan being executed; steal requests for others get nothing.
    active: Option<usize>,
    joins: HashMap<usize, [JoinBuffer; 2]>,
}

impl Work {
    fn push(&mut self, op: usize, batch: Batch) -> u64 {
        let n = batch.len() as u64;
        self.live_rows += n;
        self.live_values += batch.data().len() as u64;
        self.rows[op] += n;
        self.queues[op].push_back(batch);
        self.rows[op]
    }

    fn pop(&mut self, op: usize) -> Option<Batch> {
        let b = self.queues[op].pop_front()?;
        self.forget(op, &b);
        Some(b)
    }

    fn forget(&mut self, op: usize, b: &Batch) {
        self.rows[op] -= b.len() as u64;
        self.live_rows -= b.len() as u64;
        self.live_values -= b.data().len() as u64;
    }
}

#[derive(Default)]
struct Control {
    finished: Vec<Vec<bool>>,
    complete: Vec<Option<u64>>,
    received: Vec<u64>,
    reports: Vec<(u64, String)>,
    abort: Option<String>,
}

struct Shared {
    id: usize,
    k: usize,
    part: Arc<GraphPartition>,
    df: Arc<Dataflow>,
    transport: Arc<dyn Transport>,
    counters: MachineCounters,
    next_corr: AtomicU64,
    pending: Mutex<HashMap<u64, Sender<Message>>>,
    work: Mutex<Work>,
    control: Mutex<Control>,
    signal: Condvar,
}

impl Shared {
    fn work(&self) -> MutexGuard<'_, Work> {
        self.work.lock().expect("work lock")
    }

    fn control(&self) -> MutexGuard<'_, Control> {
        self.control.lock().expect("control lock")
    }

    fn send(&self, to: usize, correlation: u64, message: Message) -> Result<()> {
        let is_push = message.is_push();
        let frame = encode(&Envelope {
            correlation,
            source: self.id as u32,
            message,
        });
        let n = frame.len() as u64;
        MachineCounters::add(&self.counters.bytes_sent, n);
        if is_push {
            MachineCounters::add(&self.counters.push_bytes, n);
        } else {
            MachineCounters::add(&self.counters.rpc_bytes, n);
        }
        self.transport.send(to, frame)
    }

    fn stop_dispatcher(&self) {
        let frame = encode(&Envelope {
            correlation: 0,
            source: self.id as u32,
            message: Message::Stop,
        });
        let _ = self.transport.send(self.id, frame);
    }

    fn abort(&self, message: String) {
        let mut c = self.control();
        if c.abort.is_none() {
            c.abort = Some(message);
        }
        drop(c);
        self.signal.notify_all();
    }

    fn check_abort(&self) -> Result<()> {
        match &self.control().abort {
            Some(m) => Err(Error::Runtime(m.clone())),
            None => Ok(()),
        }
    }

    fn request(&self, to: usize, message: Message) -> Result<mpsc::Receiver<Message>> {
        let corr = self.next_corr.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        self.pending.lock().expect("pending lock").insert(corr, tx);
        self.send(to, corr, message)?;
        Ok(rx)
    }

    fn await_reply(&self, rx: &mpsc::Receiver<Message>) -> Result<Message> {
        let start = Instant::now();
        let result = loop {
            match rx.recv_timeout(POLL) {
                Ok(Message::Error { message }) => break Err(Error::Runtime(message)),
                Ok(m) => break Ok(m),
                Err(RecvTimeoutError::Timeout) => {
                    if let Err(e) = self.check_abort() {
                        break Err(e);
                    }
                    if start.elapsed() > RPC_TIMEOUT {
                        break Err(Error::Transport("RPC timed out".into()));
                    }
                }
                Err(RecvTimeoutError::Disconnected) => {
                    break Err(Error::Transport("RPC reply channel closed".into()))
                }
            }
        };
        self.counters.blocked(start.elapsed());
        result
    }

    /// Blocks until `ready` yields a value, counting the wait as
    /// communication time.
    fn wait_for<T>(&self, mut ready: impl FnMut(&Control) -> Option<T>) -> Result<T> {
        let start = Instant::now();
        let mut c = self.control();
        let out = loop {
            if let Some(m) = &c.abort {
                break Err(Error::Runtime(m.clone()));
            }
            if let Some(v) = ready(&c) {
                break Ok(v);
            }
            c = self.signal.wait_timeout(c, POLL).expect("control lock").0;
        };
        drop(c);
        self.counters.blocked(start.elapsed());
        out
    }

    /// Adds routed input to a join buffer and counts it for the barrier.
    fn deliver_push(&self, operator: usize, side: usize, subplan: usize, batch: &Batch) -> Result<()> {
        {
            let mut w = self.work();
            let bufs = w
                .joins
                .get_mut(&operator)
                .ok_or_else(|| Error::Runtime(format!("push for non-join operator {operator}")))?;
            bufs.get_mut(side)
                .ok_or_else(|| Error::Runtime(format!("bad join side {side}")))?
                .add(batch)?;
        }
        MachineCounters::add(&self.counters.processed_results, batch.len() as u64);
        let mut c = self.control();
        c.received[subplan] += 1;
        drop(c);
        self.signal.notify_all();
        Ok(())
    }

    /// Hands out half (rounded up) of the batches of the top-most
    /// non-empty stealable queue of `subplan`.
    fn serve_steal(&self, subplan: usize) -> (Option<u32>, Vec<Batch>) {
        let ops = &self.df.subplans[subplan].operators;
        let mut w = self.work();
        if w.active != Some(subplan) {
            return (None, Vec::new());
        }
        // The tail feeds a sink or the router; its output is not a queue.
        for pair in ops.windows(2) {
            let (producer, consumer) = (pair[0], pair[1]);
            if matches!(self.df.operators[consumer].kind, OperatorKind::Sink { .. }) {
                break;
            }
            let n = w.queues[producer].len();
            if n == 0 {
                continue;
            }
            let take = n.div_ceil(2);
            let batches: Vec<Batch> = (0..take)
                .filter_map(|_| w.queues[producer].pop_back())
                .collect();
            for b in &batches {
                w.forget(producer, b);
            }
            MachineCounters::add(&self.counters.served_batches, batches.len() as u64);
            return (Some(consumer as u32), batches);
        }
        (None, Vec::new())
    }
}

/// GetNbrs over the transport: every request goes out before any reply is
/// awaited.
struct RemoteFetch<'a>(&'a Shared);

impl NeighbourSource for RemoteFetch<'_> {
    fn get_nbrs(&self, groups: &[(usize, Vec<VertexId>)]) -> Result<Vec<Vec<Vec<VertexId>>>> {
        let sh = self.0;
        let waits = groups
            .iter()
            .map(|(m, vs)| {
                if *m == sh.id {
                    return Err(Error::Runtime("GetNbrs addressed to self".into()));
                }
                sh.request(*m, Message::GetNbrsRequest { vertices: vs.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        waits
            .iter()
            .zip(groups)
            .map(|(rx, (m, vs))| match sh.await_reply(rx)? {
                Message::GetNbrsResponse { lists } if lists.len() == vs.len() => Ok(lists),
                other => Err(Error::Runtime(format!(
                    "unexpected reply from machine {m}: {other:?}"
                ))),
            })
            .collect()
    }
}

/// Coordinator bookkeeping held by machine 0's dispatcher.
struct Coordinator {
    done: Vec<BTreeSet<u32>>,
    terminated: Vec<(usize, Vec<u64>)>,
}

fn dispatch(sh: &Shared, inbox: Inbox) {
    let subplans = sh.df.subplans.len();
    let mut coord = Coordinator {
        done: vec![BTreeSet::new(); subplans],
        terminated: vec![(0, vec![0; sh.k]); subplans],
    };
    while let Ok(frame) = inbox.recv() {
        let env = match decode(&frame) {
            Ok(e) => e,
            Err(e) => {
                sh.abort(e.to_string());
                continue;
            }
        };
        if matches!(env.message, Message::Stop) {
            break;
        }
        if let Err(e) = handle(sh, &mut coord, env) {
            let msg = format!("machine {}: {e}", sh.id);
            sh.abort(msg.clone());
            broadcast_error(sh, &msg);
        }
    }
}

fn broadcast_error(sh: &Shared, message: &str) {
    for m in (0..sh.k).filter(|&m| m != sh.id) {
        let _ = sh.send(
            m,
            0,
            Message::Error {
                message: message.to_string(),
            },
        );
    }
}

fn subplan_index(sh: &Shared, sp: u32) -> Result<usize> {
    let sp = sp as usize;
    if sp < sh.df.subplans.len() {
        Ok(sp)
    } else {
        Err(Error::Runtime(format!("unknown subplan {sp}")))
    }
}

fn handle(sh: &Shared, coord: &mut Coordinator, env: Envelope) -> Result<()> {
    let from = env.source as usize;
    match env.message {
        Message::GetNbrsRequest { vertices } => {
            let reply = vertices
                .iter()
                .map(|&v| sh.part.neighbours(v).map(<[VertexId]>::to_vec))
                .collect::<Result<Vec<_>>>();
            let reply = match reply {
                Ok(lists) => Message::GetNbrsResponse { lists },
                Err(e) => Message::Error { message: e.to_string() },
            };
            sh.send(from, env.correlation, reply)
        }
        Message::StealRequest { subplan } => {
            let (operator, batches) = sh.serve_steal(subplan_index(sh, subplan)?);
            sh.send(from, env.correlation, Message::StealResponse { operator, batches })
        }
        Message::Push {
            operator,
            side,
            subplan,
            batch,
        } => sh.deliver_push(operator as usize, side as usize, subplan_index(sh, subplan)?, &batch),
        m @ (Message::GetNbrsResponse { .. } | Message::StealResponse { .. }) => {
            if let Some(tx) = sh.pending.lock().expect("pending lock").remove(&env.correlation) {
                let _ = tx.send(m);
            }
            Ok(())
        }
        Message::Error { message } => {
            match sh.pending.lock().expect("pending lock").remove(&env.correlation) {
                Some(tx) => {
                    let _ = tx.send(Message::Error { message });
                }
                None => sh.abort(message),
            }
            Ok(())
        }
        Message::Done { subplan } => {
            let sp = subplan_index(sh, subplan)?;
            coord.done[sp].insert(from as u32);
            let machines: Vec<u32> = coord.done[sp].iter().copied().collect();
            for m in 0..sh.k {
                sh.send(
                    m,
                    0,
                    Message::FinishedList {
                        subplan,
                        machines: machines.clone(),
                    },
                )?;
            }
            Ok(())
        }
        Message::FinishedList { subplan, machines } => {
            let sp = subplan_index(sh, subplan)?;
            let mut c = sh.control();
            for m in machines {
                if let Some(slot) = c.finished[sp].get_mut(m as usize) {
                    *slot = true;
                }
            }
            drop(c);
            sh.signal.notify_all();
            Ok(())
        }
        Message::Terminated { subplan, pushes_sent } => {
            let sp = subplan_index(sh, subplan)?;
            let (count, sums) = &mut coord.terminated[sp];
            *count += 1;
            for (d, p) in pushes_sent.iter().enumerate().take(sh.k) {
                sums[d] += p;
            }
            if *count == sh.k {
                for (m, &expected_pushes) in sums.iter().enumerate() {
                    sh.send(
                        m,
                        0,
                        Message::SubplanComplete {
                            subplan,
                            expected_pushes,
                        },
                    )?;
                }
            }
            Ok(())
        }
        Message::SubplanComplete {
            subplan,
            expected_pushes,
        } => {
            let sp = subplan_index(sh, subplan)?;
            sh.control().complete[sp] = Some(expected_pushes);
            sh.signal.notify_all();
            Ok(())
        }
        Message::Report { count, metrics_json } => {
            sh.control().reports.push((count, metrics_json));
            sh.signal.notify_all();
            Ok(())
        }
        Message::Stop => Ok(()),
    }
}

/// Scheduler-thread state.
struct Exec<'a> {
    sh: &'a Shared,
    cfg: &'a EngineConfig,
    cache: LrbuCache,
    scans: HashMap<usize, ScanCursor>,
    streams: HashMap<usize, JoinStream>,
    extend_plans: HashMap<usize, ExtendPlan>,
    sink: Option<Sink>,
    /// `pushes_sent[subplan][destination]`.
    pushes_sent: Vec<Vec<u64>>,
    bound: u64,
    max_occupancy: Vec<u64>,
    violations: u64,
    peak_intermediate: u64,
    peak_bytes: u64,
    worker_processed: Vec<u64>,
    trace: Vec<usize>,
    rng: ChaCha8Rng,
    batches_run: u64,
    spilled_runs: u64,
}

impl Exec<'_> {
    fn df(&self) -> &Dataflow {
        &self.sh.df
    }

    fn ops(&self, sp: usize) -> &[usize] {
        &self.sh.df.subplans[sp].operators
    }

    fn has_input(&self, sp: usize, i: usize) -> bool {
        let op = self.ops(sp)[i];
        match self.df().operators[op].kind {
            OperatorKind::Scan { .. } => self
                .scans
                .get(&op)
                .is_some_and(|c| !c.is_exhausted(&self.sh.part)),
            OperatorKind::PushJoin { .. } => self.streams.get(&op).is_some_and(|s| !s.is_exhausted()),
            _ => !self.sh.work().queues[self.ops(sp)[i - 1]].is_empty(),
        }
    }

    fn output_full(&self, sp: usize, i: usize) -> bool {
        let ops = self.ops(sp);
        if i + 1 == ops.len() {
            return false;
        }
        let op = ops[i];
        self.sh.work().rows[op] >= self.df().operators[op].queue_capacity as u64
    }

    /// Sets up cursors and join streams for `sp`.
    fn open_subplan(&mut self, sp: usize) -> Result<()> {
        let head = self.ops(sp)[0];
        let spec = self.df().operators[head].clone();
        match spec.kind {
            OperatorKind::Scan { .. } => {
                self.scans.insert(head, ScanCursor::new(&spec)?);
            }
            OperatorKind::PushJoin { .. } => {
                let [l, r] = self
                    .sh
                    .work()
                    .joins
                    .remove(&head)
                    .ok_or_else(|| Error::Runtime(format!("join {head} has no buffers")))?;
                self.spilled_runs += (l.spilled_runs() + r.spilled_runs()) as u64;
                self.streams.insert(head, JoinStream::new(&spec, l, r)?);
            }
            _ => return Err(Error::InvalidPlan("subplan head must be a scan or join".into())),
        }
        self.sh.work().active = Some(sp);
        Ok(())
    }

    /// The DFS/BFS-adaptive loop, starting from operator index `start`.
    fn run_loop(&mut self, sp: usize, start: usize) -> Result<()> {
        let n = self.ops(sp).len();
        let mut i = start;
        loop {
            if (0..n).all(|j| !self.has_input(sp, j)) {
                return Ok(());
            }
            if !self.has_input(sp, i) {
                if i > 0 && (0..i).any(|j| self.has_input(sp, j)) {
                    i -= 1;
                } else {
                    i = (i + 1).min(n - 1);
                }
                continue;
            }
            if self.cfg.record_trace {
                self.trace.push(self.ops(sp)[i]);
            }
            loop {
                self.step(sp, i)?;
                if !self.has_input(sp, i) || self.output_full(sp, i) {
                    break;
                }
            }
            // A tail (sink or router output) backtracks; others advance.
            i = if i + 1 == n { i.saturating_sub(1) } else { i + 1 };
        }
    }

    /// Processes one batch of operator `ops[i]`.
    fn step(&mut self, sp: usize, i: usize) -> Result<()> {
        let op = self.ops(sp)[i];
        let b = self.cfg.batch_size;
        let counters = &self.sh.counters;
        let kind = self.df().operators[op].kind.clone();
        let (out, in_flight) = match kind {
            OperatorKind::Scan { .. } => {
                let cursor = self.scans.get_mut(&op).expect("scan opened");
                let out = cursor.next_batch(&self.sh.part, b)?;
                let n = out.as_ref().map_or(0, Batch::len) as u64;
                MachineCounters::add(&counters.processed_results, n);
                (out.map(|o| vec![o]).unwrap_or_default(), 0)
            }
            OperatorKind::PushJoin { .. } => {
                let stream = self.streams.get_mut(&op).expect("join opened");
                (stream.next_batch(b)?.map(|o| vec![o]).unwrap_or_default(), 0)
            }
            OperatorKind::PullExtend { .. } => {
                let pred = self.ops(sp)[i - 1];
                let Some(input) = self.sh.work().pop(pred) else {
                    return Ok(());
                };
                let n = input.len() as u64;
                MachineCounters::add(&counters.processed_results, n);
                (self.extend(op, &input)?, n)
            }
            OperatorKind::Sink { .. } => {
                let pred = self.ops(sp)[i - 1];
                let Some(input) = self.sh.work().pop(pred) else {
                    return Ok(());
                };
                MachineCounters::add(&counters.processed_results, input.len() as u64);
                self.sink.as_mut().expect("sink").consume(&input)?;
                (Vec::new(), input.len() as u64)
            }
        };
        let is_tail = i + 1 == self.ops(sp).len();
        let is_sink = matches!(self.df().operators[op].kind, OperatorKind::Sink { .. });
        if is_tail && !is_sink {
            for batch in out {
                self.route_out(sp, op, batch)?;
            }
        } else if !out.is_empty() {
            let mut w = self.sh.work();
            for batch in out {
                let occ = w.push(op, batch);
                self.max_occupancy[op] = self.max_occupancy[op].max(occ);
            }
            if self.max_occupancy[op] > self.bound {
                self.violations += 1;
            }
        }
        self.account(in_flight);
        Ok(())
    }

    fn account(&mut self, in_flight: u64) {
        let (rows, values, join_bytes) = {
            let w = self.sh.work();
            let jb: usize = w.joins.values().map(|[l, r]| l.mem_bytes() + r.mem_bytes()).sum();
            (w.live_rows, w.live_values, jb as u64)
        };
        self.peak_intermediate = self.peak_intermediate.max(rows + in_flight);
        let bytes = 4 * (values + self.cache.occupancy() as u64) + join_bytes;
        self.peak_bytes = self.peak_bytes.max(bytes);
    }

    fn extend(&mut self, op: usize, input: &Batch) -> Result<Vec<Batch>> {
        let sh = self.sh;
        let plan = match self.extend_plans.get(&op) {
            Some(p) => p.clone(),
            None => {
                let p = ExtendPlan::from_spec(&sh.df.operators[op], input.arity())?;
                self.extend_plans.insert(op, p.clone());
                p
            }
        };
        let c = &sh.counters;
        let report = fetch_stage(input, &plan.ext, &sh.part, &mut self.cache, &RemoteFetch(sh))?;
        MachineCounters::add(&c.extend_batches, 1);
        MachineCounters::add(&c.get_nbrs_messages, report.messages as u64);
        MachineCounters::add(&c.get_nbrs_requested, report.requested as u64);
        MachineCounters::add(&c.remote_touched, report.distinct_remote as u64);
        MachineCounters::max(&c.max_get_nbrs_per_target, report.max_messages_per_target as u64);
        self.batches_run += 1;
        let out = intersect_stage(
            input,
            &plan,
            &sh.part,
            &self.cache,
            self.cfg.workers,
            self.cfg.intra_steal,
            self.cfg.seed ^ self.batches_run.wrapping_mul(0x9E37_79B9),
        )?;
        self.cache.release();
        MachineCounters::add(&c.cache_releases, 1);
        MachineCounters::add(&c.intra_steals, out.steals);
        for (w, n) in out.worker_processed.iter().enumerate() {
            self.worker_processed[w] += n;
        }
        Ok(Batch::chunked(plan.out_arity(), out.data, self.cfg.batch_size))
    }

    /// Routes a tail batch to the machines owning each row's join key.
    fn route_out(&mut self, sp: usize, op: usize, batch: Batch) -> Result<()> {
        let consumer = self
            .df()
            .successor(op)
            .ok_or_else(|| Error::InvalidPlan(format!("operator {op} has no consumer")))?;
        let spec = &self.df().operators[consumer];
        let OperatorKind::PushJoin {
            left_key, right_key, ..
        } = &spec.kind
        else {
            return Err(Error::InvalidPlan(format!("operator {op} feeds a non-join")));
        };
        let side = usize::from(spec.inputs[1] == op);
        let key = if side == 0 { left_key.clone() } else { right_key.clone() };
        let k = self.sh.k;
        let mut parts: Vec<Batch> = (0..k).map(|_| Batch::new(batch.arity())).collect();
        let mut kv = Vec::with_capacity(key.len());
        for row in batch.rows() {
            kv.clear();
            kv.extend(key.iter().map(|&p| row[p]));
            parts[route(&kv, k)].push(row);
        }
        for (dest, part) in parts.into_iter().enumerate() {
            if part.is_empty() {
                continue;
            }
            self.pushes_sent[sp][dest] += 1;
            let message = Message::Push {
                operator: consumer as u32,
                side: side as u8,
                subplan: sp as u32,
                batch: part,
            };
            if dest == self.sh.id {
                // Bypasses the transport but still counts the encoded size.
                let frame_len = encode(&Envelope {
                    correlation: 0,
                    source: dest as u32,
                    message,
                });
                let len = frame_len.len() as u64;
                let Ok(Envelope {
                    message: Message::Push { batch, .. },
                    ..
                }) = decode(&frame_len)
                else {
                    return Err(Error::Wire("self push round trip".into()));
                };
                MachineCounters::add(&self.sh.counters.bytes_sent, len);
                MachineCounters::add(&self.sh.counters.push_bytes, len);
                self.sh.deliver_push(consumer, side, sp, &batch)?;
            } else {
                self.sh.send(dest, 0, message)?;
            }
        }
        Ok(())
    }

    /// Steals until every machine is done with `sp`, then passes the
    /// barrier once all routed input for `sp` has arrived.
    fn finish_subplan(&mut self, sp: usize) -> Result<()> {
        let sh = self.sh;
        let k = sh.k;
        if k > 1 {
            sh.send(0, 0, Message::Done { subplan: sp as u32 })?;
            let mut tried: HashSet<usize> = HashSet::new();
            loop {
                sh.check_abort()?;
                let finished = sh.control().finished[sp].clone();
                if finished.iter().all(|&f| f) {
                    break;
                }
                let candidates: Vec<usize> = (0..k)
                    .filter(|&m| m != sh.id && !finished[m] && !tried.contains(&m))
                    .collect();
                if !self.cfg.inter_steal || candidates.is_empty() {
                    tried.clear();
                    let start = Instant::now();
                    let c = sh.control();
                    let _ = sh.signal.wait_timeout(c, IDLE_WAIT).expect("control lock");
                    sh.counters.blocked(start.elapsed());
                    continue;
                }
                let victim = candidates[self.rng.gen_range(0..candidates.len())];
                MachineCounters::add(&sh.counters.steal_requests, 1);
                let rx = sh.request(victim, Message::StealRequest { subplan: sp as u32 })?;
                match sh.await_reply(&rx)? {
                    Message::StealResponse {
                        operator: Some(op),
                        batches,
                    } if !batches.is_empty() => {
                        let op = op as usize;
                        let i = self
                            .ops(sp)
                            .iter()
                            .position(|&o| o == op)
                            .filter(|&i| i > 0)
                            .ok_or_else(|| Error::Runtime(format!("stolen work for foreign operator {op}")))?;
                        let producer = self.ops(sp)[i - 1];
                        let rows: u64 = batches.iter().map(|b| b.len() as u64).sum();
                        MachineCounters::add(&sh.counters.stolen_batches, batches.len() as u64);
                        MachineCounters::add(&sh.counters.stolen_results, rows);
                        {
                            let mut w = sh.work();
                            for b in batches {
                                let occ = w.push(producer, b);
                                self.max_occupancy[producer] = self.max_occupancy[producer].max(occ);
                            }
                        }
                        if self.max_occupancy[producer] > self.bound {
                            self.violations += 1;
                        }
                        self.run_loop(sp, i)?;
                        tried.clear();
                    }
                    Message::StealResponse { .. } => {
                        tried.insert(victim);
                    }
                    other => return Err(Error::Runtime(format!("unexpected steal reply {other:?}"))),
                }
            }
            sh.send(
                0,
                0,
                Message::Terminated {
                    subplan: sp as u32,
                    pushes_sent: self.pushes_sent[sp].clone(),
                },
            )?;
            let expected = sh.wait_for(|c| c.complete[sp])?;
            sh.wait_for(|c| (c.received[sp] >= expected).then_some(()))?;
        }
        sh.work().active = None;
        Ok(())
    }
}

/// Runs one machine to completion.
pub fn run_machine(setup: MachineSetup) -> Result<MachineOutput> {
    let MachineSetup {
        partition,
        dataflow,
        config,
        transport,
        inbox,
        sink,
        report_to_coordinator,
    } = setup;
    let started = Instant::now();
    let k = partition.ownership().machines();
    let id = partition.machine_id();
    let ops = dataflow.operators.len();
    let subplans = dataflow.subplans.len();
    let mut joins = HashMap::new();
    for op in &dataflow.operators {
        if let OperatorKind::PushJoin {
            left_key, right_key, ..
        } = &op.kind
        {
            let arity = |i: usize| dataflow.operators[op.inputs[i]].output_schema.len();
            let dir = config.spill_dir.clone();
            joins.insert(
                op.id,
                [
                    JoinBuffer::new(arity(0), left_key.clone(), config.spill_threshold, dir.clone()),
                    JoinBuffer::new(arity(1), right_key.clone(), config.spill_threshold, dir),
                ],
            );
        }
    }
    let max_degree = partition.stats().max_degree as u64;
    let cache_capacity = config.cache_capacity_for(partition.stats().edge_count);
    let shared = Arc::new(Shared {
        id,
        k,
        part: partition,
        df: dataflow,
        transport,
        counters: MachineCounters::default(),
        next_corr: AtomicU64::new(1),
        pending: Mutex::new(HashMap::new()),
        work: Mutex::new(Work {
            queues: vec![VecDeque::new(); ops],
            rows: vec![0; ops],
            live_rows: 0,
            live_values: 0,
            active: None,
            joins,
        }),
        control: Mutex::new(Control {
            finished: vec![vec![false; k]; subplans],
            complete: vec![None; subplans],
            received: vec![0; subplans],
            ..Control::default()
        }),
        signal: Condvar::new(),
    });
    let dispatcher = {
        let sh = shared.clone();
        thread::Builder::new()
            .name(format!("dispatch-{id}"))
            .spawn(move || dispatch(&sh, inbox))
            .map_err(|e| Error::Runtime(format!("spawn dispatcher: {e}")))?
    };
    let sink_op = shared.df.sink();
    let bound = (shared.df.operators.iter().map(|o| o.queue_capacity).max().unwrap_or(0) as u64)
        .saturating_add((config.batch_size as u64).saturating_mul(max_degree.max(1)));
    let mut exec = Exec {
        sh: &shared,
        cfg: &config,
        cache: LrbuCache::new(cache_capacity),
        scans: HashMap::new(),
        streams: HashMap::new(),
        extend_plans: HashMap::new(),
        sink: Some(Sink::new(&shared.df.operators[sink_op], sink)?),
        pushes_sent: vec![vec![0; k]; subplans],
        bound,
        max_occupancy: vec![0; ops],
        violations: 0,
        peak_intermediate: 0,
        peak_bytes: 0,
        worker_processed: vec![0; config.workers.max(1)],
        trace: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ (id as u64).wrapping_mul(0xA24B_AED4_963E_E407)),
        batches_run: 0,
        spilled_runs: 0,
    };
    let run = (|| -> Result<()> {
        for sp in shared.df.order_subplans() {
            exec.open_subplan(sp)?;
            exec.run_loop(sp, 0)?;
            exec.finish_subplan(sp)?;
        }
        Ok(())
    })();
    if let Err(e) = run {
        let msg = format!("machine {id}: {e}");
        shared.abort(msg.clone());
        broadcast_error(&shared, &msg);
        shared.stop_dispatcher();
        let _ = dispatcher.join();
        return Err(e);
    }
    let (count, results) = exec.sink.take().expect("sink").finish()?;
    let mut metrics = MachineMetrics {
        machine_id: id,
        total_s: started.elapsed().as_secs_f64(),
        result_count: count,
        peak_intermediate_results: exec.peak_intermediate,
        max_operator_occupancy: exec.max_occupancy.clone(),
        occupancy_bound: bound,
        occupancy_violations: exec.violations,
        peak_rss_estimate: exec.peak_bytes,
        cache: exec.cache.stats(),
        worker_processed: exec.worker_processed.clone(),
        trace: exec.trace.clone(),
        ..MachineMetrics::default()
    };
    let spilled = exec.spilled_runs;
    drop(exec);
    MachineCounters::add(&shared.counters.spilled_runs, spilled);
    let mut peer_reports = Vec::new();
    let finish = (|| -> Result<()> {
        if report_to_coordinator && k > 1 {
            if id == 0 {
                let reports = shared.wait_for(|c| (c.reports.len() + 1 >= k).then(|| c.reports.clone()))?;
                for (count, json) in reports {
                    let m: MachineMetrics = serde_json::from_str(&json)
                        .map_err(|e| Error::Wire(format!("bad metrics report: {e}")))?;
                    peer_reports.push((count, m));
                }
            } else {
                metrics.total_s = started.elapsed().as_secs_f64();
                metrics.fill_counters(&shared.counters);
                let json = serde_json::to_string(&metrics).expect("metrics serialise");
                shared.send(0, 0, Message::Report { count, metrics_json: json })?;
            }
        }
        Ok(())
    })();
    shared.stop_dispatcher();
    let _ = dispatcher.join();
    finish?;
    metrics.total_s = started.elapsed().as_secs_f64();
    metrics.fill_counters(&shared.counters);
    Ok(MachineOutput {
        metrics,
        count,
        results,
        peer_reports,
    })
}
