//! The four operator kinds over batches of partial results: edge scan,
//! two-stage pull-extend, buffered push-join with disk spill, and sink.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::LrbuCache;
use crate::dataflow::{OperatorKind, OperatorSpec};
use crate::error::{Error, Result};
use crate::graphstore::GraphPartition;
use crate::VertexId;

/// Fixed-arity partial results stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Batch {
    arity: usize,
    data: Vec<VertexId>,
}

impl Batch {
    pub fn new(arity: usize) -> Batch {
        assert!(arity > 0, "batches need a positive arity");
        Batch {
            arity,
            data: Vec::new(),
        }
    }

    pub fn from_data(arity: usize, data: Vec<VertexId>) -> Batch {
        assert!(arity > 0 && data.len() % arity == 0, "ragged batch");
        Batch { arity, data }
    }

    pub fn from_rows(arity: usize, rows: &[&[VertexId]]) -> Batch {
        let mut b = Batch::new(arity);
        for r in rows {
            b.push(r);
        }
        b
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn len(&self) -> usize {
        if self.arity == 0 {
            0
        } else {
            self.data.len() / self.arity
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[VertexId] {
        &self.data[i * self.arity..(i + 1) * self.arity]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, VertexId> {
        self.data.chunks_exact(self.arity.max(1))
    }

    pub fn push(&mut self, row: &[VertexId]) {
        debug_assert_eq!(row.len(), self.arity);
        self.data.extend_from_slice(row);
    }

    pub fn data(&self) -> &[VertexId] {
        &self.data
    }

    pub fn into_data(self) -> Vec<VertexId> {
        self.data
    }

    /// Splits a flat row buffer into batches of at most `max_rows` rows.
    pub fn chunked(arity: usize, data: Vec<VertexId>, max_rows: usize) -> Vec<Batch> {
        let step = max_rows.max(1) * arity;
        if data.len() <= step {
            return if data.is_empty() {
                Vec::new()
            } else {
                vec![Batch::from_data(arity, data)]
            };
        }
        data.chunks(step)
            .map(|c| Batch::from_data(arity, c.to_vec()))
            .collect()
    }
}

/// Streams `(f(root), f(leaf))` for every locally owned root vertex.
#[derive(Debug)]
pub struct ScanCursor {
    next_owned: usize,
    next_nbr: usize,
    /// `Some(true)`: keep `leaf > root`; `Some(false)`: keep `leaf < root`.
    order: Option<bool>,
}

impl ScanCursor {
    pub fn new(op: &OperatorSpec) -> Result<ScanCursor> {
        if !matches!(op.kind, OperatorKind::Scan { .. }) {
            return Err(Error::InvalidPlan(format!("operator {} is not a scan", op.id)));
        }
        let order = match op.filters.as_slice() {
            [] => None,
            [(0, 1)] => Some(true),
            [(1, 0)] => Some(false),
            f => return Err(Error::InvalidPlan(format!("bad scan filters {f:?}"))),
        };
        Ok(ScanCursor {
            next_owned: 0,
            next_nbr: 0,
            order,
        })
    }

    pub fn is_exhausted(&self, part: &GraphPartition) -> bool {
        self.next_owned >= part.owned_vertices().len()
    }

    pub fn next_batch(&mut self, part: &GraphPartition, batch_size: usize) -> Result<Option<Batch>> {
        let owned = part.owned_vertices();
        let mut out = Batch::new(2);
        let limit = batch_size.max(1);
        while self.next_owned < owned.len() && out.len() < limit {
            let u = owned[self.next_owned];
            let nbrs = part.neighbours(u)?;
            let (lo, hi) = match self.order {
                None => (0, nbrs.len()),
                Some(true) => (nbrs.partition_point(|&w| w <= u), nbrs.len()),
                Some(false) => (0, nbrs.partition_point(|&w| w < u)),
            };
            let start = self.next_nbr.max(lo);
            let take = (hi.saturating_sub(start)).min(limit - out.len());
            for &w in &nbrs[start..start + take] {
                out.push(&[u, w]);
            }
            if start + take >= hi {
                self.next_owned += 1;
                self.next_nbr = 0;
            } else {
                self.next_nbr = start + take;
            }
        }
        Ok((!out.is_empty()).then_some(out))
    }
}

/// Remote adjacency provider used by the fetch stage.
pub trait NeighbourSource {
    /// Fetches the lists for each `(machine, vertices)` group, one request
    /// per machine, returning them in request order.
    fn get_nbrs(&self, groups: &[(usize, Vec<VertexId>)]) -> Result<Vec<Vec<Vec<VertexId>>>>;
}

/// Per-batch accounting of the fetch stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FetchReport {
    pub distinct_remote: usize,
    pub requested: usize,
    pub messages: usize,
    /// Messages sent to any single machine; one by construction.
    pub max_messages_per_target: usize,
}

/// Extend operator parameters resolved against its input arity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendPlan {
    pub ext: Vec<usize>,
    pub verify: Option<usize>,
    pub in_arity: usize,
    /// Positions whose vertex must be smaller than the candidate.
    pub lower: Vec<usize>,
    /// Positions whose vertex must be larger than the candidate.
    pub upper: Vec<usize>,
    /// Order checks between already matched positions.
    pub row_filters: Vec<(usize, usize)>,
}

impl ExtendPlan {
    pub fn from_spec(op: &OperatorSpec, in_arity: usize) -> Result<ExtendPlan> {
        let OperatorKind::PullExtend { ext, verify, .. } = &op.kind else {
            return Err(Error::InvalidPlan(format!("operator {} is not an extend", op.id)));
        };
        let mut plan = ExtendPlan {
            ext: ext.clone(),
            verify: *verify,
            in_arity,
            lower: Vec::new(),
            upper: Vec::new(),
            row_filters: Vec::new(),
        };
        let target = if verify.is_some() { usize::MAX } else { in_arity };
        for &(a, b) in &op.filters {
            if b == target {
                plan.lower.push(a);
            } else if a == target {
                plan.upper.push(b);
            } else {
                plan.row_filters.push((a, b));
            }
        }
        Ok(plan)
    }

    pub fn out_arity(&self) -> usize {
        self.in_arity + usize::from(self.verify.is_none())
    }
}

fn lookup<'a>(v: VertexId, part: &'a GraphPartition, cache: &'a LrbuCache) -> Result<&'a [VertexId]> {
    if part.is_local(v) {
        part.neighbours(v)
    } else {
        cache.get(v)
    }
}

/// Fetch stage: seals cached remote lists and fetches the rest with one
/// request per owning machine. The only stage that mutates the cache.
pub fn fetch_stage(
    batch: &Batch,
    ext: &[usize],
    part: &GraphPartition,
    cache: &mut LrbuCache,
    source: &dyn NeighbourSource,
) -> Result<FetchReport> {
    let mut seen = HashSet::new();
    let mut missing: BTreeMap<usize, Vec<VertexId>> = BTreeMap::new();
    for row in batch.rows() {
        for &p in ext {
            let v = row[p];
            if part.is_local(v) || !seen.insert(v) {
                continue;
            }
            if cache.contains(v) {
                cache.record_hit();
                cache.seal(v)?;
            } else {
                cache.record_miss();
                missing.entry(part.owner(v)).or_default().push(v);
            }
        }
    }
    let groups: Vec<(usize, Vec<VertexId>)> = missing.into_iter().collect();
    let requested = groups.iter().map(|(_, g)| g.len()).sum();
    if !groups.is_empty() {
        let responses = source.get_nbrs(&groups)?;
        if responses.len() != groups.len() {
            return Err(Error::Runtime("GetNbrs response count mismatch".into()));
        }
        for ((_, vids), lists) in groups.iter().zip(responses) {
            if lists.len() != vids.len() {
                return Err(Error::Runtime("GetNbrs list count mismatch".into()));
            }
            for (&v, list) in vids.iter().zip(lists) {
                cache.insert(v, list.into_boxed_slice());
                cache.seal(v)?;
            }
        }
    }
    Ok(FetchReport {
        distinct_remote: seen.len(),
        requested,
        messages: groups.len(),
        max_messages_per_target: usize::from(!groups.is_empty()),
    })
}

/// Appends the extensions of one row to `out`, or the row itself when a
/// verification succeeds.
fn extend_row<'a>(
    row: &[VertexId],
    plan: &ExtendPlan,
    part: &'a GraphPartition,
    cache: &'a LrbuCache,
    lists: &mut Vec<&'a [VertexId]>,
    out: &mut Vec<VertexId>,
) -> Result<()> {
    if plan.row_filters.iter().any(|&(a, b)| row[a] >= row[b]) {
        return Ok(());
    }
    lists.clear();
    for &p in &plan.ext {
        lists.push(lookup(row[p], part, cache)?);
    }
    if let Some(h) = plan.verify {
        let x = row[h];
        if lists.iter().all(|l| l.binary_search(&x).is_ok()) {
            out.extend_from_slice(row);
        }
        return Ok(());
    }
    lists.sort_unstable_by_key(|l| l.len());
    let lo = plan.lower.iter().map(|&p| row[p]).max();
    let hi = plan.upper.iter().map(|&p| row[p]).min();
    let (first, rest) = lists.split_first_mut().expect("ext is non-empty");
    let start = lo.map_or(0, |lo| first.partition_point(|&x| x <= lo));
    let end = hi.map_or(first.len(), |hi| first.partition_point(|&x| x < hi));
    if start >= end {
        return Ok(());
    }
    'cand: for &c in &first[start..end] {
        if row.contains(&c) {
            continue;
        }
        for l in rest.iter_mut() {
            let p = l.partition_point(|&x| x < c);
            *l = &l[p..];
            if l.first() != Some(&c) {
                continue 'cand;
            }
        }
        out.extend_from_slice(row);
        out.push(c);
    }
    Ok(())
}

/// Result of the intersect stage of one batch.
#[derive(Debug, Default)]
pub struct IntersectOutput {
    pub data: Vec<VertexId>,
    /// Input rows consumed plus rows emitted, per worker.
    pub worker_processed: Vec<u64>,
    pub steals: u64,
}

/// Rows per initial work chunk: small enough that stealing can split a
/// skewed region.
fn chunk_rows(rows: usize, workers: usize) -> usize {
    (rows / (workers * 32)).max(1)
}

/// Intersect stage over read-only cache and partition. With several workers
/// the rows are split into contiguous chunks, one deque per worker; the
/// owner pops from the back and an idle worker steals half of a random
/// peer's deque from the front.
pub fn intersect_stage(
    batch: &Batch,
    plan: &ExtendPlan,
    part: &GraphPartition,
    cache: &LrbuCache,
    workers: usize,
    intra_steal: bool,
    seed: u64,
) -> Result<IntersectOutput> {
    let rows = batch.len();
    let workers = workers.max(1).min(rows.max(1));
    if workers == 1 {
        let mut data = Vec::new();
        let mut lists = Vec::with_capacity(plan.ext.len());
        for row in batch.rows() {
            extend_row(row, plan, part, cache, &mut lists, &mut data)?;
        }
        let processed = (rows + data.len() / plan.out_arity()) as u64;
        return Ok(IntersectOutput {
            data,
            worker_processed: vec![processed],
            steals: 0,
        });
    }
    let chunk = chunk_rows(rows, workers);
    let per_worker = rows.div_ceil(workers);
    let deques: Vec<Mutex<VecDeque<(usize, usize)>>> = (0..workers)
        .map(|w| {
            let (a, b) = ((w * per_worker).min(rows), ((w + 1) * per_worker).min(rows));
            let mut d = VecDeque::new();
            let mut s = a;
            while s < b {
                d.push_back((s, (s + chunk).min(b)));
                s += chunk;
            }
            Mutex::new(d)
        })
        .collect();
    let results: Vec<Result<(Vec<VertexId>, u64, u64)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|me| {
                let deques = &deques;
                scope.spawn(move || -> Result<(Vec<VertexId>, u64, u64)> {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (me as u64).wrapping_mul(0x9E37));
                    let mut out = Vec::new();
                    let mut lists = Vec::with_capacity(plan.ext.len());
                    let (mut processed, mut steals) = (0u64, 0u64);
                    loop {
                        let own = deques[me].lock().expect("deque lock").pop_back();
                        let (a, b) = match own {
                            Some(c) => c,
                            None if intra_steal => match steal_half(deques, me, &mut rng) {
                                Some(c) => {
                                    steals += 1;
                                    c
                                }
                                None => break,
                            },
                            None => break,
                        };
                        let before = out.len();
                        for i in a..b {
                            extend_row(batch.row(i), plan, part, cache, &mut lists, &mut out)?;
                        }
                        processed += ((b - a) + (out.len() - before) / plan.out_arity()) as u64;
                    }
                    Ok((out, processed, steals))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Runtime("worker panicked".into()))))
            .collect()
    });
    let mut output = IntersectOutput::default();
    for r in results {
        let (data, processed, steals) = r?;
        if output.data.is_empty() {
            output.data = data;
        } else {
            output.data.extend_from_slice(&data);
        }
        output.worker_processed.push(processed);
        output.steals += steals;
    }
    Ok(output)
}

/// Moves half (rounded up) of a random non-empty peer deque, taken from its
/// front, into the thief's deque and returns one chunk to run now.
fn steal_half(
    deques: &[Mutex<VecDeque<(usize, usize)>>],
    me: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize)> {
    loop {
        let victims: Vec<usize> = (0..deques.len())
            .filter(|&w| w != me && !deques[w].lock().expect("deque lock").is_empty())
            .collect();
        if victims.is_empty() {
            return None;
        }
        let v = victims[rng.gen_range(0..victims.len())];
        let mut taken: Vec<(usize, usize)> = {
            let mut d = deques[v].lock().expect("deque lock");
            let n = d.len().div_ceil(2);
            d.drain(..n).collect()
        };
        let Some(first) = (!taken.is_empty()).then(|| taken.remove(0)) else {
            continue;
        };
        deques[me].lock().expect("deque lock").extend(taken);
        return Some(first);
    }
}

fn cmp_rows(a: &[VertexId], b: &[VertexId], key: &[usize]) -> Ordering {
    key.iter()
        .map(|&p| a[p].cmp(&b[p]))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.cmp(b))
}

fn cmp_keys(a: &[VertexId], ka: &[usize], b: &[VertexId], kb: &[usize]) -> Ordering {
    ka.iter()
        .zip(kb)
        .map(|(&pa, &pb)| a[pa].cmp(&b[pb]))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn sort_rows(data: &[VertexId], arity: usize, key: &[usize]) -> Vec<VertexId> {
    let mut idx: Vec<usize> = (0..data.len() / arity).collect();
    idx.sort_unstable_by(|&i, &j| {
        cmp_rows(&data[i * arity..(i + 1) * arity], &data[j * arity..(j + 1) * arity], key)
    });
    let mut out = Vec::with_capacity(data.len());
    for i in idx {
        out.extend_from_slice(&data[i * arity..(i + 1) * arity]);
    }
    out
}

/// One side of a push join: rows buffered in memory and spilled as sorted
/// little-endian runs once the buffer exceeds the threshold.
#[derive(Debug)]
pub struct JoinBuffer {
    arity: usize,
    key: Vec<usize>,
    mem: Vec<VertexId>,
    runs: Vec<File>,
    threshold: usize,
    spill_dir: Option<PathBuf>,
    rows: u64,
    peak_mem_bytes: usize,
}

impl JoinBuffer {
    pub fn new(arity: usize, key: Vec<usize>, threshold: usize, spill_dir: Option<PathBuf>) -> JoinBuffer {
        JoinBuffer {
            arity,
            key,
            mem: Vec::new(),
            runs: Vec::new(),
            threshold,
            spill_dir,
            rows: 0,
            peak_mem_bytes: 0,
        }
    }

    pub fn add(&mut self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        if batch.arity() != self.arity {
            return Err(Error::Runtime(format!(
                "join input arity {} but buffer expects {}",
                batch.arity(),
                self.arity
            )));
        }
        self.mem.extend_from_slice(batch.data());
        self.rows += batch.len() as u64;
        self.peak_mem_bytes = self.peak_mem_bytes.max(self.mem_bytes());
        if self.mem_bytes() > self.threshold {
            self.spill()?;
        }
        Ok(())
    }

    fn spill(&mut self) -> Result<()> {
        let sorted = sort_rows(&self.mem, self.arity, &self.key);
        self.mem.clear();
        let file = match &self.spill_dir {
            Some(d) => tempfile::tempfile_in(d),
            None => tempfile::tempfile(),
        }
        .map_err(Error::RawIo)?;
        let mut w = BufWriter::new(file);
        for v in &sorted {
            w.write_all(&v.to_le_bytes()).map_err(Error::RawIo)?;
        }
        let mut file = w.into_inner().map_err(|e| Error::RawIo(e.into_error()))?;
        file.seek(SeekFrom::Start(0)).map_err(Error::RawIo)?;
        self.runs.push(file);
        Ok(())
    }

    pub fn mem_bytes(&self) -> usize {
        self.mem.len() * 4
    }

    pub fn peak_mem_bytes(&self) -> usize {
        self.peak_mem_bytes
    }

    pub fn spilled_runs(&self) -> usize {
        self.runs.len()
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    /// Sorted stream over all runs plus the in-memory remainder.
    pub fn into_sorted(self) -> Result<SortedRows> {
        let mut sources: Vec<RunSource> = Vec::with_capacity(self.runs.len() + 1);
        for f in self.runs {
            sources.push(RunSource::file(f, self.arity)?);
        }
        sources.push(RunSource::mem(sort_rows(&self.mem, self.arity, &self.key), self.arity));
        Ok(SortedRows::new(sources, self.key))
    }
}

#[derive(Debug)]
enum RunSource {
    Mem { data: Vec<VertexId>, pos: usize, arity: usize },
    File { reader: BufReader<File>, current: Vec<VertexId>, live: bool },
}

impl RunSource {
    fn mem(data: Vec<VertexId>, arity: usize) -> RunSource {
        RunSource::Mem { data, pos: 0, arity }
    }

    fn file(f: File, arity: usize) -> Result<RunSource> {
        let mut s = RunSource::File {
            reader: BufReader::new(f),
            current: vec![0; arity],
            live: true,
        };
        s.advance()?;
        Ok(s)
    }

    fn current(&self) -> Option<&[VertexId]> {
        match self {
            RunSource::Mem { data, pos, arity } => (*pos < data.len()).then(|| &data[*pos..*pos + *arity]),
            RunSource::File { current, live, .. } => live.then_some(&current[..]),
        }
    }

    fn advance(&mut self) -> Result<()> {
        match self {
            RunSource::Mem { pos, arity, .. } => {
                *pos += *arity;
                Ok(())
            }
            RunSource::File { reader, current, live } => {
                let mut buf = [0u8; 4];
                for (i, slot) in current.iter_mut().enumerate() {
                    match reader.read_exact(&mut buf) {
                        Ok(()) => *slot = u32::from_le_bytes(buf),
                        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof && i == 0 => {
                            *live = false;
                            return Ok(());
                        }
                        Err(e) => return Err(Error::RawIo(e)),
                    }
                }
                Ok(())
            }
        }
    }
}

/// K-way merge of sorted runs through a loser tree. `tree[0]` holds the
/// winning source; `tree[1..]` hold the loser of each internal match.
#[derive(Debug)]
pub struct SortedRows {
    sources: Vec<RunSource>,
    tree: Vec<usize>,
    key: Vec<usize>,
}

/// Placeholder for a leaf smaller than every record during construction.
const VIRTUAL_MIN: usize = usize::MAX;

impl SortedRows {
    fn new(sources: Vec<RunSource>, key: Vec<usize>) -> SortedRows {
        let k = sources.len();
        let mut s = SortedRows {
            sources,
            tree: vec![VIRTUAL_MIN; k],
            key,
        };
        for i in (0..k).rev() {
            s.adjust(i);
        }
        s
    }

    /// Whether source `a` beats source `b`; exhausted sources lose.
    fn beats(&self, a: usize, b: usize) -> bool {
        if a == VIRTUAL_MIN {
            return true;
        }
        if b == VIRTUAL_MIN {
            return false;
        }
        match (self.sources[a].current(), self.sources[b].current()) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(x), Some(y)) => match cmp_rows(x, y, &self.key) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => a < b,
            },
        }
    }

    fn adjust(&mut self, leaf: usize) {
        let k = self.sources.len();
        let mut winner = leaf;
        let mut t = (leaf + k) / 2;
        while t > 0 {
            if self.beats(self.tree[t], winner) {
                std::mem::swap(&mut self.tree[t], &mut winner);
            }
            t /= 2;
        }
        self.tree[0] = winner;
    }

    pub fn peek(&self) -> Option<&[VertexId]> {
        let w = *self.tree.first()?;
        self.sources[w].current()
    }

    pub fn pop_into(&mut self, out: &mut Vec<VertexId>) -> Result<bool> {
        let Some(&w) = self.tree.first() else {
            return Ok(false);
        };
        match self.sources[w].current() {
            None => Ok(false),
            Some(row) => {
                out.extend_from_slice(row);
                self.sources[w].advance()?;
                self.adjust(w);
                Ok(true)
            }
        }
    }

    /// Drains the merge into one flat buffer.
    pub fn collect_all(mut self) -> Result<Vec<VertexId>> {
        let mut out = Vec::new();
        while self.pop_into(&mut out)? {}
        Ok(out)
    }
}

/// Merge join of two sorted sides, emitting `left ++ right_rest` for every
/// pair in each equal-key group.
#[derive(Debug)]
pub struct JoinStream {
    left: SortedRows,
    right: SortedRows,
    left_key: Vec<usize>,
    right_key: Vec<usize>,
    right_rest: Vec<usize>,
    filters: Vec<(usize, usize)>,
    la: usize,
    ra: usize,
    lg: Vec<VertexId>,
    rg: Vec<VertexId>,
    i: usize,
    j: usize,
    done: bool,
}

impl JoinStream {
    pub fn new(op: &OperatorSpec, left: JoinBuffer, right: JoinBuffer) -> Result<JoinStream> {
        let OperatorKind::PushJoin {
            left_key,
            right_key,
            right_rest,
        } = &op.kind
        else {
            return Err(Error::InvalidPlan(format!("operator {} is not a push join", op.id)));
        };
        let (la, ra) = (left.arity, right.arity);
        Ok(JoinStream {
            left: left.into_sorted()?,
            right: right.into_sorted()?,
            left_key: left_key.clone(),
            right_key: right_key.clone(),
            right_rest: right_rest.clone(),
            filters: op.filters.clone(),
            la,
            ra,
            lg: Vec::new(),
            rg: Vec::new(),
            i: 0,
            j: 0,
            done: false,
        })
    }

    pub fn out_arity(&self) -> usize {
        self.la + self.right_rest.len()
    }

    pub fn is_exhausted(&self) -> bool {
        self.done
    }

    /// Loads the next key group present on both sides.
    fn next_group(&mut self) -> Result<bool> {
        loop {
            let (Some(l), Some(r)) = (self.left.peek(), self.right.peek()) else {
                return Ok(false);
            };
            match cmp_keys(l, &self.left_key, r, &self.right_key) {
                Ordering::Less => {
                    let mut sink = Vec::new();
                    self.left.pop_into(&mut sink)?;
                }
                Ordering::Greater => {
                    let mut sink = Vec::new();
                    self.right.pop_into(&mut sink)?;
                }
                Ordering::Equal => break,
            }
        }
        self.lg.clear();
        self.rg.clear();
        let key: Vec<VertexId> = {
            let l = self.left.peek().expect("peeked");
            self.left_key.iter().map(|&p| l[p]).collect()
        };
        let same = |row: &[VertexId], kp: &[usize]| kp.iter().zip(&key).all(|(&p, &k)| row[p] == k);
        while self.left.peek().is_some_and(|r| same(r, &self.left_key)) {
            self.left.pop_into(&mut self.lg)?;
        }
        while self.right.peek().is_some_and(|r| same(r, &self.right_key)) {
            self.right.pop_into(&mut self.rg)?;
        }
        self.i = 0;
        self.j = 0;
        Ok(true)
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Option<Batch>> {
        let arity = self.out_arity();
        let mut out = Batch::new(arity);
        let mut row = vec![0; arity];
        while !self.done && out.len() < batch_size.max(1) {
            let (nl, nr) = (self.lg.len() / self.la, self.rg.len() / self.ra);
            if self.i >= nl {
                if !self.next_group()? {
                    self.done = true;
                }
                continue;
            }
            let l = &self.lg[self.i * self.la..(self.i + 1) * self.la];
            let r = &self.rg[self.j * self.ra..(self.j + 1) * self.ra];
            let injective = self.right_rest.iter().all(|&p| !l.contains(&r[p]))
                && !self.right_rest.iter().enumerate().any(|(x, &p)| {
                    self.right_rest[x + 1..].iter().any(|&p2| r[p2] == r[p])
                });
            if injective {
                row[..self.la].copy_from_slice(l);
                for (x, &p) in self.right_rest.iter().enumerate() {
                    row[self.la + x] = r[p];
                }
                if self.filters.iter().all(|&(a, b)| row[a] < row[b]) {
                    out.push(&row);
                }
            }
            self.j += 1;
            if self.j >= nr {
                self.j = 0;
                self.i += 1;
            }
        }
        Ok((!out.is_empty()).then_some(out))
    }
}

/// Where sunk results go.
#[derive(Debug)]
pub enum SinkTarget {
    Count,
    /// Shared writer; one space-separated line per result.
    File(Arc<Mutex<BufWriter<File>>>),
    Collect(Vec<Vec<VertexId>>),
}

#[derive(Debug)]
pub struct Sink {
    projection: Vec<usize>,
    target: SinkTarget,
    count: u64,
}

impl Sink {
    pub fn new(op: &OperatorSpec, target: SinkTarget) -> Result<Sink> {
        let OperatorKind::Sink { projection } = &op.kind else {
            return Err(Error::InvalidPlan(format!("operator {} is not a sink", op.id)));
        };
        Ok(Sink {
            projection: projection.clone(),
            target,
            count: 0,
        })
    }

    pub fn consume(&mut self, batch: &Batch) -> Result<()> {
        self.count += batch.len() as u64;
        match &mut self.target {
            SinkTarget::Count => {}
            SinkTarget::File(w) => {
                let mut text = String::new();
                for row in batch.rows() {
                    for (i, &p) in self.projection.iter().enumerate() {
                        if i > 0 {
                            text.push(' ');
                        }
                        text.push_str(&row[p].to_string());
                    }
                    text.push('\n');
                }
                w.lock()
                    .expect("sink lock")
                    .write_all(text.as_bytes())
                    .map_err(Error::RawIo)?;
            }
            SinkTarget::Collect(v) => {
                v.extend(batch.rows().map(|r| self.projection.iter().map(|&p| r[p]).collect()));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(self) -> Result<(u64, Option<Vec<Vec<VertexId>>>)> {
        match self.target {
            SinkTarget::File(w) => {
                w.lock().expect("sink lock").flush().map_err(Error::RawIo)?;
                Ok((self.count, None))
            }
            SinkTarget::Collect(v) => Ok((self.count, Some(v))),
            SinkTarget::Count => Ok((self.count, None)),
        }
    }
}
