//! Messages between machines, their frame encoding, the push router hash,
//! and the in-process and TCP transports.
//!
//! A frame is a little-endian `u32` body length followed by the body:
//! `u64` correlation id, `u32` source machine, one kind byte, then the
//! payload. Payload integers and vertex lists are LEB128 varints.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::operators::Batch;
use crate::VertexId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    GetNbrsRequest { vertices: Vec<VertexId> },
    /// Lists in request order.
    GetNbrsResponse { lists: Vec<Vec<VertexId>> },
    StealRequest { subplan: u32 },
    /// `operator` is the consumer of the stolen batches; `None` when empty.
    StealResponse { operator: Option<u32>, batches: Vec<Batch> },
    /// Routed input for a push join. `subplan` is the producing subplan.
    Push {
        operator: u32,
        side: u8,
        subplan: u32,
        batch: Batch,
    },
    /// The sender has drained its own work for `subplan`.
    Done { subplan: u32 },
    /// Coordinator broadcast of the machines done with `subplan`.
    FinishedList { subplan: u32, machines: Vec<u32> },
    /// The sender will do no more work for `subplan`; `pushes_sent[d]`
    /// counts push messages it sent to machine `d`.
    Terminated { subplan: u32, pushes_sent: Vec<u64> },
    /// Coordinator release of the barrier after `subplan`, with the number
    /// of pushes the recipient must have received.
    SubplanComplete { subplan: u32, expected_pushes: u64 },
    /// Final per-machine metrics sent to the coordinator.
    Report { count: u64, metrics_json: String },
    Error { message: String },
    /// Local request for the dispatcher to exit.
    Stop,
}

impl Message {
    fn kind(&self) -> u8 {
        match self {
            Message::GetNbrsRequest { .. } => 1,
            Message::GetNbrsResponse { .. } => 2,
            Message::StealRequest { .. } => 3,
            Message::StealResponse { .. } => 4,
            Message::Push { .. } => 5,
            Message::Done { .. } => 6,
            Message::FinishedList { .. } => 7,
            Message::Terminated { .. } => 8,
            Message::SubplanComplete { .. } => 9,
            Message::Report { .. } => 10,
            Message::Error { .. } => 11,
            Message::Stop => 12,
        }
    }

    pub fn is_push(&self) -> bool {
        matches!(self, Message::Push { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub correlation: u64,
    pub source: u32,
    pub message: Message,
}

fn put_varint(out: &mut Vec<u8>, mut x: u64) {
    while x >= 0x80 {
        out.push((x as u8) | 0x80);
        x >>= 7;
    }
    out.push(x as u8);
}

fn put_list(out: &mut Vec<u8>, xs: &[u32]) {
    put_varint(out, xs.len() as u64);
    for &x in xs {
        put_varint(out, x as u64);
    }
}

fn put_batch(out: &mut Vec<u8>, b: &Batch) {
    put_varint(out, b.arity() as u64);
    put_list(out, b.data());
}

fn put_bytes(out: &mut Vec<u8>, s: &[u8]) {
    put_varint(out, s.len() as u64);
    out.extend_from_slice(s);
}

/// Encodes a full frame, length prefix included.
pub fn encode(env: &Envelope) -> Vec<u8> {
    let mut out = vec![0u8; 4];
    out.extend_from_slice(&env.correlation.to_le_bytes());
    out.extend_from_slice(&env.source.to_le_bytes());
    out.push(env.message.kind());
    match &env.message {
        Message::GetNbrsRequest { vertices } => put_list(&mut out, vertices),
        Message::GetNbrsResponse { lists } => {
            put_varint(&mut out, lists.len() as u64);
            for l in lists {
                put_list(&mut out, l);
            }
        }
        Message::StealRequest { subplan } | Message::Done { subplan } => {
            put_varint(&mut out, *subplan as u64)
        }
        Message::StealResponse { operator, batches } => {
            put_varint(&mut out, operator.map_or(0, |o| o as u64 + 1));
            put_varint(&mut out, batches.len() as u64);
            for b in batches {
                put_batch(&mut out, b);
            }
        }
        Message::Push {
            operator,
            side,
            subplan,
            batch,
        } => {
            put_varint(&mut out, *operator as u64);
            out.push(*side);
            put_varint(&mut out, *subplan as u64);
            put_batch(&mut out, batch);
        }
        Message::FinishedList { subplan, machines } => {
            put_varint(&mut out, *subplan as u64);
            put_list(&mut out, machines);
        }
        Message::Terminated { subplan, pushes_sent } => {
            put_varint(&mut out, *subplan as u64);
            put_varint(&mut out, pushes_sent.len() as u64);
            for &p in pushes_sent {
                put_varint(&mut out, p);
            }
        }
        Message::SubplanComplete {
            subplan,
            expected_pushes,
        } => {
            put_varint(&mut out, *subplan as u64);
            put_varint(&mut out, *expected_pushes);
        }
        Message::Report {
            count,
            metrics_json,
        } => {
            put_varint(&mut out, *count);
            put_bytes(&mut out, metrics_json.as_bytes());
        }
        Message::Error { message } => put_bytes(&mut out, message.as_bytes()),
        Message::Stop => {}
    }
    let body = (out.len() - 4) as u32;
    out[..4].copy_from_slice(&body.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn wire(msg: &str) -> Error {
    Error::Wire(msg.to_string())
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| wire("truncated frame"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn varint(&mut self) -> Result<u64> {
        let mut x = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            x |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(x);
            }
        }
        Err(wire("varint too long"))
    }

    fn u32v(&mut self) -> Result<u32> {
        u32::try_from(self.varint()?).map_err(|_| wire("value exceeds u32"))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.varint()? as usize;
        if n > self.buf.len() - self.pos {
            return Err(wire("length exceeds frame"));
        }
        Ok(n)
    }

    fn list(&mut self) -> Result<Vec<u32>> {
        let n = self.len()?;
        (0..n).map(|_| self.u32v()).collect()
    }

    fn batch(&mut self) -> Result<Batch> {
        let arity = self.varint()? as usize;
        let data = self.list()?;
        if arity == 0 || data.len() % arity != 0 {
            return Err(wire("ragged batch"));
        }
        Ok(Batch::from_data(arity, data))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| wire("invalid utf-8"))
    }
}

/// Decodes a frame produced by [`encode`].
pub fn decode(frame: &[u8]) -> Result<Envelope> {
    if frame.len() < 4 {
        return Err(wire("missing length prefix"));
    }
    let body = u32::from_le_bytes(frame[..4].try_into().expect("4 bytes")) as usize;
    if body != frame.len() - 4 {
        return Err(wire("length prefix mismatch"));
    }
    let mut r = Reader { buf: frame, pos: 4 };
    let correlation = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let source = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    let message = match r.u8()? {
        1 => Message::GetNbrsRequest { vertices: r.list()? },
        2 => {
            let n = r.len()?;
            Message::GetNbrsResponse {
                lists: (0..n).map(|_| r.list()).collect::<Result<_>>()?,
            }
        }
        3 => Message::StealRequest { subplan: r.u32v()? },
        4 => {
            let op = r.varint()?;
            let n = r.len()?;
            Message::StealResponse {
                operator: (op > 0).then(|| (op - 1) as u32),
                batches: (0..n).map(|_| r.batch()).collect::<Result<_>>()?,
            }
        }
        5 => Message::Push {
            operator: r.u32v()?,
            side: r.u8()?,
            subplan: r.u32v()?,
            batch: r.batch()?,
        },
        6 => Message::Done { subplan: r.u32v()? },
        7 => Message::FinishedList {
            subplan: r.u32v()?,
            machines: r.list()?,
        },
        8 => {
            let subplan = r.u32v()?;
            let n = r.len()?;
            Message::Terminated {
                subplan,
                pushes_sent: (0..n).map(|_| r.varint()).collect::<Result<_>>()?,
            }
        }
        9 => Message::SubplanComplete {
            subplan: r.u32v()?,
            expected_pushes: r.varint()?,
        },
        10 => Message::Report {
            count: r.varint()?,
            metrics_json: r.string()?,
        },
        11 => Message::Error { message: r.string()? },
        12 => Message::Stop,
        k => return Err(Error::Wire(format!("unknown message kind {k}"))),
    };
    if r.pos != frame.len() {
        return Err(wire("trailing bytes"));
    }
    Ok(Envelope {
        correlation,
        source,
        message,
    })
}

/// Destination machine of a routed result with the given key values.
pub fn route(key: &[VertexId], machines: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &v in key {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h ^= h >> 29;
    (h % machines as u64) as usize
}

/// Delivers encoded frames to machines. Sending to oneself must bypass the
/// network and land in the local inbox.
pub trait Transport: Send + Sync {
    fn send(&self, to: usize, frame: Vec<u8>) -> Result<()>;
}

/// Inbox of frames for one machine.
pub type Inbox = Receiver<Vec<u8>>;

pub struct InProcessTransport {
    inboxes: Vec<Sender<Vec<u8>>>,
}

impl Transport for InProcessTransport {
    fn send(&self, to: usize, frame: Vec<u8>) -> Result<()> {
        self.inboxes
            .get(to)
            .ok_or_else(|| Error::Transport(format!("no machine {to}")))?
            .send(frame)
            .map_err(|_| Error::Transport(format!("machine {to} has shut down")))
    }
}

/// `k` connected in-process endpoints.
pub fn in_process_network(k: usize) -> Vec<(Arc<dyn Transport>, Inbox)> {
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..k).map(|_| mpsc::channel()).unzip();
    let shared = Arc::new(InProcessTransport { inboxes: txs });
    rxs.into_iter()
        .map(|rx| (shared.clone() as Arc<dyn Transport>, rx))
        .collect()
}

const SEND_RETRIES: u32 = 3;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(30);

/// One machine's TCP endpoint: an outgoing stream per peer and a reader
/// thread per incoming stream, all feeding the inbox.
pub struct TcpTransport {
    id: usize,
    peers: Vec<SocketAddr>,
    outgoing: Vec<Option<Mutex<TcpStream>>>,
    local: Sender<Vec<u8>>,
    shutdown: Arc<AtomicBool>,
}

fn connect(addr: SocketAddr, id: usize, deadline: Instant) -> Result<TcpStream> {
    let mut wait = Duration::from_millis(5);
    loop {
        match TcpStream::connect(addr) {
            Ok(mut s) => {
                s.set_nodelay(true).map_err(Error::RawIo)?;
                s.write_all(&(id as u32).to_le_bytes()).map_err(Error::RawIo)?;
                return Ok(s);
            }
            Err(e) if Instant::now() >= deadline => {
                return Err(Error::Transport(format!("connect to {addr}: {e}")))
            }
            Err(_) => {
                thread::sleep(wait);
                wait = (wait * 2).min(Duration::from_millis(200));
            }
        }
    }
}

fn read_frames(mut s: TcpStream, inbox: Sender<Vec<u8>>) {
    let mut id = [0u8; 4];
    if s.read_exact(&mut id).is_err() {
        return;
    }
    loop {
        let mut len = [0u8; 4];
        if s.read_exact(&mut len).is_err() {
            return;
        }
        let n = u32::from_le_bytes(len) as usize;
        let mut frame = vec![0u8; 4 + n];
        frame[..4].copy_from_slice(&len);
        if s.read_exact(&mut frame[4..]).is_err() || inbox.send(frame).is_err() {
            return;
        }
    }
}

impl TcpTransport {
    /// Starts accepting on `listener` and connects to every other peer.
    /// `peers[i]` is machine `i`'s listen address.
    pub fn start(id: usize, listener: TcpListener, peers: Vec<SocketAddr>) -> Result<(Arc<TcpTransport>, Inbox)> {
        let (tx, rx) = mpsc::channel();
        let shutdown = Arc::new(AtomicBool::new(false));
        listener.set_nonblocking(true).map_err(Error::RawIo)?;
        {
            let tx = tx.clone();
            let shutdown = shutdown.clone();
            thread::spawn(move || {
                while !shutdown.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((s, _)) => {
                            let tx = tx.clone();
                            if s.set_nonblocking(false).is_ok() {
                                thread::spawn(move || read_frames(s, tx));
                            }
                        }
                        Err(_) => thread::sleep(Duration::from_millis(2)),
                    }
                }
            });
        }
        let deadline = Instant::now() + CONNECT_TIMEOUT;
        let outgoing = peers
            .iter()
            .enumerate()
            .map(|(j, &addr)| {
                if j == id {
                    Ok(None)
                } else {
                    connect(addr, id, deadline).map(|s| Some(Mutex::new(s)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Arc::new(TcpTransport {
                id,
                peers,
                outgoing,
                local: tx,
                shutdown,
            }),
            rx,
        ))
    }
}

impl Transport for TcpTransport {
    fn send(&self, to: usize, frame: Vec<u8>) -> Result<()> {
        if to == self.id {
            return self
                .local
                .send(frame)
                .map_err(|_| Error::Transport("local inbox closed".into()));
        }
        let conn = self
            .outgoing
            .get(to)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Transport(format!("no machine {to}")))?;
        let mut stream = conn.lock().expect("stream lock");
        let mut backoff = Duration::from_millis(10);
        let mut last = None;
        for attempt in 0..=SEND_RETRIES {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff *= 2;
                match connect(self.peers[to], self.id, Instant::now() + backoff) {
                    Ok(s) => *stream = s,
                    Err(e) => {
                        last = Some(e.to_string());
                        continue;
                    }
                }
            }
            match stream.write_all(&frame) {
                Ok(()) => return Ok(()),
                Err(e) => last = Some(e.to_string()),
            }
        }
        Err(Error::Transport(format!(
            "send to machine {to} failed after {SEND_RETRIES} retries: {}",
            last.unwrap_or_default()
        )))
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        for s in self.outgoing.iter().flatten() {
            if let Ok(s) = s.lock() {
                let _ = s.shutdown(Shutdown::Write);
            }
        }
    }
}

/// Binds `k` localhost listeners and starts a TCP endpoint on each.
pub fn tcp_local_network(k: usize) -> Result<Vec<(Arc<dyn Transport>, Inbox)>> {
    let listeners = (0..k)
        .map(|_| TcpListener::bind("127.0.0.1:0").map_err(Error::RawIo))
        .collect::<Result<Vec<_>>>()?;
    let addrs = listeners
        .iter()
        .map(|l| l.local_addr().map_err(Error::RawIo))
        .collect::<Result<Vec<_>>>()?;
    listeners
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let (t, rx) = TcpTransport::start(i, l, addrs.clone())?;
            Ok((t as Arc<dyn Transport>, rx))
        })
        .collect()
}
