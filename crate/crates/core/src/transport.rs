//! Node-to-node messaging: a fixed little-endian wire format shared by two
//! interchangeable backends, one in-process (N logical nodes in one process)
//! and one socket-based (one process per node).
//!
//! Both backends deliver exactly once and in per-(src,dst) FIFO order.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::taskgraph::{DataItem, Rank, TaskKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenColor {
    White,
    Black,
    /// Shutdown broadcast after termination is established.
    Stop,
}

/// One migrated task: key, priority, and a complete copy of every input.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    pub key: TaskKey,
    pub priority: i64,
    pub inputs: Vec<Arc<DataItem>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Activate { key: TaskKey, slot: u32, item: Arc<DataItem> },
    StealRequest { thief: Rank, request_id: u64 },
    StealGrant { request_id: u64, tasks: Vec<TaskRecord> },
    StealDeny { request_id: u64 },
    TermToken { color: TokenColor, count: i64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub src: Rank,
    pub dst: Rank,
    pub payload: Payload,
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("malformed frame: {0}")]
    MalformedFrame(&'static str),
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer {rank} down: {reason}")]
    PeerDown { rank: Rank, reason: String },
    #[error("destination rank {0} out of range")]
    BadRank(Rank),
}

// ---------------------------------------------------------------------------
// wire format

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::MalformedFrame("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn put_key(out: &mut Vec<u8>, key: &TaskKey) {
    out.extend_from_slice(&key.template_id.to_le_bytes());
    for i in key.index {
        out.extend_from_slice(&i.to_le_bytes());
    }
}

fn get_key(c: &mut Cursor) -> Result<TaskKey, CodecError> {
    let template_id = c.u16()?;
    let mut index = [0i64; 3];
    for slot in &mut index {
        *slot = c.i64()?;
    }
    Ok(TaskKey { template_id, index })
}

fn put_item(out: &mut Vec<u8>, item: &DataItem) {
    match item {
        DataItem::SparseMarker => out.push(0),
        DataItem::Dense { rows, cols, data } => {
            out.push(1);
            out.extend_from_slice(&rows.to_le_bytes());
            out.extend_from_slice(&cols.to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DataItem::UtsNode { depth, path } => {
            out.push(2);
            out.extend_from_slice(&depth.to_le_bytes());
            out.extend_from_slice(&path.to_le_bytes());
        }
    }
}

fn get_item(c: &mut Cursor) -> Result<DataItem, CodecError> {
    match c.u8()? {
        0 => Ok(DataItem::SparseMarker),
        1 => {
            let rows = c.u32()?;
            let cols = c.u32()?;
            let n = rows as usize * cols as usize;
            if n > 1 << 28 {
                return Err(CodecError::MalformedFrame("oversized dense tile"));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_bits(c.u64()?));
            }
            Ok(DataItem::Dense { rows, cols, data })
        }
        2 => {
            let depth = c.u32()?;
            let path = c.u64()?;
            Ok(DataItem::UtsNode { depth, path })
        }
        _ => Err(CodecError::MalformedFrame("unknown data item tag")),
    }
}

/// Encode a message as one length-prefixed frame:
/// `[body_len: u32][kind: u8][src: u32][dst: u32][payload]`, all little-endian.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut body = Vec::new();
    let kind: u8 = match msg.payload {
        Payload::Activate { .. } => 0,
        Payload::StealRequest { .. } => 1,
        Payload::StealGrant { .. } => 2,
        Payload::StealDeny { .. } => 3,
        Payload::TermToken { .. } => 4,
    };
    body.push(kind);
    body.extend_from_slice(&msg.src.to_le_bytes());
    body.extend_from_slice(&msg.dst.to_le_bytes());
    match &msg.payload {
        Payload::Activate { key, slot, item } => {
            put_key(&mut body, key);
            body.extend_from_slice(&slot.to_le_bytes());
            put_item(&mut body, item);
        }
        Payload::StealRequest { thief, request_id } => {
            body.extend_from_slice(&thief.to_le_bytes());
            body.extend_from_slice(&request_id.to_le_bytes());
        }
        Payload::StealGrant { request_id, tasks } => {
            body.extend_from_slice(&request_id.to_le_bytes());
            body.extend_from_slice(&(tasks.len() as u32).to_le_bytes());
            for t in tasks {
                put_key(&mut body, &t.key);
                body.extend_from_slice(&t.priority.to_le_bytes());
                body.extend_from_slice(&(t.inputs.len() as u32).to_le_bytes());
                for item in &t.inputs {
                    put_item(&mut body, item);
                }
            }
        }
        Payload::StealDeny { request_id } => {
            body.extend_from_slice(&request_id.to_le_bytes());
        }
        Payload::TermToken { color, count } => {
            body.push(match color {
                TokenColor::White => 0,
                TokenColor::Black => 1,
                TokenColor::Stop => 2,
            });
            body.extend_from_slice(&count.to_le_bytes());
        }
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
    frame.extend_from_slice(&body);
    frame
}

/// Decode one complete frame produced by [`encode`].
pub fn decode(frame: &[u8]) -> Result<Message, CodecError> {
    let mut c = Cursor { buf: frame, pos: 0 };
    let body_len = c.u32()? as usize;
    if frame.len() != 4 + body_len {
        return Err(CodecError::MalformedFrame("length prefix mismatch"));
    }
    let kind = c.u8()?;
    let src = c.u32()?;
    let dst = c.u32()?;
    let payload = match kind {
        0 => {
            let key = get_key(&mut c)?;
            let slot = c.u32()?;
            let item = Arc::new(get_item(&mut c)?);
            Payload::Activate { key, slot, item }
        }
        1 => {
            let thief = c.u32()?;
            let request_id = c.u64()?;
            Payload::StealRequest { thief, request_id }
        }
        2 => {
            let request_id = c.u64()?;
            let n = c.u32()? as usize;
            let mut tasks = Vec::with_capacity(n);
            for _ in 0..n {
                let key = get_key(&mut c)?;
                let priority = c.i64()?;
                let n_in = c.u32()? as usize;
                let mut inputs = Vec::with_capacity(n_in);
                for _ in 0..n_in {
                    inputs.push(Arc::new(get_item(&mut c)?));
                }
                tasks.push(TaskRecord { key, priority, inputs });
            }
            Payload::StealGrant { request_id, tasks }
        }
        3 => {
            let request_id = c.u64()?;
            Payload::StealDeny { request_id }
        }
        4 => {
            let color = match c.u8()? {
                0 => TokenColor::White,
                1 => TokenColor::Black,
                2 => TokenColor::Stop,
                _ => return Err(CodecError::MalformedFrame("unknown token color")),
            };
            let count = c.i64()?;
            Payload::TermToken { color, count }
        }
        _ => return Err(CodecError::MalformedFrame("unknown message kind")),
    };
    if c.pos != frame.len() {
        return Err(CodecError::MalformedFrame("trailing bytes"));
    }
    Ok(Message { src, dst, payload })
}

// ---------------------------------------------------------------------------
// backends

pub trait Transport: Send + Sync {
    fn rank(&self) -> Rank;
    fn nodes(&self) -> u32;
    /// Queue a message for exactly-once, per-pair FIFO delivery.
    fn send(&self, msg: &Message) -> Result<(), TransportError>;
    /// Blocking receive with timeout; called only by the node's single
    /// communication agent.
    fn recv_timeout(&self, timeout: Duration) -> Option<Message>;
}

/// In-process backend: every node is a set of threads in the same process and
/// messages travel through channels. Frames are still encoded and decoded so
/// both backends exercise the identical wire format.
pub struct InprocTransport {
    rank: Rank,
    senders: Vec<Sender<Vec<u8>>>,
    receiver: Mutex<Receiver<Vec<u8>>>,
}

impl InprocTransport {
    /// Build one endpoint per node.
    pub fn mesh(nodes: u32) -> Vec<InprocTransport> {
        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        for _ in 0..nodes {
            let (tx, rx) = std::sync::mpsc::channel();
            senders.push(tx);
            receivers.push(rx);
        }
        receivers
            .into_iter()
            .enumerate()
            .map(|(rank, rx)| InprocTransport {
                rank: rank as Rank,
                senders: senders.clone(),
                receiver: Mutex::new(rx),
            })
            .collect()
    }
}

impl Transport for InprocTransport {
    fn rank(&self) -> Rank {
        self.rank
    }
    fn nodes(&self) -> u32 {
        self.senders.len() as u32
    }
    fn send(&self, msg: &Message) -> Result<(), TransportError> {
        let dst = msg.dst as usize;
        if dst >= self.senders.len() {
            return Err(TransportError::BadRank(msg.dst));
        }
        self.senders[dst]
            .send(encode(msg))
            .map_err(|_| TransportError::PeerDown { rank: msg.dst, reason: "channel closed".into() })
    }
    fn recv_timeout(&self, timeout: Duration) -> Option<Message> {
        let rx = self.receiver.lock().unwrap();
        match rx.recv_timeout(timeout) {
            Ok(frame) => Some(decode(&frame).expect("inproc peer sent malformed frame")),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => None,
        }
    }
}

/// Socket backend: one endpoint per process, addresses from a hostfile with
/// one `rank host:port` line per node. Outbound streams are created lazily
/// and kept open, which preserves per-pair FIFO order.
pub struct SocketTransport {
    rank: Rank,
    addrs: Vec<String>,
    streams: Vec<Mutex<Option<TcpStream>>>,
    inbox_tx: Sender<Vec<u8>>,
    inbox_rx: Mutex<Receiver<Vec<u8>>>,
    closed: Arc<AtomicBool>,
}

/// Parse hostfile text: one `rank host:port` line per node, `#` comments.
pub fn parse_hostfile(text: &str) -> Result<Vec<String>, String> {
    let mut entries: Vec<(u32, String)> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let rank: u32 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad hostfile line: {line}"))?;
        let addr = parts.next().ok_or_else(|| format!("bad hostfile line: {line}"))?;
        entries.push((rank, addr.to_string()));
    }
    entries.sort_by_key(|e| e.0);
    for (i, (rank, _)) in entries.iter().enumerate() {
        if *rank as usize != i {
            return Err(format!("hostfile ranks must be dense from 0, got {rank}"));
        }
    }
    Ok(entries.into_iter().map(|e| e.1).collect())
}

impl SocketTransport {
    /// Bind this rank's listener (honoring the `STEALFLOW_BIND` override) and
    /// start the acceptor. Outbound connections happen lazily on first send.
    pub fn bind(rank: Rank, addrs: Vec<String>) -> Result<SocketTransport, TransportError> {
        let bind_addr = std::env::var("STEALFLOW_BIND")
            .unwrap_or_else(|_| addrs[rank as usize].clone());
        let listener = TcpListener::bind(&bind_addr).map_err(|e| TransportError::PeerDown {
            rank,
            reason: format!("bind {bind_addr}: {e}"),
        })?;
        listener.set_nonblocking(true).unwrap();
        let (inbox_tx, inbox_rx) = std::sync::mpsc::channel::<Vec<u8>>();
        let closed = Arc::new(AtomicBool::new(false));
        {
            let tx = inbox_tx.clone();
            let closed = closed.clone();
            std::thread::Builder::new()
                .name(format!("accept-r{rank}"))
                .spawn(move || {
                    while !closed.load(Ordering::SeqCst) {
                        match listener.accept() {
                            Ok((stream, _)) => {
                                stream.set_nonblocking(false).unwrap();
                                let tx = tx.clone();
                                std::thread::spawn(move || read_frames(stream, tx));
                            }
                            Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                                std::thread::sleep(Duration::from_millis(1));
                            }
                            Err(_) => break,
                        }
                    }
                })
                .unwrap();
        }
        let streams = (0..addrs.len()).map(|_| Mutex::new(None)).collect();
        Ok(SocketTransport {
            rank,
            addrs,
            streams,
            inbox_tx,
            inbox_rx: Mutex::new(inbox_rx),
            closed,
        })
    }
}

fn read_frames(mut stream: TcpStream, tx: Sender<Vec<u8>>) {
    loop {
        let mut len_buf = [0u8; 4];
        if stream.read_exact(&mut len_buf).is_err() {
            return; // peer closed
        }
        let body_len = u32::from_le_bytes(len_buf) as usize;
        let mut frame = vec![0u8; 4 + body_len];
        frame[..4].copy_from_slice(&len_buf);
        if stream.read_exact(&mut frame[4..]).is_err() {
            return;
        }
        if tx.send(frame).is_err() {
            return;
        }
    }
}

impl Transport for SocketTransport {
    fn rank(&self) -> Rank {
        self.rank
    }
    fn nodes(&self) -> u32 {
        self.addrs.len() as u32
    }
    fn send(&self, msg: &Message) -> Result<(), TransportError> {
        let dst = msg.dst as usize;
        if dst >= self.addrs.len() {
            return Err(TransportError::BadRank(msg.dst));
        }
        let frame = encode(msg);
        if msg.dst == self.rank {
            // loopback still goes through the inbox queue like remote traffic
            self.inbox_tx.send(frame).map_err(|_| TransportError::PeerDown {
                rank: self.rank,
                reason: "inbox closed".into(),
            })?;
            return Ok(());
        }
        let mut guard = self.streams[dst].lock().unwrap();
        if guard.is_none() {
            let deadline = std::time::Instant::now() + Duration::from_secs(10);
            loop {
                match TcpStream::connect(&self.addrs[dst]) {
                    Ok(s) => {
                        s.set_nodelay(true).ok();
                        *guard = Some(s);
                        break;
                    }
                    Err(e) => {
                        if std::time::Instant::now() > deadline {
                            return Err(TransportError::PeerDown {
                                rank: msg.dst,
                                reason: format!("connect {}: {e}", self.addrs[dst]),
                            });
                        }
                        std::thread::sleep(Duration::from_millis(5));
                    }
                }
            }
        }
        let stream = guard.as_mut().unwrap();
        stream.write_all(&frame).map_err(|e| TransportError::PeerDown {
            rank: msg.dst,
            reason: format!("write: {e}"),
        })
    }
    fn recv_timeout(&self, timeout: Duration) -> Option<Message> {
        let rx = self.inbox_rx.lock().unwrap();
        match rx.recv_timeout(timeout) {
            Ok(frame) => Some(decode(&frame).expect("socket peer sent malformed frame")),
            Err(_) => None,
        }
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        self.closed.store(true, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(msg: Message) {
        let frame = encode(&msg);
        assert_eq!(decode(&frame).unwrap(), msg);
    }

    #[test]
    fn deny_roundtrip_minimal() {
        let msg = Message {
            src: 3,
            dst: 1,
            payload: Payload::StealDeny { request_id: 42 },
        };
        let frame = encode(&msg);
        // header-only minimum: len + kind + src + dst + request id
        assert_eq!(frame.len(), 4 + 1 + 4 + 4 + 8);
        assert_eq!(decode(&frame).unwrap(), msg);
    }

    #[test]
    fn activate_with_50x50_tile() {
        let data: Vec<f64> = (0..2500).map(|i| i as f64 * 0.25).collect();
        let msg = Message {
            src: 0,
            dst: 1,
            payload: Payload::Activate {
                key: TaskKey::k2(1, 3, 4),
                slot: 2,
                item: Arc::new(DataItem::dense(50, 50, data)),
            },
        };
        let frame = encode(&msg);
        assert!(frame.len() >= 20_000);
        roundtrip(msg);
    }

    #[test]
    fn grant_with_three_arity3_records() {
        let tile = |v: f64| Arc::new(DataItem::dense(2, 2, vec![v, v + 1.0, v + 2.0, v + 3.0]));
        let tasks: Vec<TaskRecord> = (0..3)
            .map(|i| TaskRecord {
                key: TaskKey::k3(2, i, i + 1, i + 2),
                priority: -i,
                inputs: vec![tile(i as f64), tile(10.0 + i as f64), tile(20.0 + i as f64)],
            })
            .collect();
        let msg = Message { src: 1, dst: 0, payload: Payload::StealGrant { request_id: 9, tasks } };
        let frame = encode(&msg);
        let back = decode(&frame).unwrap();
        assert_eq!(back, msg);
        if let Payload::StealGrant { tasks, .. } = back.payload {
            assert_eq!(tasks.iter().map(|t| t.inputs.len()).sum::<usize>(), 9);
        }
    }

    #[test]
    fn truncated_frame_is_malformed() {
        let msg = Message {
            src: 0,
            dst: 0,
            payload: Payload::TermToken { color: TokenColor::White, count: 5 },
        };
        let frame = encode(&msg);
        for cut in 0..frame.len() {
            assert!(decode(&frame[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn inproc_fifo_order_10k() {
        let mesh = InprocTransport::mesh(2);
        let sender = &mesh[0];
        for seq in 0..10_000i64 {
            sender
                .send(&Message {
                    src: 0,
                    dst: 1,
                    payload: Payload::Activate {
                        key: TaskKey::k1(0, seq),
                        slot: 0,
                        item: Arc::new(DataItem::SparseMarker),
                    },
                })
                .unwrap();
        }
        for seq in 0..10_000i64 {
            let msg = mesh[1].recv_timeout(Duration::from_secs(1)).unwrap();
            match msg.payload {
                Payload::Activate { key, .. } => assert_eq!(key.index[0], seq),
                _ => panic!("wrong kind"),
            }
        }
    }

    #[test]
    fn inproc_loopback() {
        let mesh = InprocTransport::mesh(1);
        let msg = Message {
            src: 0,
            dst: 0,
            payload: Payload::StealDeny { request_id: 1 },
        };
        mesh[0].send(&msg).unwrap();
        assert_eq!(mesh[0].recv_timeout(Duration::from_secs(1)).unwrap(), msg);
        assert!(mesh[0].recv_timeout(Duration::from_millis(10)).is_none());
    }

    fn free_addrs(n: usize) -> Vec<String> {
        (0..n)
            .map(|_| {
                let l = TcpListener::bind("127.0.0.1:0").unwrap();
                let addr = l.local_addr().unwrap().to_string();
                drop(l);
                addr
            })
            .collect()
    }

    #[test]
    fn socket_smoke_and_fifo() {
        let addrs = free_addrs(2);
        let t0 = SocketTransport::bind(0, addrs.clone()).unwrap();
        let t1 = SocketTransport::bind(1, addrs).unwrap();
        for seq in 0..1000i64 {
            t0.send(&Message {
                src: 0,
                dst: 1,
                payload: Payload::StealRequest { thief: 0, request_id: seq as u64 },
            })
            .unwrap();
        }
        for seq in 0..1000u64 {
            let msg = t1.recv_timeout(Duration::from_secs(5)).expect("timeout");
            match msg.payload {
                Payload::StealRequest { request_id, .. } => assert_eq!(request_id, seq),
                _ => panic!("wrong kind"),
            }
        }
        // loopback path
        let msg = Message { src: 1, dst: 1, payload: Payload::StealDeny { request_id: 7 } };
        t1.send(&msg).unwrap();
        assert_eq!(t1.recv_timeout(Duration::from_secs(1)).unwrap(), msg);
    }

    #[test]
    fn parse_hostfile_lines() {
        let text = "# comment\n0 127.0.0.1:7000\n1 127.0.0.1:7001\n";
        assert_eq!(
            parse_hostfile(text).unwrap(),
            vec!["127.0.0.1:7000".to_string(), "127.0.0.1:7001".to_string()]
        );
        assert!(parse_hostfile("0 a:1\n2 b:2\n").is_err());
    }
}
