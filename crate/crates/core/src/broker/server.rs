//! Topic pub/sub broker over TCP.
//!
//! Each connection gets a reader thread (this one, parsing and routing) and
//! a writer thread draining an unbounded outbound queue, so a slow
//! subscriber never stalls another connection's reader. Delivery order is
//! the order in which one connection's publishes were routed.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use super::protocol::{
    check_topic, read_frame_bytes, BrokerMessage, ErrorCode, Frame, FrameType, ProtocolError, DEFAULT_MAX_PAYLOAD,
    FRAME_OVERHEAD,
};

#[derive(Debug, Clone, Copy)]
pub struct BrokerConfig {
    pub max_payload: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

type Outbound = Sender<Arc<Vec<u8>>>;

#[derive(Default)]
struct Routes {
    topics: RwLock<HashMap<String, Vec<(u64, Outbound)>>>,
}

impl Routes {
    fn subscribe(&self, topic: &str, id: u64, out: &Outbound) {
        let mut t = self.topics.write().unwrap();
        let subs = t.entry(topic.to_string()).or_default();
        if !subs.iter().any(|(i, _)| *i == id) {
            subs.push((id, out.clone()));
        }
    }

    fn unsubscribe(&self, topic: &str, id: u64) {
        let mut t = self.topics.write().unwrap();
        if let Some(subs) = t.get_mut(topic) {
            subs.retain(|(i, _)| *i != id);
            if subs.is_empty() {
                t.remove(topic);
            }
        }
    }

    fn drop_client(&self, id: u64) {
        let mut t = self.topics.write().unwrap();
        t.retain(|_, subs| {
            subs.retain(|(i, _)| *i != id);
            !subs.is_empty()
        });
    }

    /// Returns the number of subscribers the frame was queued to.
    fn route(&self, topic: &str, frame: Arc<Vec<u8>>) -> usize {
        let t = self.topics.read().unwrap();
        let Some(subs) = t.get(topic) else {
            return 0;
        };
        subs.iter().filter(|(_, tx)| tx.send(frame.clone()).is_ok()).count()
    }
}

#[derive(Debug, Default)]
pub struct BrokerStats {
    pub connections: AtomicU64,
    pub published: AtomicU64,
    pub delivered: AtomicU64,
}

struct Shared {
    config: BrokerConfig,
    routes: Routes,
    next_id: AtomicU64,
    stopping: AtomicBool,
    streams: Mutex<HashMap<u64, TcpStream>>,
    stats: BrokerStats,
}

/// A running broker. Dropping it shuts the listener and all connections.
pub struct Broker {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl Broker {
    pub fn bind(addr: impl ToSocketAddrs, config: BrokerConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            config,
            routes: Routes::default(),
            next_id: AtomicU64::new(1),
            stopping: AtomicBool::new(false),
            streams: Mutex::new(HashMap::new()),
            stats: BrokerStats::default(),
        });
        let s = shared.clone();
        let accept = std::thread::Builder::new()
            .name("broker-accept".into())
            .spawn(move || accept_loop(listener, s))?;
        Ok(Self {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &BrokerStats {
        &self.shared.stats
    }

    /// Blocks until the broker is shut down from another thread.
    pub fn join(mut self) {
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.shared.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        for s in self.shared.streams.lock().unwrap().values() {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for conn in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = conn else { continue };
        let s = shared.clone();
        let _ = std::thread::Builder::new()
            .name("broker-conn".into())
            .spawn(move || serve_connection(stream, s));
    }
}

fn writer_loop(stream: TcpStream, rx: Receiver<Arc<Vec<u8>>>) {
    let mut w = BufWriter::with_capacity(64 * 1024, stream);
    while let Ok(first) = rx.recv() {
        if w.write_all(&first).is_err() {
            return;
        }
        // Coalesce whatever is already queued before flushing.
        while let Ok(more) = rx.try_recv() {
            if w.write_all(&more).is_err() {
                return;
            }
        }
        if w.flush().is_err() {
            return;
        }
    }
}

fn send(out: &Outbound, f: &Frame) {
    if let Ok(b) = f.encode() {
        let _ = out.send(Arc::new(b));
    }
}

fn error(out: &Outbound, code: ErrorCode, message: impl Into<String>) {
    send(
        out,
        &Frame::Error {
            code,
            message: message.into(),
        },
    );
}

fn serve_connection(stream: TcpStream, shared: Arc<Shared>) {
    let _ = stream.set_nodelay(true);
    let id = shared.next_id.fetch_add(1, Ordering::SeqCst);
    let (Ok(wstream), Ok(registry)) = (stream.try_clone(), stream.try_clone()) else {
        return;
    };
    shared.streams.lock().unwrap().insert(id, registry);
    shared.stats.connections.fetch_add(1, Ordering::Relaxed);
    let (out, rx) = mpsc::channel::<Arc<Vec<u8>>>();
    let writer = std::thread::spawn(move || writer_loop(wstream, rx));

    let max = shared.config.max_payload + FRAME_OVERHEAD;
    let mut reader = BufReader::with_capacity(64 * 1024, &stream);
    let mut connected = false;
    let mut seqs: HashMap<String, u64> = HashMap::new();
    loop {
        let body = match read_frame_bytes(&mut reader, max) {
            Ok(Some(b)) => b,
            Ok(None) => break,
            Err(ProtocolError::TooLong { len, .. }) => {
                error(&out, ErrorCode::PayloadTooLarge, format!("frame of {len} bytes"));
                break;
            }
            Err(_) => break,
        };
        let frame = match Frame::decode(&body) {
            Ok(f) => f,
            Err(e) => {
                error(&out, ErrorCode::Malformed, e.to_string());
                continue;
            }
        };
        if !connected && !matches!(frame, Frame::Connect { .. }) {
            error(&out, ErrorCode::NotConnected, "CONNECT first");
            continue;
        }
        match frame {
            Frame::Connect { .. } => {
                connected = true;
                send(&out, &Frame::Ack { of: FrameType::Connect as u8, value: id });
            }
            Frame::Subscribe { topic } => {
                if check_topic(&topic).is_err() {
                    error(&out, ErrorCode::TopicInvalid, "bad topic");
                    continue;
                }
                shared.routes.subscribe(&topic, id, &out);
                send(&out, &Frame::Ack { of: FrameType::Subscribe as u8, value: 0 });
            }
            Frame::Unsubscribe { topic } => {
                shared.routes.unsubscribe(&topic, id);
                send(&out, &Frame::Ack { of: FrameType::Unsubscribe as u8, value: 0 });
            }
            Frame::Publish {
                topic,
                timestamp_ns,
                checksum,
                payload,
            } => {
                if check_topic(&topic).is_err() {
                    error(&out, ErrorCode::TopicInvalid, "bad topic");
                    continue;
                }
                if payload.len() > shared.config.max_payload {
                    error(&out, ErrorCode::PayloadTooLarge, format!("{} bytes", payload.len()));
                    continue;
                }
                if crc32fast::hash(&payload) != checksum {
                    error(&out, ErrorCode::Checksum, "payload checksum mismatch");
                    continue;
                }
                let seq = seqs.entry(topic.clone()).or_insert(0);
                let publish_seq = *seq;
                *seq += 1;
                let deliver = Frame::Deliver(BrokerMessage {
                    topic,
                    publisher: id,
                    publish_seq,
                    timestamp_ns,
                    checksum,
                    payload,
                });
                if let Ok(bytes) = deliver.encode() {
                    let Frame::Deliver(m) = &deliver else { unreachable!() };
                    let n = shared.routes.route(&m.topic, Arc::new(bytes));
                    shared.stats.published.fetch_add(1, Ordering::Relaxed);
                    shared.stats.delivered.fetch_add(n as u64, Ordering::Relaxed);
                }
                send(&out, &Frame::Ack { of: FrameType::Publish as u8, value: publish_seq });
            }
            Frame::Ping { token } => send(&out, &Frame::Pong { token }),
            Frame::Pong { .. } | Frame::Ack { .. } | Frame::Deliver(_) | Frame::Error { .. } => {
                error(&out, ErrorCode::Malformed, "unexpected frame from client");
            }
        }
    }
    shared.routes.drop_client(id);
    shared.streams.lock().unwrap().remove(&id);
    drop(out);
    let _ = writer.join();
    let _ = stream.shutdown(Shutdown::Both);
}
