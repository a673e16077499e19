use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use super::protocol::{check_topic, read_frame, BrokerMessage, ErrorCode, Frame, FrameType, ProtocolError, DEFAULT_MAX_PAYLOAD, FRAME_OVERHEAD};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("broker refused: {code:?}: {message}")]
    Refused { code: ErrorCode, message: String },
    #[error("topic must be 1..=255 bytes")]
    TopicInvalid,
    #[error("unexpected reply {0:?}")]
    Unexpected(Box<Frame>),
    #[error("no reply from broker within {0:?}")]
    Timeout(Duration),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn now_ns() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

/// Blocking broker client. Requests are serialized; deliveries arrive on a
/// separate queue read with [`recv`](Self::recv).
pub struct BrokerClient {
    id: u64,
    writer: Mutex<BufWriter<TcpStream>>,
    replies: Mutex<Receiver<Frame>>,
    deliveries: Mutex<Receiver<BrokerMessage>>,
    stream: TcpStream,
    reader: Option<JoinHandle<()>>,
    timeout: Duration,
}

impl BrokerClient {
    pub fn connect(addr: impl ToSocketAddrs, name: &str) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let (rtx, rrx) = mpsc::channel();
        let (dtx, drx) = mpsc::channel();
        let rstream = stream.try_clone()?;
        let reader = std::thread::Builder::new().name("broker-client".into()).spawn(move || {
            let mut r = BufReader::with_capacity(64 * 1024, rstream);
            let max = DEFAULT_MAX_PAYLOAD * 4 + FRAME_OVERHEAD;
            while let Ok(Some(f)) = read_frame(&mut r, max) {
                let ok = match f {
                    Frame::Deliver(m) => dtx.send(m).is_ok(),
                    other => rtx.send(other).is_ok(),
                };
                if !ok {
                    break;
                }
            }
        })?;
        let mut c = Self {
            id: 0,
            writer: Mutex::new(BufWriter::new(stream.try_clone()?)),
            replies: Mutex::new(rrx),
            deliveries: Mutex::new(drx),
            stream,
            reader: Some(reader),
            timeout: Duration::from_secs(10),
        };
        c.id = c.request(&Frame::Connect { name: name.to_string() }, FrameType::Connect)?;
        Ok(c)
    }

    /// Broker-assigned connection id, as seen in [`BrokerMessage::publisher`].
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn set_timeout(&mut self, t: Duration) {
        self.timeout = t;
    }

    fn request(&self, f: &Frame, expect: FrameType) -> Result<u64, ClientError> {
        let replies = self.replies.lock().unwrap();
        {
            let mut w = self.writer.lock().unwrap();
            f.write_to(&mut *w)?;
            w.flush()?;
        }
        loop {
            match replies.recv_timeout(self.timeout) {
                Ok(Frame::Ack { of, value }) if of == expect as u8 => return Ok(value),
                Ok(Frame::Error { code, message }) => return Err(ClientError::Refused { code, message }),
                Ok(Frame::Pong { .. }) if expect != FrameType::Ping => continue,
                Ok(Frame::Pong { token }) => return Ok(token),
                Ok(other) => return Err(ClientError::Unexpected(Box::new(other))),
                Err(RecvTimeoutError::Timeout) => return Err(ClientError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => return Err(ClientError::Closed),
            }
        }
    }

    /// Takes effect for messages published after this returns.
    /// Subscribing twice is harmless.
    pub fn subscribe(&self, topic: &str) -> Result<(), ClientError> {
        check_topic(topic).map_err(|_| ClientError::TopicInvalid)?;
        self.request(&Frame::Subscribe { topic: topic.into() }, FrameType::Subscribe)
            .map(drop)
    }

    pub fn unsubscribe(&self, topic: &str) -> Result<(), ClientError> {
        check_topic(topic).map_err(|_| ClientError::TopicInvalid)?;
        self.request(&Frame::Unsubscribe { topic: topic.into() }, FrameType::Unsubscribe)
            .map(drop)
    }

    /// Publishes and waits for the broker's ack, returning the publish
    /// sequence number.
    pub fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64, ClientError> {
        check_topic(topic).map_err(|_| ClientError::TopicInvalid)?;
        let f = Frame::Publish {
            topic: topic.into(),
            timestamp_ns: now_ns(),
            checksum: crc32fast::hash(payload),
            payload: payload.to_vec(),
        };
        self.request(&f, FrameType::Publish)
    }

    pub fn ping(&self, token: u64) -> Result<u64, ClientError> {
        self.request(&Frame::Ping { token }, FrameType::Ping)
    }

    pub fn recv(&self, timeout: Duration) -> Result<BrokerMessage, ClientError> {
        match self.deliveries.lock().unwrap().recv_timeout(timeout) {
            Ok(m) => Ok(m),
            Err(RecvTimeoutError::Timeout) => Err(ClientError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(ClientError::Closed),
        }
    }

    pub fn try_recv(&self) -> Option<BrokerMessage> {
        self.deliveries.lock().unwrap().try_recv().ok()
    }
}

impl Drop for BrokerClient {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(t) = self.reader.take() {
            let _ = t.join();
        }
    }
}
