//! Broker wire protocol.
//!
//! Every frame is `u32 length | u8 type | body`, little-endian, where
//! `length` counts the type byte and body. Topics are `u8 len | utf-8`.
//!
//! | type | name        | body                                                         |
//! |------|-------------|--------------------------------------------------------------|
//! | 1    | CONNECT     | name (u8 len + utf-8)                                        |
//! | 2    | SUB         | topic                                                        |
//! | 3    | UNSUB       | topic                                                        |
//! | 4    | PUB         | topic, timestamp_ns u64, crc32 u32, payload                  |
//! | 5    | DELIVER     | topic, publisher u64, publish_seq u64, timestamp_ns u64, crc32 u32, payload |
//! | 6    | PING        | token u64                                                    |
//! | 7    | PONG        | token u64                                                    |
//! | 8    | ACK         | acked type u8, value u64                                     |
//! | 9    | ERROR       | code u8, message (u16 len + utf-8)                           |

use std::io::{Read, Write};

use thiserror::Error;

pub const MAX_TOPIC_LEN: usize = 255;
pub const DEFAULT_MAX_PAYLOAD: usize = 4 << 20;
/// Largest non-payload part of any frame.
pub const FRAME_OVERHEAD: usize = 1 + 1 + MAX_TOPIC_LEN + 8 + 8 + 8 + 4 + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Connect = 1,
    Subscribe = 2,
    Unsubscribe = 3,
    Publish = 4,
    Deliver = 5,
    Ping = 6,
    Pong = 7,
    Ack = 8,
    Error = 9,
}

impl FrameType {
    fn from_u8(v: u8) -> Option<Self> {
        use FrameType::*;
        Some(match v {
            1 => Connect,
            2 => Subscribe,
            3 => Unsubscribe,
            4 => Publish,
            5 => Deliver,
            6 => Ping,
            7 => Pong,
            8 => Ack,
            9 => Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    NotConnected = 1,
    TopicInvalid = 2,
    PayloadTooLarge = 3,
    Checksum = 4,
    Malformed = 5,
}

impl ErrorCode {
    pub fn from_u8(v: u8) -> Self {
        match v {
            1 => Self::NotConnected,
            2 => Self::TopicInvalid,
            3 => Self::PayloadTooLarge,
            4 => Self::Checksum,
            _ => Self::Malformed,
        }
    }
}

/// A message as delivered to subscribers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerMessage {
    pub topic: String,
    /// Broker-assigned id of the publishing connection.
    pub publisher: u64,
    /// Per (publisher, topic) counter starting at 0.
    pub publish_seq: u64,
    /// Publisher clock at send time.
    pub timestamp_ns: u64,
    pub checksum: u32,
    pub payload: Vec<u8>,
}

impl BrokerMessage {
    pub fn checksum_ok(&self) -> bool {
        crc32fast::hash(&self.payload) == self.checksum
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Connect { name: String },
    Subscribe { topic: String },
    Unsubscribe { topic: String },
    Publish { topic: String, timestamp_ns: u64, checksum: u32, payload: Vec<u8> },
    Deliver(BrokerMessage),
    Ping { token: u64 },
    Pong { token: u64 },
    Ack { of: u8, value: u64 },
    Error { code: ErrorCode, message: String },
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("frame length {len} exceeds limit {limit}")]
    TooLong { len: usize, limit: usize },
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("topic must be 1..={max} bytes", max = MAX_TOPIC_LEN)]
    Topic,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn check_topic(topic: &str) -> Result<(), ProtocolError> {
    if topic.is_empty() || topic.len() > MAX_TOPIC_LEN {
        Err(ProtocolError::Topic)
    } else {
        Ok(())
    }
}

fn put_str8(out: &mut Vec<u8>, s: &str) -> Result<(), ProtocolError> {
    if s.len() > MAX_TOPIC_LEN {
        return Err(ProtocolError::Topic);
    }
    out.push(s.len() as u8);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl Frame {
    pub fn frame_type(&self) -> FrameType {
        match self {
            Frame::Connect { .. } => FrameType::Connect,
            Frame::Subscribe { .. } => FrameType::Subscribe,
            Frame::Unsubscribe { .. } => FrameType::Unsubscribe,
            Frame::Publish { .. } => FrameType::Publish,
            Frame::Deliver(_) => FrameType::Deliver,
            Frame::Ping { .. } => FrameType::Ping,
            Frame::Pong { .. } => FrameType::Pong,
            Frame::Ack { .. } => FrameType::Ack,
            Frame::Error { .. } => FrameType::Error,
        }
    }

    /// Full wire encoding, length prefix included.
    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let mut out = vec![0u8; 4];
        out.push(self.frame_type() as u8);
        match self {
            Frame::Connect { name } => put_str8(&mut out, name)?,
            Frame::Subscribe { topic } | Frame::Unsubscribe { topic } => put_str8(&mut out, topic)?,
            Frame::Publish {
                topic,
                timestamp_ns,
                checksum,
                payload,
            } => {
                put_str8(&mut out, topic)?;
                out.extend_from_slice(&timestamp_ns.to_le_bytes());
                out.extend_from_slice(&checksum.to_le_bytes());
                out.extend_from_slice(payload);
            }
            Frame::Deliver(m) => {
                put_str8(&mut out, &m.topic)?;
                out.extend_from_slice(&m.publisher.to_le_bytes());
                out.extend_from_slice(&m.publish_seq.to_le_bytes());
                out.extend_from_slice(&m.timestamp_ns.to_le_bytes());
                out.extend_from_slice(&m.checksum.to_le_bytes());
                out.extend_from_slice(&m.payload);
            }
            Frame::Ping { token } | Frame::Pong { token } => out.extend_from_slice(&token.to_le_bytes()),
            Frame::Ack { of, value } => {
                out.push(*of);
                out.extend_from_slice(&value.to_le_bytes());
            }
            Frame::Error { code, message } => {
                out.push(*code as u8);
                let m = &message.as_bytes()[..message.len().min(u16::MAX as usize)];
                out.extend_from_slice(&(m.len() as u16).to_le_bytes());
                out.extend_from_slice(m);
            }
        }
        let len = (out.len() - 4) as u32;
        out[..4].copy_from_slice(&len.to_le_bytes());
        Ok(out)
    }

    /// Decodes `type | body` (length prefix already stripped).
    pub fn decode(buf: &[u8]) -> Result<Frame, ProtocolError> {
        let mut r = Reader { buf, pos: 0 };
        let t = r.u8()?;
        let ty = FrameType::from_u8(t).ok_or(ProtocolError::UnknownType(t))?;
        let frame = match ty {
            FrameType::Connect => Frame::Connect { name: r.str8()? },
            FrameType::Subscribe => Frame::Subscribe { topic: r.str8()? },
            FrameType::Unsubscribe => Frame::Unsubscribe { topic: r.str8()? },
            FrameType::Publish => Frame::Publish {
                topic: r.str8()?,
                timestamp_ns: r.u64()?,
                checksum: r.u32()?,
                payload: r.rest(),
            },
            FrameType::Deliver => Frame::Deliver(BrokerMessage {
                topic: r.str8()?,
                publisher: r.u64()?,
                publish_seq: r.u64()?,
                timestamp_ns: r.u64()?,
                checksum: r.u32()?,
                payload: r.rest(),
            }),
            FrameType::Ping => Frame::Ping { token: r.u64()? },
            FrameType::Pong => Frame::Pong { token: r.u64()? },
            FrameType::Ack => Frame::Ack {
                of: r.u8()?,
                value: r.u64()?,
            },
            FrameType::Error => {
                let code = ErrorCode::from_u8(r.u8()?);
                let n = r.u16()? as usize;
                let bytes = r.take(n)?;
                Frame::Error {
                    code,
                    message: String::from_utf8_lossy(bytes).into_owned(),
                }
            }
        };
        if r.pos != buf.len() {
            return Err(ProtocolError::Malformed("trailing bytes"));
        }
        Ok(frame)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ProtocolError> {
        w.write_all(&self.encode()?)?;
        Ok(())
    }
}

/// Reads one frame body (type byte onward). `Ok(None)` on clean EOF.
pub fn read_frame_bytes(mut r: impl Read, max_len: usize) -> Result<Option<Vec<u8>>, ProtocolError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 {
        return Err(ProtocolError::Malformed("empty frame"));
    }
    if len > max_len {
        return Err(ProtocolError::TooLong { len, limit: max_len });
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn read_frame(r: impl Read, max_len: usize) -> Result<Option<Frame>, ProtocolError> {
    match read_frame_bytes(r, max_len)? {
        Some(b) => Frame::decode(&b).map(Some),
        None => Ok(None),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(ProtocolError::Malformed("short body"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str8(&mut self) -> Result<String, ProtocolError> {
        let n = self.u8()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| ProtocolError::Malformed("invalid utf-8"))
    }

    fn rest(&mut self) -> Vec<u8> {
        let v = self.buf[self.pos..].to_vec();
        self.pos = self.buf.len();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn publish_layout() {
        let f = Frame::Publish {
            topic: "ab".into(),
            timestamp_ns: 5,
            checksum: crc32fast::hash(b"xyz"),
            payload: b"xyz".to_vec(),
        };
        let b = f.encode().unwrap();
        assert_eq!(u32::from_le_bytes(b[..4].try_into().unwrap()) as usize, b.len() - 4);
        assert_eq!(b[4], 4);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..8], b"ab");
        assert_eq!(&b[b.len() - 3..], b"xyz");
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(matches!(Frame::decode(&[42]), Err(ProtocolError::UnknownType(42))));
        assert!(matches!(Frame::decode(&[6, 1, 2]), Err(ProtocolError::Malformed(_))));
        assert!(matches!(Frame::decode(&[6, 0, 0, 0, 0, 0, 0, 0, 0, 9]), Err(ProtocolError::Malformed(_))));
        let long = "x".repeat(256);
        assert!(Frame::Subscribe { topic: long }.encode().is_err());
        let big = (100u32).to_le_bytes();
        assert!(matches!(read_frame(&big[..], 10), Err(ProtocolError::TooLong { .. })));
        assert!(read_frame(&[][..], 10).unwrap().is_none());
        assert!(check_topic("").is_err());
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        let topic = "[a-z/]{1,40}";
        prop_oneof![
            topic.prop_map(|name| Frame::Connect { name }),
            topic.prop_map(|topic| Frame::Subscribe { topic }),
            topic.prop_map(|topic| Frame::Unsubscribe { topic }),
            (topic, any::<u64>(), proptest::collection::vec(any::<u8>(), 0..300)).prop_map(|(topic, ts, payload)| {
                Frame::Publish {
                    topic,
                    timestamp_ns: ts,
                    checksum: crc32fast::hash(&payload),
                    payload,
                }
            }),
            (topic, any::<u64>(), any::<u64>(), proptest::collection::vec(any::<u8>(), 0..300)).prop_map(
                |(topic, p, s, payload)| Frame::Deliver(BrokerMessage {
                    topic,
                    publisher: p,
                    publish_seq: s,
                    timestamp_ns: p ^ s,
                    checksum: crc32fast::hash(&payload),
                    payload,
                })
            ),
            any::<u64>().prop_map(|token| Frame::Ping { token }),
            any::<u64>().prop_map(|token| Frame::Pong { token }),
            (any::<u8>(), any::<u64>()).prop_map(|(of, value)| Frame::Ack { of, value }),
            ".{0,50}".prop_map(|message| Frame::Error {
                code: ErrorCode::Checksum,
                message
            }),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_identity(f in arb_frame()) {
            let bytes = f.encode().unwrap();
            let back = read_frame(bytes.as_slice(), 1 << 20).unwrap().unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
