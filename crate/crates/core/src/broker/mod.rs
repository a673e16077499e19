//! Cross-twin message broker: wire protocol, TCP server, blocking client and
//! the latency harness.

pub mod client;
pub mod latency;
pub mod protocol;
pub mod server;

pub use client::{BrokerClient, ClientError};
pub use latency::{measure_latency, LatencyConfig, LatencyReport, LatencyRow, LatencyStats};
pub use protocol::{BrokerMessage, ErrorCode, Frame, FrameType, ProtocolError};
pub use server::{Broker, BrokerConfig, BrokerStats};

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn broker() -> Broker {
        Broker::bind("127.0.0.1:0", BrokerConfig::default()).unwrap()
    }

    const T: Duration = Duration::from_millis(300);

    #[test]
    fn no_subscribers_acks() {
        let b = broker();
        let c = BrokerClient::connect(b.local_addr(), "a").unwrap();
        assert_eq!(c.publish("x", b"hi").unwrap(), 0);
        assert_eq!(c.publish("x", b"hi").unwrap(), 1);
        assert!(c.recv(Duration::from_millis(50)).is_err());
    }

    #[test]
    fn subscribe_publish_unsubscribe() {
        let b = broker();
        let p = BrokerClient::connect(b.local_addr(), "p").unwrap();
        let s = BrokerClient::connect(b.local_addr(), "s").unwrap();
        let s2 = BrokerClient::connect(b.local_addr(), "s2").unwrap();
        p.publish("t", b"before").unwrap();
        s.subscribe("t").unwrap();
        s.subscribe("t").unwrap();
        s2.subscribe("t").unwrap();
        p.publish("t", b"one").unwrap();
        s.unsubscribe("t").unwrap();
        p.publish("t", b"two").unwrap();
        let m = s.recv(T).unwrap();
        assert_eq!(m.payload, b"one");
        assert_eq!(m.publisher, p.id());
        assert!(m.checksum_ok());
        assert!(s.recv(Duration::from_millis(50)).is_err());
        assert_eq!(s2.recv(T).unwrap().payload, b"one");
        assert_eq!(s2.recv(T).unwrap().payload, b"two");
    }

    #[test]
    fn fifo_hundred() {
        let b = broker();
        let p = BrokerClient::connect(b.local_addr(), "p").unwrap();
        let s = BrokerClient::connect(b.local_addr(), "s").unwrap();
        s.subscribe("q").unwrap();
        for i in 0..100u32 {
            p.publish("q", &i.to_le_bytes()).unwrap();
        }
        for i in 0..100u32 {
            let m = s.recv(T).unwrap();
            assert_eq!(m.publish_seq, i as u64);
            assert_eq!(m.payload, i.to_le_bytes());
        }
    }

    #[test]
    fn limits() {
        let b = Broker::bind("127.0.0.1:0", BrokerConfig { max_payload: 16 }).unwrap();
        let c = BrokerClient::connect(b.local_addr(), "a").unwrap();
        assert!(matches!(
            c.publish("x", &[0; 17]),
            Err(ClientError::Refused { code: ErrorCode::PayloadTooLarge, .. })
        ));
        assert!(matches!(c.publish("", b""), Err(ClientError::TopicInvalid)));
        assert!(matches!(c.subscribe(&"a".repeat(256)), Err(ClientError::TopicInvalid)));
        assert_eq!(c.ping(42).unwrap(), 42);
    }

    #[test]
    fn small_latency_report() {
        let b = broker();
        let cfg = LatencyConfig {
            sizes: vec![100, 1],
            samples: 5,
            ..Default::default()
        };
        let r = measure_latency(b.local_addr(), &cfg).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].size_bytes, 1);
        assert!(r.rows.iter().all(|row| !row.failed()));
        assert_eq!(r.rows[0].real_to_twin.as_ref().unwrap().n, 5);
    }
}
