//! Blocking TCP client for the supported subset.

use std::collections::VecDeque;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codec::{decode_packet, encode_packet, CodecError, Packet, Publish, QoS, Subscription};
use crate::topic::TopicFilter;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("connection refused by broker (return code {0})")]
    Refused(u8),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("unexpected packet from broker: {0:?}")]
    Unexpected(Packet),
}

/// A connected MQTT client.
///
/// Publishes received while waiting for an acknowledgement are queued and
/// returned by later calls to [`Client::recv_timeout`].
pub struct Client {
    stream: TcpStream,
    buf: Vec<u8>,
    inbox: VecDeque<Publish>,
    next_packet_id: u16,
    keepalive: Duration,
    last_sent: Instant,
    ack_timeout: Duration,
}

impl Client {
    pub fn connect<A: ToSocketAddrs>(
        addr: A,
        client_id: &str,
        keepalive_s: u16,
    ) -> Result<Client, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut client = Client {
            stream,
            buf: Vec::new(),
            inbox: VecDeque::new(),
            next_packet_id: 1,
            keepalive: Duration::from_secs(keepalive_s as u64),
            last_sent: Instant::now(),
            ack_timeout: Duration::from_secs(5),
        };
        client.send(&Packet::Connect {
            client_id: client_id.to_owned(),
            keepalive_s,
        })?;
        match client.wait_for("CONNACK", |p| matches!(p, Packet::Connack { .. }))? {
            Packet::Connack { return_code: 0 } => Ok(client),
            Packet::Connack { return_code } => Err(ClientError::Refused(return_code)),
            other => Err(ClientError::Unexpected(other)),
        }
    }

    fn send(&mut self, packet: &Packet) -> Result<(), ClientError> {
        let bytes = encode_packet(packet)?;
        self.stream.write_all(&bytes)?;
        self.last_sent = Instant::now();
        Ok(())
    }

    fn allocate_packet_id(&mut self) -> u16 {
        let id = self.next_packet_id;
        self.next_packet_id = if id == u16::MAX { 1 } else { id + 1 };
        id
    }

    /// Reads one packet, waiting at most `timeout`.
    fn read_packet(&mut self, timeout: Duration) -> Result<Option<Packet>, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some((packet, used)) = decode_packet(&self.buf)? {
                self.buf.drain(..used);
                return Ok(Some(packet));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            self.stream.set_read_timeout(Some(left))?;
            let mut chunk = [0u8; 4096];
            match self.stream.read(&mut chunk) {
                Ok(0) => {
                    return Err(io::Error::new(ErrorKind::UnexpectedEof, "broker closed").into())
                }
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Handles an unsolicited packet; publishes are queued, QoS 1 ones acked.
    fn absorb(&mut self, packet: Packet) -> Result<Option<Packet>, ClientError> {
        match packet {
            Packet::Publish(p) => {
                if let (QoS::AtLeastOnce, Some(packet_id)) = (p.qos, p.packet_id) {
                    self.send(&Packet::Puback { packet_id })?;
                }
                self.inbox.push_back(p);
                Ok(None)
            }
            Packet::Pingresp => Ok(None),
            other => Ok(Some(other)),
        }
    }

    fn wait_for(
        &mut self,
        what: &'static str,
        want: impl Fn(&Packet) -> bool,
    ) -> Result<Packet, ClientError> {
        let deadline = Instant::now() + self.ack_timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let Some(packet) = self.read_packet(left)? else {
                return Err(ClientError::Timeout(what));
            };
            if want(&packet) {
                return Ok(packet);
            }
            if let Some(other) = self.absorb(packet)? {
                return Err(ClientError::Unexpected(other));
            }
        }
    }

    pub fn subscribe(&mut self, filters: &[(&str, QoS)]) -> Result<Vec<Option<QoS>>, ClientError> {
        let mut subs = Vec::with_capacity(filters.len());
        for (f, qos) in filters {
            let filter = TopicFilter::parse(f).map_err(|e| CodecError::Invalid(e.to_string()))?;
            subs.push(Subscription { filter, qos: *qos });
        }
        let packet_id = self.allocate_packet_id();
        self.send(&Packet::Subscribe {
            packet_id,
            filters: subs,
        })?;
        match self.wait_for(
            "SUBACK",
            |p| matches!(p, Packet::Suback { packet_id: id, .. } if *id == packet_id),
        )? {
            Packet::Suback { granted, .. } => Ok(granted),
            other => Err(ClientError::Unexpected(other)),
        }
    }

    /// Publishes a message. QoS 1 blocks until the matching PUBACK arrives.
    pub fn publish(&mut self, topic: &str, payload: &[u8], qos: QoS) -> Result<(), ClientError> {
        let packet_id = match qos {
            QoS::AtMostOnce => None,
            QoS::AtLeastOnce => Some(self.allocate_packet_id()),
        };
        self.send(&Packet::Publish(Publish {
            topic: topic.to_owned(),
            payload: payload.to_vec(),
            qos,
            packet_id,
        }))?;
        if let Some(id) = packet_id {
            self.wait_for(
                "PUBACK",
                |p| matches!(p, Packet::Puback { packet_id } if *packet_id == id),
            )?;
        }
        Ok(())
    }

    pub fn ping(&mut self) -> Result<(), ClientError> {
        self.send(&Packet::Pingreq)?;
        self.wait_for("PINGRESP", |p| matches!(p, Packet::Pingresp))?;
        Ok(())
    }

    /// Sends PINGREQ if nothing was sent for half the keepalive interval.
    pub fn keep_alive(&mut self) -> Result<(), ClientError> {
        if !self.keepalive.is_zero() && self.last_sent.elapsed() >= self.keepalive / 2 {
            self.send(&Packet::Pingreq)?;
        }
        Ok(())
    }

    /// Returns the next delivered publish, waiting at most `timeout`.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Publish>, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(p) = self.inbox.pop_front() {
                return Ok(Some(p));
            }
            self.keep_alive()?;
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            let step = if self.keepalive.is_zero() {
                left
            } else {
                left.min(self.keepalive / 2)
            };
            if let Some(packet) = self.read_packet(step)? {
                if let Some(other) = self.absorb(packet)? {
                    return Err(ClientError::Unexpected(other));
                }
            }
        }
    }

    pub fn disconnect(mut self) -> Result<(), ClientError> {
        self.send(&Packet::Disconnect)?;
        let _ = self.stream.shutdown(Shutdown::Both);
        Ok(())
    }
}
