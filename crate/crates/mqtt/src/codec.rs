//! MQTT 3.1.1 wire codec for the supported packet subset.
//!
//! Decoding is incremental: [`decode_packet`] returns `Ok(None)` until a whole
//! packet is buffered, so callers can feed bytes as they arrive.

use thiserror::Error;

use crate::topic::{validate_topic, TopicFilter};

/// Largest value representable by the 4-byte remaining-length varint.
pub const MAX_REMAINING_LENGTH: u32 = 268_435_455;

const PROTOCOL_NAME: &[u8] = b"MQTT";
const PROTOCOL_LEVEL: u8 = 4;

const TYPE_CONNECT: u8 = 1;
const TYPE_CONNACK: u8 = 2;
const TYPE_PUBLISH: u8 = 3;
const TYPE_PUBACK: u8 = 4;
const TYPE_SUBSCRIBE: u8 = 8;
const TYPE_SUBACK: u8 = 9;
const TYPE_PINGREQ: u8 = 12;
const TYPE_PINGRESP: u8 = 13;
const TYPE_DISCONNECT: u8 = 14;

const SUBACK_FAILURE: u8 = 0x80;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("remaining length {0} exceeds {MAX_REMAINING_LENGTH}")]
    LengthOutOfRange(u64),
    #[error("malformed packet: {0}")]
    Malformed(String),
    #[error("unsupported feature: {0}")]
    Unsupported(String),
    #[error("invalid packet for encoding: {0}")]
    Invalid(String),
}

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::Malformed(msg.into())
}

fn unsupported(msg: impl Into<String>) -> CodecError {
    CodecError::Unsupported(msg.into())
}

/// Delivery guarantee; QoS 2 is outside the supported subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum QoS {
    #[default]
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    fn from_bits(bits: u8) -> Result<QoS, CodecError> {
        match bits {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            2 => Err(unsupported("QoS 2")),
            _ => Err(malformed(format!("invalid QoS value {bits}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: QoS,
    /// Present iff `qos` is [`QoS::AtLeastOnce`].
    pub packet_id: Option<u16>,
}

impl Publish {
    pub fn qos0(topic: impl Into<String>, payload: impl Into<Vec<u8>>) -> Publish {
        Publish {
            topic: topic.into(),
            payload: payload.into(),
            qos: QoS::AtMostOnce,
            packet_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub filter: TopicFilter,
    pub qos: QoS,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect {
        client_id: String,
        keepalive_s: u16,
    },
    Connack {
        return_code: u8,
    },
    Publish(Publish),
    Puback {
        packet_id: u16,
    },
    Subscribe {
        packet_id: u16,
        filters: Vec<Subscription>,
    },
    /// `None` entries encode the 0x80 failure code.
    Suback {
        packet_id: u16,
        granted: Vec<Option<QoS>>,
    },
    Pingreq,
    Pingresp,
    Disconnect,
}

/// Encodes `n` as the fixed-header remaining-length varint (1 to 4 bytes).
pub fn encode_remaining_length(n: u32) -> Result<Vec<u8>, CodecError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(CodecError::LengthOutOfRange(n as u64));
    }
    let mut out = Vec::with_capacity(4);
    let mut x = n;
    loop {
        let mut byte = (x % 128) as u8;
        x /= 128;
        if x > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if x == 0 {
            return Ok(out);
        }
    }
}

/// Decodes a remaining-length varint from the start of `bytes`.
///
/// Returns `Ok(None)` when more bytes are needed, and an error when a fourth
/// byte still carries the continuation bit.
pub fn decode_remaining_length(bytes: &[u8]) -> Result<Option<(u32, usize)>, CodecError> {
    let mut value: u32 = 0;
    let mut multiplier: u32 = 1;
    for (i, &byte) in bytes.iter().enumerate() {
        value += (byte & 0x7f) as u32 * multiplier;
        if byte & 0x80 == 0 {
            return Ok(Some((value, i + 1)));
        }
        if i == 3 {
            return Err(malformed("remaining length longer than 4 bytes"));
        }
        multiplier *= 128;
    }
    Ok(None)
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), CodecError> {
    let len = u16::try_from(s.len())
        .map_err(|_| CodecError::Invalid(format!("string of {} bytes is too long", s.len())))?;
    if s.contains('\0') {
        return Err(CodecError::Invalid("string contains U+0000".into()));
    }
    put_u16(out, len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn check_packet_id(id: u16) -> Result<u16, CodecError> {
    if id == 0 {
        Err(CodecError::Invalid("packet identifier 0".into()))
    } else {
        Ok(id)
    }
}

/// Encodes a packet into its exact wire representation.
pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, CodecError> {
    let mut body = Vec::new();
    let header: u8 = match packet {
        Packet::Connect {
            client_id,
            keepalive_s,
        } => {
            put_str(&mut body, "MQTT")?;
            body.push(PROTOCOL_LEVEL);
            // clean session only
            body.push(0x02);
            put_u16(&mut body, *keepalive_s);
            put_str(&mut body, client_id)?;
            TYPE_CONNECT << 4
        }
        Packet::Connack { return_code } => {
            if *return_code > 5 {
                return Err(CodecError::Invalid(format!(
                    "connack return code {return_code}"
                )));
            }
            body.push(0);
            body.push(*return_code);
            TYPE_CONNACK << 4
        }
        Packet::Publish(p) => {
            validate_topic(&p.topic).map_err(|e| CodecError::Invalid(e.to_string()))?;
            put_str(&mut body, &p.topic)?;
            match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, None) => {}
                (QoS::AtLeastOnce, Some(id)) => put_u16(&mut body, check_packet_id(id)?),
                _ => {
                    return Err(CodecError::Invalid(
                        "packet identifier must be present iff QoS is 1".into(),
                    ))
                }
            }
            body.extend_from_slice(&p.payload);
            (TYPE_PUBLISH << 4) | ((p.qos as u8) << 1)
        }
        Packet::Puback { packet_id } => {
            put_u16(&mut body, check_packet_id(*packet_id)?);
            TYPE_PUBACK << 4
        }
        Packet::Subscribe { packet_id, filters } => {
            if filters.is_empty() {
                return Err(CodecError::Invalid("subscribe without filters".into()));
            }
            put_u16(&mut body, check_packet_id(*packet_id)?);
            for sub in filters {
                put_str(&mut body, sub.filter.as_str())?;
                body.push(sub.qos as u8);
            }
            (TYPE_SUBSCRIBE << 4) | 0x02
        }
        Packet::Suback { packet_id, granted } => {
            if granted.is_empty() {
                return Err(CodecError::Invalid("suback without return codes".into()));
            }
            put_u16(&mut body, check_packet_id(*packet_id)?);
            for g in granted {
                body.push(g.map_or(SUBACK_FAILURE, |q| q as u8));
            }
            TYPE_SUBACK << 4
        }
        Packet::Pingreq => TYPE_PINGREQ << 4,
        Packet::Pingresp => TYPE_PINGRESP << 4,
        Packet::Disconnect => TYPE_DISCONNECT << 4,
    };
    let len =
        u32::try_from(body.len()).map_err(|_| CodecError::LengthOutOfRange(body.len() as u64))?;
    let mut out = Vec::with_capacity(body.len() + 5);
    out.push(header);
    out.extend(encode_remaining_length(len)?);
    out.extend(body);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| malformed("packet body too short"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let hi = self.u8()?;
        let lo = self.u8()?;
        Ok(u16::from_be_bytes([hi, lo]))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(malformed("packet body too short"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let len = self.u16()? as usize;
        let raw = self.bytes(len)?;
        let s = std::str::from_utf8(raw).map_err(|_| malformed("string is not valid UTF-8"))?;
        if s.contains('\0') {
            return Err(malformed("string contains U+0000"));
        }
        Ok(s.to_owned())
    }

    fn packet_id(&mut self) -> Result<u16, CodecError> {
        match self.u16()? {
            0 => Err(malformed("packet identifier 0")),
            id => Ok(id),
        }
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn expect_flags(kind: &str, flags: u8, expected: u8) -> Result<(), CodecError> {
    if flags != expected {
        return Err(malformed(format!(
            "{kind} fixed-header flags {flags:#06b}, expected {expected:#06b}"
        )));
    }
    Ok(())
}

/// Decodes one packet from the front of `buf`.
///
/// Returns `Ok(None)` while the buffer holds only a prefix of a packet, or
/// `Ok(Some((packet, consumed)))` once a whole packet is available.
pub fn decode_packet(buf: &[u8]) -> Result<Option<(Packet, usize)>, CodecError> {
    let Some(&first) = buf.first() else {
        return Ok(None);
    };
    let Some((len, len_bytes)) = decode_remaining_length(&buf[1..])? else {
        return Ok(None);
    };
    let start = 1 + len_bytes;
    let total = start + len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    let packet = decode_body(first, &buf[start..total])?;
    Ok(Some((packet, total)))
}

fn decode_body(first: u8, body: &[u8]) -> Result<Packet, CodecError> {
    let kind = first >> 4;
    let flags = first & 0x0f;
    let mut r = Reader::new(body);
    let packet = match kind {
        TYPE_CONNECT => {
            expect_flags("CONNECT", flags, 0)?;
            let name = r.string()?;
            if name.as_bytes() != PROTOCOL_NAME {
                return Err(unsupported(format!("protocol name {name:?}")));
            }
            let level = r.u8()?;
            if level != PROTOCOL_LEVEL {
                return Err(unsupported(format!("protocol level {level}")));
            }
            let cflags = r.u8()?;
            if cflags & 0x01 != 0 {
                return Err(malformed("reserved connect flag set"));
            }
            if cflags & 0x04 != 0 {
                return Err(unsupported("will message"));
            } else if cflags & 0x38 != 0 {
                return Err(malformed("will QoS/retain set without will flag"));
            }
            if cflags & 0x80 != 0 {
                return Err(unsupported("user name"));
            }
            if cflags & 0x40 != 0 {
                return Err(unsupported("password"));
            }
            if cflags & 0x02 == 0 {
                return Err(unsupported("persistent session"));
            }
            let keepalive_s = r.u16()?;
            let client_id = r.string()?;
            Packet::Connect {
                client_id,
                keepalive_s,
            }
        }
        TYPE_CONNACK => {
            expect_flags("CONNACK", flags, 0)?;
            let ack_flags = r.u8()?;
            if ack_flags & 0xfe != 0 {
                return Err(malformed("reserved connack flags set"));
            }
            if ack_flags & 0x01 != 0 {
                return Err(unsupported("session present"));
            }
            let return_code = r.u8()?;
            if return_code > 5 {
                return Err(malformed(format!("connack return code {return_code}")));
            }
            Packet::Connack { return_code }
        }
        TYPE_PUBLISH => {
            if flags & 0x01 != 0 {
                return Err(unsupported("retained publish"));
            }
            if flags & 0x08 != 0 {
                return Err(unsupported("duplicate delivery flag"));
            }
            let qos = QoS::from_bits((flags >> 1) & 0x03)?;
            let topic = r.string()?;
            validate_topic(&topic).map_err(|e| malformed(e.to_string()))?;
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(r.packet_id()?),
            };
            let payload = r.rest().to_vec();
            Packet::Publish(Publish {
                topic,
                payload,
                qos,
                packet_id,
            })
        }
        TYPE_PUBACK => {
            expect_flags("PUBACK", flags, 0)?;
            Packet::Puback {
                packet_id: r.packet_id()?,
            }
        }
        TYPE_SUBSCRIBE => {
            expect_flags("SUBSCRIBE", flags, 0x02)?;
            let packet_id = r.packet_id()?;
            let mut filters = Vec::new();
            while r.remaining() > 0 {
                let raw = r.string()?;
                let filter = TopicFilter::parse(&raw).map_err(|e| malformed(e.to_string()))?;
                let options = r.u8()?;
                if options & 0xfc != 0 {
                    return Err(malformed("reserved subscription option bits set"));
                }
                let qos = QoS::from_bits(options)?;
                filters.push(Subscription { filter, qos });
            }
            if filters.is_empty() {
                return Err(malformed("subscribe without filters"));
            }
            Packet::Subscribe { packet_id, filters }
        }
        TYPE_SUBACK => {
            expect_flags("SUBACK", flags, 0)?;
            let packet_id = r.packet_id()?;
            let mut granted = Vec::new();
            for &code in r.rest() {
                granted.push(match code {
                    SUBACK_FAILURE => None,
                    other => Some(QoS::from_bits(other)?),
                });
            }
            if granted.is_empty() {
                return Err(malformed("suback without return codes"));
            }
            Packet::Suback { packet_id, granted }
        }
        TYPE_PINGREQ => {
            expect_flags("PINGREQ", flags, 0)?;
            Packet::Pingreq
        }
        TYPE_PINGRESP => {
            expect_flags("PINGRESP", flags, 0)?;
            Packet::Pingresp
        }
        TYPE_DISCONNECT => {
            expect_flags("DISCONNECT", flags, 0)?;
            Packet::Disconnect
        }
        5..=7 => return Err(unsupported("QoS 2 handshake packets")),
        10 | 11 => return Err(unsupported("unsubscribe")),
        _ => return Err(malformed(format!("reserved packet type {kind}"))),
    };
    r.finish()?;
    Ok(packet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn varint_examples() {
        assert_eq!(encode_remaining_length(0).unwrap(), vec![0x00]);
        assert_eq!(encode_remaining_length(128).unwrap(), vec![0x80, 0x01]);
        assert_eq!(
            encode_remaining_length(16_384).unwrap(),
            vec![0x80, 0x80, 0x01]
        );
        assert_eq!(decode_remaining_length(&[0x00]).unwrap(), Some((0, 1)));
        assert_eq!(
            decode_remaining_length(&[0xC1, 0x02]).unwrap(),
            Some((321, 2))
        );
        assert!(matches!(
            decode_remaining_length(&[0xFF, 0xFF, 0xFF, 0xFF, 0x7F]),
            Err(CodecError::Malformed(_))
        ));
        assert_eq!(decode_remaining_length(&[0x80]).unwrap(), None);
        assert_eq!(decode_remaining_length(&[]).unwrap(), None);
        assert!(matches!(
            encode_remaining_length(MAX_REMAINING_LENGTH + 1),
            Err(CodecError::LengthOutOfRange(_))
        ));
    }

    /// Independent varint model: little-endian base-128 digits.
    fn varint_oracle(n: u32) -> Vec<u8> {
        let mut digits = vec![];
        let mut x = n;
        while x >= 128 {
            digits.push(x % 128);
            x /= 128;
        }
        digits.push(x);
        let last = digits.len() - 1;
        digits
            .iter()
            .enumerate()
            .map(|(i, d)| if i < last { *d as u8 | 0x80 } else { *d as u8 })
            .collect()
    }

    #[test]
    fn varint_brute_force_low_range() {
        for n in 0..=(1u32 << 16) {
            let enc = encode_remaining_length(n).unwrap();
            assert_eq!(enc, varint_oracle(n), "n={n}");
            assert_eq!(decode_remaining_length(&enc).unwrap(), Some((n, enc.len())));
        }
    }

    #[test]
    fn pingreq_bytes() {
        assert_eq!(encode_packet(&Packet::Pingreq).unwrap(), vec![0xC0, 0x00]);
        assert_eq!(encode_packet(&Packet::Pingresp).unwrap(), vec![0xD0, 0x00]);
        assert_eq!(
            encode_packet(&Packet::Disconnect).unwrap(),
            vec![0xE0, 0x00]
        );
    }

    #[test]
    fn connect_layout() {
        let bytes = encode_packet(&Packet::Connect {
            client_id: "n1".into(),
            keepalive_s: 60,
        })
        .unwrap();
        assert_eq!(
            bytes,
            vec![
                0x10, 14, 0x00, 0x04, b'M', b'Q', b'T', b'T', 0x04, 0x02, 0x00, 60, 0x00, 0x02,
                b'n', b'1'
            ]
        );
    }

    #[test]
    fn publish_roundtrip_small() {
        let p = Packet::Publish(Publish::qos0("a", b"b".to_vec()));
        let bytes = encode_packet(&p).unwrap();
        assert_eq!(bytes, vec![0x30, 0x04, 0x00, 0x01, b'a', b'b']);
        assert_eq!(decode_packet(&bytes).unwrap(), Some((p, bytes.len())));
    }

    #[test]
    fn connect_with_will_is_unsupported() {
        let mut bytes = encode_packet(&Packet::Connect {
            client_id: "x".into(),
            keepalive_s: 10,
        })
        .unwrap();
        // connect flags byte sits after the 2+4 byte protocol name and level
        bytes[9] |= 0x04;
        assert!(matches!(
            decode_packet(&bytes),
            Err(CodecError::Unsupported(_))
        ));
    }

    #[test]
    fn subset_boundaries() {
        // retained publish
        assert!(matches!(
            decode_packet(&[0x31, 0x03, 0x00, 0x01, b'a']),
            Err(CodecError::Unsupported(_))
        ));
        // QoS 2 publish
        assert!(matches!(
            decode_packet(&[0x34, 0x05, 0x00, 0x01, b'a', 0x00, 0x01]),
            Err(CodecError::Unsupported(_))
        ));
        // PUBREC
        assert!(matches!(
            decode_packet(&[0x50, 0x02, 0x00, 0x01]),
            Err(CodecError::Unsupported(_))
        ));
        // reserved type 0
        assert!(matches!(
            decode_packet(&[0x00, 0x00]),
            Err(CodecError::Malformed(_))
        ));
        // trailing bytes on PINGREQ
        assert!(matches!(
            decode_packet(&[0xC0, 0x01, 0x00]),
            Err(CodecError::Malformed(_))
        ));
        // wildcard in publish topic
        assert!(matches!(
            decode_packet(&[0x30, 0x03, 0x00, 0x01, b'#']),
            Err(CodecError::Malformed(_))
        ));
        // bad subscribe flags
        assert!(matches!(
            decode_packet(&[0x80, 0x06, 0x00, 0x01, 0x00, 0x01, b'a', 0x00]),
            Err(CodecError::Malformed(_))
        ));
    }

    #[test]
    fn encode_rejects_inconsistent_publish() {
        let p = Publish {
            topic: "a".into(),
            payload: vec![],
            qos: QoS::AtLeastOnce,
            packet_id: None,
        };
        assert!(encode_packet(&Packet::Publish(p)).is_err());
        let p = Publish::qos0("a/+", vec![]);
        assert!(encode_packet(&Packet::Publish(p)).is_err());
    }

    #[test]
    fn suback_failure_code() {
        let p = Packet::Suback {
            packet_id: 7,
            granted: vec![Some(QoS::AtLeastOnce), None, Some(QoS::AtMostOnce)],
        };
        let bytes = encode_packet(&p).unwrap();
        assert_eq!(bytes, vec![0x90, 0x05, 0x00, 0x07, 0x01, 0x80, 0x00]);
        assert_eq!(decode_packet(&bytes).unwrap().unwrap().0, p);
    }

    #[test]
    fn partial_buffers_need_more_data() {
        let bytes = encode_packet(&Packet::Puback { packet_id: 300 }).unwrap();
        for cut in 0..bytes.len() {
            assert_eq!(decode_packet(&bytes[..cut]).unwrap(), None);
        }
        // extra bytes after a complete packet are left for the next call
        let mut two = bytes.clone();
        two.extend_from_slice(&[0xC0, 0x00]);
        let (p, used) = decode_packet(&two).unwrap().unwrap();
        assert_eq!(p, Packet::Puback { packet_id: 300 });
        assert_eq!(
            decode_packet(&two[used..]).unwrap(),
            Some((Packet::Pingreq, 2))
        );
    }
}
