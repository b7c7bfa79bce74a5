//! A small, self-contained MQTT 3.1.1 implementation.
//!
//! Only the subset needed for telemetry fan-in is supported: CONNECT/CONNACK,
//! PUBLISH at QoS 0 and 1, PUBACK, SUBSCRIBE/SUBACK, PINGREQ/PINGRESP and
//! DISCONNECT. Retained messages, wills, QoS 2, persistent sessions and
//! authentication are rejected as unsupported features.
//!
//! The crate is split into:
//!
//! * [`codec`]: bit-exact packet encoding and incremental decoding
//! * [`topic`]: topic name validation and filter matching
//! * [`broker`]: transport-agnostic broker state plus an embeddable in-process broker
//! * [`server`]: a threaded TCP broker built on [`broker::Broker`]
//! * [`client`]: a blocking TCP client

pub mod broker;
pub mod client;
pub mod codec;
pub mod server;
pub mod topic;

pub use broker::{Broker, Dispatch, LocalBroker, LocalClient};
pub use client::{Client, ClientError};
pub use codec::{
    decode_packet, decode_remaining_length, encode_packet, encode_remaining_length, CodecError,
    Packet, Publish, QoS, Subscription, MAX_REMAINING_LENGTH,
};
pub use server::{BrokerServer, ServerHandle};
pub use topic::{topic_matches, validate_topic, TopicError, TopicFilter};

/// Default MQTT TCP port.
pub const DEFAULT_PORT: u16 = 1883;
