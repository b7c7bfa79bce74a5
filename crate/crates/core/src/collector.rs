//! User-space energy collector service.
//!
//! Drains the monitor mailbox, pairs each current sample with the nearest
//! voltage sample of the same rail, integrates energy per window and
//! publishes one telemetry message per current sample.

use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc::{self, SyncSender, TrySendError};
use std::thread::JoinHandle;

use energymon_mqtt::{Client, LocalClient, Publish, QoS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::{Mailbox, PhysicalSample, Quantity};
use crate::TOPIC_PREFIX;

pub const DEFAULT_RETRY_CAPACITY: usize = 10_000;

/// Energy of one window: `i * v * window`.
pub fn energy_of(i_amps: f64, v_volts: f64, window_ns: u64) -> f64 {
    i_amps * v_volts * window_ns as f64 * 1e-9
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyRecord {
    pub node_id: String,
    pub rail_name: String,
    pub t_ns: u64,
    pub i_amps: f64,
    pub v_volts: f64,
    pub e_joules: f64,
    pub window_ns: u64,
    pub seq: u32,
    /// Voltage came from the rail's nominal value, not a measurement.
    /// Local bookkeeping only; not part of the wire payload.
    pub nominal_voltage: bool,
}

/// Wire form of an [`EnergyRecord`]. Field order is the payload key order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Payload<'a> {
    #[serde(borrow)]
    node: std::borrow::Cow<'a, str>,
    #[serde(borrow)]
    rail: std::borrow::Cow<'a, str>,
    ts_ns: u64,
    i_a: f64,
    v_v: f64,
    e_j: f64,
    window_ns: u64,
    seq: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("{what} {value:?} is not a valid topic segment")]
    BadSegment { what: &'static str, value: String },
    #[error("malformed payload: {0}")]
    Payload(String),
}

/// A single topic level usable as node or rail name.
pub fn is_valid_segment(s: &str) -> bool {
    !s.is_empty()
        && !s
            .chars()
            .any(|c| matches!(c, '/' | '+' | '#' | '\0') || c.is_whitespace())
}

fn check_segment(what: &'static str, value: &str) -> Result<(), RecordError> {
    if is_valid_segment(value) {
        Ok(())
    } else {
        Err(RecordError::BadSegment {
            what,
            value: value.to_owned(),
        })
    }
}

pub fn record_topic(node_id: &str, rail_name: &str) -> String {
    format!("{TOPIC_PREFIX}/{node_id}/{rail_name}")
}

pub fn encode_record(record: &EnergyRecord) -> Result<(String, Vec<u8>), RecordError> {
    check_segment("node", &record.node_id)?;
    check_segment("rail", &record.rail_name)?;
    let payload = Payload {
        node: record.node_id.as_str().into(),
        rail: record.rail_name.as_str().into(),
        ts_ns: record.t_ns,
        i_a: record.i_amps,
        v_v: record.v_volts,
        e_j: record.e_joules,
        window_ns: record.window_ns,
        seq: record.seq,
    };
    let bytes = serde_json::to_vec(&payload).map_err(|e| RecordError::Payload(e.to_string()))?;
    Ok((record_topic(&record.node_id, &record.rail_name), bytes))
}

pub fn decode_record(payload: &[u8]) -> Result<EnergyRecord, RecordError> {
    let p: Payload =
        serde_json::from_slice(payload).map_err(|e| RecordError::Payload(e.to_string()))?;
    check_segment("node", &p.node)?;
    check_segment("rail", &p.rail)?;
    Ok(EnergyRecord {
        node_id: p.node.into_owned(),
        rail_name: p.rail.into_owned(),
        t_ns: p.ts_ns,
        i_amps: p.i_a,
        v_volts: p.v_v,
        e_joules: p.e_j,
        window_ns: p.window_ns,
        seq: p.seq,
        nominal_voltage: false,
    })
}

/// Voltage for a current sample, and whether it is the nominal fallback.
///
/// Picks the sample in `window` (sorted by time) closest to the current
/// sample's timestamp within `± window_ns`; ties go to the earlier sample.
pub fn pair_voltage(
    current: &PhysicalSample,
    window: &[PhysicalSample],
    nominal_v: f64,
) -> (f64, bool) {
    let t = current.t_ns;
    let mut best: Option<(u64, f64)> = None;
    for v in window {
        let d = v.t_ns.abs_diff(t);
        if d > current.window_ns {
            continue;
        }
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, v.value));
        }
    }
    match best {
        Some((_, v)) => (v, false),
        None => (nominal_v, true),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RailAccumulator {
    pub rail_name: String,
    pub total_joules: f64,
    pub sample_count: u64,
    pub first_t_ns: u64,
    pub last_t_ns: u64,
}

impl RailAccumulator {
    fn add(&mut self, record: &EnergyRecord) {
        if self.sample_count == 0 {
            self.first_t_ns = record.t_ns;
        }
        self.total_joules += record.e_joules;
        self.sample_count += 1;
        self.last_t_ns = self.last_t_ns.max(record.t_ns);
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("publish failed: {0}")]
pub struct PublishError(pub String);

/// Sink for encoded telemetry messages.
pub trait Publisher {
    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<(), PublishError>;
}

impl Publisher for LocalClient {
    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<(), PublishError> {
        LocalClient::publish(self, &Publish::qos0(topic, payload))
            .map(|_| ())
            .map_err(|e| PublishError(e.to_string()))
    }
}

impl Publisher for Client {
    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<(), PublishError> {
        Client::publish(self, topic, payload, QoS::AtMostOnce)
            .map_err(|e| PublishError(e.to_string()))
    }
}

impl<P: Publisher + ?Sized> Publisher for Box<P> {
    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<(), PublishError> {
        (**self).publish(topic, payload)
    }
}

/// Hands messages to a publisher running on its own thread.
///
/// A full queue or a dead worker is reported as a publish failure, so the
/// collector keeps the record in its retry buffer.
pub struct QueuedPublisher {
    tx: Option<SyncSender<(String, Vec<u8>)>>,
    worker: Option<JoinHandle<u64>>,
}

impl QueuedPublisher {
    pub fn spawn<P: Publisher + Send + 'static>(mut inner: P, capacity: usize) -> QueuedPublisher {
        let (tx, rx) = mpsc::sync_channel::<(String, Vec<u8>)>(capacity);
        let worker = std::thread::spawn(move || {
            let mut failures = 0;
            for (topic, payload) in rx {
                if let Err(e) = inner.publish(&topic, &payload) {
                    failures += 1;
                    log::warn!("background publish to {topic} failed: {e}");
                }
            }
            failures
        });
        QueuedPublisher {
            tx: Some(tx),
            worker: Some(worker),
        }
    }

    /// Closes the queue, waits for it to drain, and returns the worker's
    /// failure count.
    pub fn close(mut self) -> u64 {
        self.shutdown()
    }

    fn shutdown(&mut self) -> u64 {
        self.tx.take();
        self.worker
            .take()
            .map(|w| w.join().unwrap_or(0))
            .unwrap_or(0)
    }
}

impl Drop for QueuedPublisher {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Publisher for QueuedPublisher {
    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<(), PublishError> {
        let tx = self
            .tx
            .as_ref()
            .ok_or_else(|| PublishError("queue closed".into()))?;
        match tx.try_send((topic.to_owned(), payload.to_vec())) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(_)) => Err(PublishError("queue full".into())),
            Err(TrySendError::Disconnected(_)) => Err(PublishError("publisher thread gone".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CollectorStats {
    pub records: u64,
    pub published: u64,
    pub publish_failures: u64,
    /// Records evicted from a full retry buffer; never delivered.
    pub retry_dropped: u64,
    pub nominal_pairs: u64,
    pub encode_errors: u64,
}

pub struct EnergyCollector<P> {
    node_id: String,
    publisher: P,
    nominal: BTreeMap<String, f64>,
    voltages: BTreeMap<String, VecDeque<PhysicalSample>>,
    accumulators: BTreeMap<String, RailAccumulator>,
    retry: VecDeque<(String, Vec<u8>)>,
    retry_capacity: usize,
    stats: CollectorStats,
    log: Option<Vec<EnergyRecord>>,
}

/// Voltage samples kept per rail for pairing.
const VOLTAGE_HISTORY: usize = 64;

impl<P: Publisher> EnergyCollector<P> {
    /// `nominal` maps rail name to the fallback voltage used when no
    /// measured sample is close enough.
    pub fn new(node_id: &str, publisher: P, nominal: BTreeMap<String, f64>) -> EnergyCollector<P> {
        EnergyCollector {
            node_id: node_id.to_owned(),
            publisher,
            nominal,
            voltages: BTreeMap::new(),
            accumulators: BTreeMap::new(),
            retry: VecDeque::new(),
            retry_capacity: DEFAULT_RETRY_CAPACITY,
            stats: CollectorStats::default(),
            log: None,
        }
    }

    /// # Panics
    /// If `capacity` is zero.
    pub fn with_retry_capacity(mut self, capacity: usize) -> Self {
        assert!(capacity > 0, "retry capacity must be at least 1");
        self.retry_capacity = capacity;
        self
    }

    /// Keeps a copy of every record created, for replay checks.
    pub fn with_record_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn stats(&self) -> CollectorStats {
        self.stats
    }

    pub fn accumulators(&self) -> &BTreeMap<String, RailAccumulator> {
        &self.accumulators
    }

    pub fn records(&self) -> &[EnergyRecord] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn pending(&self) -> usize {
        self.retry.len()
    }

    pub fn publisher(&self) -> &P {
        &self.publisher
    }

    pub fn publisher_mut(&mut self) -> &mut P {
        &mut self.publisher
    }

    pub fn into_publisher(self) -> P {
        self.publisher
    }

    /// Sum of all rail accumulators, in rail-name order.
    pub fn total_joules(&self) -> f64 {
        self.accumulators.values().map(|a| a.total_joules).sum()
    }

    /// One service-loop iteration. Returns the number of messages delivered
    /// to the publisher, including retried ones.
    pub fn tick(&mut self, mailbox: &Mailbox) -> usize {
        let mut delivered = self.flush_retry();
        let batch = mailbox.drain();
        for s in batch.iter().filter(|s| s.kind == Quantity::Voltage) {
            let hist = self.voltages.entry(s.rail_name.clone()).or_default();
            let at = hist.partition_point(|v| v.t_ns <= s.t_ns);
            hist.insert(at, s.clone());
            if hist.len() > VOLTAGE_HISTORY {
                hist.pop_front();
            }
        }
        for s in batch.iter().filter(|s| s.kind == Quantity::Current) {
            let record = self.make_record(s);
            let encoded = match encode_record(&record) {
                Ok(m) => m,
                Err(e) => {
                    self.stats.encode_errors += 1;
                    log::warn!("dropping record for {}: {e}", record.rail_name);
                    continue;
                }
            };
            self.stats.records += 1;
            self.accumulators
                .entry(record.rail_name.clone())
                .or_insert_with(|| RailAccumulator {
                    rail_name: record.rail_name.clone(),
                    ..Default::default()
                })
                .add(&record);
            if let Some(log) = &mut self.log {
                log.push(record);
            }
            if self.retry.is_empty() && self.try_publish(&encoded.0, &encoded.1) {
                delivered += 1;
            } else {
                self.enqueue_retry(encoded);
            }
        }
        delivered
    }

    fn make_record(&mut self, s: &PhysicalSample) -> EnergyRecord {
        let nominal = self.nominal.get(&s.rail_name).copied().unwrap_or(0.0);
        let window: &[PhysicalSample] = match self.voltages.get_mut(&s.rail_name) {
            Some(h) => h.make_contiguous(),
            None => &[],
        };
        let (v, is_nominal) = pair_voltage(s, window, nominal);
        if is_nominal {
            self.stats.nominal_pairs += 1;
        }
        EnergyRecord {
            node_id: self.node_id.clone(),
            rail_name: s.rail_name.clone(),
            t_ns: s.t_ns,
            i_amps: s.value,
            v_volts: v,
            e_joules: energy_of(s.value, v, s.window_ns),
            window_ns: s.window_ns,
            seq: s.seq,
            nominal_voltage: is_nominal,
        }
    }

    fn try_publish(&mut self, topic: &str, payload: &[u8]) -> bool {
        match self.publisher.publish(topic, payload) {
            Ok(()) => {
                self.stats.published += 1;
                true
            }
            Err(e) => {
                self.stats.publish_failures += 1;
                log::debug!("publish to {topic} failed: {e}");
                false
            }
        }
    }

    fn enqueue_retry(&mut self, msg: (String, Vec<u8>)) {
        if self.retry.len() == self.retry_capacity {
            self.retry.pop_front();
            self.stats.retry_dropped += 1;
        }
        self.retry.push_back(msg);
    }

    /// Resends buffered messages in order, stopping at the first failure.
    pub fn flush_retry(&mut self) -> usize {
        let mut sent = 0;
        while let Some((topic, payload)) = self.retry.front() {
            let (topic, payload) = (topic.clone(), payload.clone());
            if !self.try_publish(&topic, &payload) {
                break;
            }
            self.retry.pop_front();
            sent += 1;
        }
        sent
    }
}
