//! Runtime-monitor firmware: register polling, unit conversion, mailbox.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Mutex, MutexGuard};

use crate::crossbar::{CrossbarError, CrossbarMap};
use crate::registers::RegisterBank;
use crate::sense::{AdcSpec, Board, ChannelKind, ChannelSpec, SenseError};

pub const DEFAULT_MAILBOX_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quantity {
    Current,
    Voltage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalSample {
    pub rail_name: String,
    pub kind: Quantity,
    /// Amps or volts.
    pub value: f64,
    pub t_ns: u64,
    pub window_ns: u64,
    pub seq: u32,
}

#[derive(Debug, Default)]
struct MailboxInner {
    queue: VecDeque<PhysicalSample>,
    pushed: u64,
    popped: u64,
    dropped: u64,
}

/// Bounded FIFO between the monitor core and the collector.
///
/// When full, a push evicts the oldest entry and counts it as dropped.
/// Safe to share between one producer thread and one consumer thread.
#[derive(Debug)]
pub struct Mailbox {
    capacity: usize,
    inner: Mutex<MailboxInner>,
}

impl Default for Mailbox {
    fn default() -> Self {
        Mailbox::new(DEFAULT_MAILBOX_CAPACITY)
    }
}

impl Mailbox {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Mailbox {
        assert!(capacity > 0, "mailbox capacity must be at least 1");
        Mailbox {
            capacity,
            inner: Mutex::new(MailboxInner::default()),
        }
    }

    fn lock(&self) -> MutexGuard<'_, MailboxInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Enqueues a sample, returning the evicted one if the box was full.
    pub fn push(&self, sample: PhysicalSample) -> Option<PhysicalSample> {
        let mut inner = self.lock();
        inner.pushed += 1;
        let evicted = if inner.queue.len() == self.capacity {
            inner.dropped += 1;
            inner.queue.pop_front()
        } else {
            None
        };
        inner.queue.push_back(sample);
        evicted
    }

    pub fn pop(&self) -> Option<PhysicalSample> {
        let mut inner = self.lock();
        let s = inner.queue.pop_front();
        if s.is_some() {
            inner.popped += 1;
        }
        s
    }

    pub fn drain(&self) -> Vec<PhysicalSample> {
        let mut inner = self.lock();
        let out: Vec<_> = inner.queue.drain(..).collect();
        inner.popped += out.len() as u64;
        out
    }

    pub fn dropped(&self) -> u64 {
        self.lock().dropped
    }

    pub fn pushed(&self) -> u64 {
        self.lock().pushed
    }

    pub fn popped(&self) -> u64 {
        self.lock().popped
    }

    pub fn len(&self) -> usize {
        self.lock().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// ADC input voltage represented by `code` (inverse of the floor quantizer).
pub fn code_to_adc_voltage(code: u32, adc: &AdcSpec) -> f64 {
    code as f64 * adc.vref_v / adc.full_scale() as f64
}

fn current_unfloored(code: u32, spec: &ChannelSpec, adc: &AdcSpec) -> f64 {
    (code_to_adc_voltage(code, adc) - spec.cond_offset_v) / spec.cond_gain / spec.r_shunt_ohm
}

/// Shunt current from a current-channel code, floored at zero.
pub fn reconstruct_current(
    code: u32,
    spec: &ChannelSpec,
    adc: &AdcSpec,
) -> Result<f64, SenseError> {
    if spec.kind != ChannelKind::CurrentSense {
        return Err(SenseError::KindMismatch {
            channel: spec.channel_id,
            expected: ChannelKind::CurrentSense,
        });
    }
    Ok(current_unfloored(code, spec, adc).max(0.0))
}

pub fn reconstruct_voltage(
    code: u32,
    spec: &ChannelSpec,
    adc: &AdcSpec,
) -> Result<f64, SenseError> {
    if spec.kind != ChannelKind::VoltageSense {
        return Err(SenseError::KindMismatch {
            channel: spec.channel_id,
            expected: ChannelKind::VoltageSense,
        });
    }
    Ok(code_to_adc_voltage(code, adc) / spec.divider_ratio)
}

/// Register channel to sensing-line spec, resolved through the crossbar.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelTable {
    by_channel: BTreeMap<u32, ChannelSpec>,
}

impl ChannelTable {
    pub fn build(board: &Board, crossbar: &CrossbarMap) -> Result<ChannelTable, CrossbarError> {
        let mut by_channel = BTreeMap::new();
        for spec in board.channels() {
            let channel = crossbar.route(spec.channel_id as u32)?;
            by_channel.insert(channel, spec.clone());
        }
        Ok(ChannelTable { by_channel })
    }

    pub fn get(&self, channel: u32) -> Option<&ChannelSpec> {
        self.by_channel.get(&channel)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &ChannelSpec)> {
        self.by_channel.iter().map(|(c, s)| (*c, s))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MonitorStats {
    /// Register updates seen, including ones overwritten before a poll.
    pub updates: u64,
    /// Updates overwritten in the register before the monitor read them.
    pub missed: u64,
    /// Samples pushed into the mailbox.
    pub forwarded: u64,
    /// Mailbox evictions caused by this monitor's pushes.
    pub evicted: u64,
    pub evicted_current: u64,
    /// Current reconstructions that came out negative and were floored to 0.
    pub negative_floored: u64,
}

/// The bare-metal monitor loop state.
#[derive(Debug)]
pub struct Monitor {
    table: ChannelTable,
    adc: AdcSpec,
    window_ns: u64,
    last_seq: BTreeMap<u32, u32>,
    stats: MonitorStats,
}

impl Monitor {
    pub fn new(table: ChannelTable, adc: AdcSpec, window_ns: u64) -> Monitor {
        Monitor {
            table,
            adc,
            window_ns,
            last_seq: BTreeMap::new(),
            stats: MonitorStats::default(),
        }
    }

    pub fn stats(&self) -> MonitorStats {
        self.stats
    }

    pub fn table(&self) -> &ChannelTable {
        &self.table
    }

    /// One pass over the register bank; returns how many samples were pushed.
    ///
    /// Only channels whose sequence number moved since the previous pass are
    /// converted, so each latch is forwarded at most once.
    pub fn poll_once(&mut self, bank: &RegisterBank, mailbox: &Mailbox) -> usize {
        let mut pushed = 0;
        for (channel, spec) in self.table.iter() {
            let Ok(snap) = bank.read(channel) else {
                continue;
            };
            let last = self.last_seq.get(&channel).copied().unwrap_or(0);
            if !snap.has_data() || snap.seq == last {
                continue;
            }
            let delta = snap.seq.wrapping_sub(last) as u64;
            self.stats.updates += delta;
            self.stats.missed += delta - 1;
            self.last_seq.insert(channel, snap.seq);

            let (kind, value) = match spec.kind {
                ChannelKind::CurrentSense => {
                    if current_unfloored(snap.avg_code, spec, &self.adc) < 0.0 {
                        self.stats.negative_floored += 1;
                    }
                    let v = reconstruct_current(snap.avg_code, spec, &self.adc)
                        .expect("current channel");
                    (Quantity::Current, v)
                }
                ChannelKind::VoltageSense => (
                    Quantity::Voltage,
                    reconstruct_voltage(snap.avg_code, spec, &self.adc).expect("voltage channel"),
                ),
            };
            let sample = PhysicalSample {
                rail_name: spec.rail_name.clone(),
                kind,
                value,
                t_ns: snap.t_ns,
                window_ns: self.window_ns,
                seq: snap.seq,
            };
            if let Some(evicted) = mailbox.push(sample) {
                self.stats.evicted += 1;
                if evicted.kind == Quantity::Current {
                    self.stats.evicted_current += 1;
                }
            }
            self.stats.forwarded += 1;
            pushed += 1;
        }
        pushed
    }
}
