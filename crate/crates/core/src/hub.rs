//! Central telemetry hub: validation, loss accounting, storage and queries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use thiserror::Error;

use crate::collector::{decode_record, is_valid_segment};
use crate::store::{Recovery, Store, StoreError};
use crate::TOPIC_PREFIX;

pub use crate::store::StoredPoint;

/// Points older than this, relative to the newest point of their series,
/// are rejected.
pub const REORDER_HORIZON_NS: u64 = 10_000_000_000;

/// Largest seq gap whose individual numbers are remembered for late fills.
const MAX_TRACKED_GAP: u32 = 1 << 16;

pub const CSV_HEADER: &str = "node,rail,ts_ns,i_a,v_v,e_j,window_ns,seq";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SeriesKey {
    pub node_id: String,
    pub rail_name: String,
}

impl SeriesKey {
    pub fn new(node_id: &str, rail_name: &str) -> SeriesKey {
        SeriesKey {
            node_id: node_id.to_owned(),
            rail_name: rail_name.to_owned(),
        }
    }
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.node_id, self.rail_name)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("topic {0:?} is not energymon/<node>/<rail>")]
    Topic(String),
    #[error("malformed payload: {0}")]
    Parse(String),
    #[error("payload {payload} does not match topic {topic}")]
    Mismatch {
        topic: SeriesKey,
        payload: SeriesKey,
    },
    #[error("{key} seq {seq} at {t_ns} ns is beyond the reorder horizon")]
    TooLate { key: SeriesKey, seq: u32, t_ns: u64 },
    #[error("{key} seq {seq} already ingested")]
    Duplicate { key: SeriesKey, seq: u32 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Error)]
pub enum HubError {
    #[error("query interval is empty: t0 {t0} >= t1 {t1}")]
    EmptyInterval { t0: u64, t1: u64 },
    #[error("{path}: {source}")]
    Export {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("store replay: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HubCounters {
    pub accepted: u64,
    pub topic_errors: u64,
    pub parse_errors: u64,
    pub mismatches: u64,
    pub too_late: u64,
    pub duplicates: u64,
    /// Net missing seq numbers over all series; late fills decrement it.
    pub losses: u64,
    pub store_warnings: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyQuery {
    pub joules: f64,
    pub points: usize,
    /// False when the series has never been seen.
    pub found: bool,
}

#[derive(Debug, Default)]
struct Series {
    /// Sorted by (t_ns, seq).
    points: Vec<StoredPoint>,
    /// Lowest and highest seq accounted for. Streams start at seq 1.
    seq_range: Option<(u32, u32)>,
    max_t_ns: u64,
    missing: BTreeSet<u32>,
    losses: u64,
}

impl Series {
    fn range(&self, t0: u64, t1: u64) -> &[StoredPoint] {
        let lo = self.points.partition_point(|p| p.t_ns < t0);
        let hi = self.points.partition_point(|p| p.t_ns < t1);
        &self.points[lo..hi.max(lo)]
    }

    fn total(&self) -> f64 {
        self.points.iter().map(|p| p.e_joules).sum()
    }
}

#[derive(Debug, Default)]
struct HubState {
    series: BTreeMap<SeriesKey, Series>,
    counters: HubCounters,
    store: Option<Store>,
}

impl HubState {
    fn replay(points: Vec<StoredPoint>, recovery: Recovery) -> Result<HubState, HubError> {
        let mut state = HubState::default();
        for (i, p) in points.into_iter().enumerate() {
            state
                .admit(p)
                .map_err(|e| HubError::Replay(format!("record {}: {e}", i + 1)))?;
        }
        state.counters.store_warnings = recovery.warnings;
        Ok(state)
    }

    /// Applies ordering, duplicate and loss rules, then indexes the point.
    fn admit(&mut self, point: StoredPoint) -> Result<StoredPoint, IngestError> {
        let key = SeriesKey::new(&point.node_id, &point.rail_name);
        let series = self.series.entry(key.clone()).or_default();
        if point.t_ns.saturating_add(REORDER_HORIZON_NS) < series.max_t_ns {
            self.counters.too_late += 1;
            return Err(IngestError::TooLate {
                key,
                seq: point.seq,
                t_ns: point.t_ns,
            });
        }
        let seq = point.seq;
        let (gap, bounds) = match series.seq_range {
            None => (Some(1..seq), (seq.min(1), seq)),
            Some((lo, hi)) if seq > hi => (Some(hi + 1..seq), (lo, seq)),
            Some((lo, hi)) if seq < lo => (Some(seq + 1..lo), (seq, hi)),
            Some(_) => {
                if !series.missing.remove(&seq) {
                    self.counters.duplicates += 1;
                    return Err(IngestError::Duplicate { key, seq });
                }
                series.losses -= 1;
                self.counters.losses -= 1;
                (None, series.seq_range.expect("seen"))
            }
        };
        if let Some(gap) = gap {
            let n = gap.len() as u64;
            series.losses += n;
            self.counters.losses += n;
            if n <= MAX_TRACKED_GAP as u64 {
                series.missing.extend(gap);
            }
        }
        series.seq_range = Some(bounds);
        series.max_t_ns = series.max_t_ns.max(point.t_ns);
        let at = series
            .points
            .partition_point(|p| (p.t_ns, p.seq) <= (point.t_ns, point.seq));
        series.points.insert(at, point.clone());
        self.counters.accepted += 1;
        Ok(point)
    }
}

fn csv_float(x: f64) -> String {
    serde_json::to_string(&x).expect("finite floats serialize")
}

/// Parses `energymon/<node>/<rail>`.
pub fn parse_topic(topic: &str) -> Option<SeriesKey> {
    let mut it = topic.split('/');
    let (prefix, node, rail) = (it.next()?, it.next()?, it.next()?);
    if it.next().is_some()
        || prefix != TOPIC_PREFIX
        || !is_valid_segment(node)
        || !is_valid_segment(rail)
    {
        return None;
    }
    Some(SeriesKey::new(node, rail))
}

/// The hub. Shareable across threads; queries see a consistent snapshot
/// with respect to concurrent ingests.
#[derive(Debug, Default)]
pub struct Hub {
    state: RwLock<HubState>,
}

impl Hub {
    /// A hub without persistence.
    pub fn in_memory() -> Hub {
        Hub::default()
    }

    /// A hub writing to a fresh log at `path`, replacing any existing file.
    pub fn create(path: &Path) -> Result<Hub, HubError> {
        let hub = Hub::default();
        hub.write().store = Some(Store::create(path)?);
        Ok(hub)
    }

    /// Reopens a log, rebuilding every index and counter from its records.
    pub fn open(path: &Path) -> Result<(Hub, Recovery), HubError> {
        let (store, points, recovery) = Store::open(path)?;
        let mut state = HubState::replay(points, recovery)?;
        state.store = Some(store);
        Ok((
            Hub {
                state: RwLock::new(state),
            },
            recovery,
        ))
    }

    /// Loads a log for querying only. The file is not modified.
    pub fn load(path: &Path) -> Result<(Hub, Recovery), HubError> {
        let (points, recovery) = Store::read(path)?;
        let state = HubState::replay(points, recovery)?;
        Ok((
            Hub {
                state: RwLock::new(state),
            },
            recovery,
        ))
    }

    fn read(&self) -> RwLockReadGuard<'_, HubState> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, HubState> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Validates and stores one telemetry message received at `now_ns`.
    pub fn ingest(
        &self,
        topic: &str,
        payload: &[u8],
        now_ns: u64,
    ) -> Result<StoredPoint, IngestError> {
        let mut st = self.write();
        let Some(key) = parse_topic(topic) else {
            st.counters.topic_errors += 1;
            return Err(IngestError::Topic(topic.to_owned()));
        };
        let record = match decode_record(payload) {
            Ok(r) => r,
            Err(e) => {
                st.counters.parse_errors += 1;
                return Err(IngestError::Parse(e.to_string()));
            }
        };
        if record.node_id != key.node_id || record.rail_name != key.rail_name {
            st.counters.mismatches += 1;
            return Err(IngestError::Mismatch {
                topic: key,
                payload: SeriesKey::new(&record.node_id, &record.rail_name),
            });
        }
        let point = st.admit(StoredPoint {
            node_id: record.node_id,
            rail_name: record.rail_name,
            t_ns: record.t_ns,
            i_amps: record.i_amps,
            v_volts: record.v_volts,
            e_joules: record.e_joules,
            window_ns: record.window_ns,
            seq: record.seq,
            ingest_t_ns: now_ns,
        })?;
        if let Some(store) = st.store.as_mut() {
            store.append(&point)?;
        }
        Ok(point)
    }

    pub fn flush(&self) -> Result<(), HubError> {
        if let Some(store) = self.write().store.as_mut() {
            store.flush()?;
        }
        Ok(())
    }

    pub fn counters(&self) -> HubCounters {
        self.read().counters
    }

    pub fn series_keys(&self) -> Vec<SeriesKey> {
        self.read().series.keys().cloned().collect()
    }

    pub fn series_losses(&self, key: &SeriesKey) -> u64 {
        self.read().series.get(key).map_or(0, |s| s.losses)
    }

    /// Every stored point of a series, in time order.
    pub fn points(&self, key: &SeriesKey) -> Vec<StoredPoint> {
        self.read()
            .series
            .get(key)
            .map(|s| s.points.clone())
            .unwrap_or_default()
    }

    /// Sum of energy of points with `t0 <= t_ns < t1`.
    pub fn query_energy(
        &self,
        key: &SeriesKey,
        t0_ns: u64,
        t1_ns: u64,
    ) -> Result<EnergyQuery, HubError> {
        if t0_ns >= t1_ns {
            return Err(HubError::EmptyInterval {
                t0: t0_ns,
                t1: t1_ns,
            });
        }
        let st = self.read();
        Ok(match st.series.get(key) {
            None => EnergyQuery {
                joules: 0.0,
                points: 0,
                found: false,
            },
            Some(s) => {
                let r = s.range(t0_ns, t1_ns);
                EnergyQuery {
                    joules: r.iter().map(|p| p.e_joules).sum(),
                    points: r.len(),
                    found: true,
                }
            }
        })
    }

    /// Mean power over `[t0, t1)` in watts.
    pub fn query_avg_power(
        &self,
        key: &SeriesKey,
        t0_ns: u64,
        t1_ns: u64,
    ) -> Result<f64, HubError> {
        let q = self.query_energy(key, t0_ns, t1_ns)?;
        Ok(q.joules / ((t1_ns - t0_ns) as f64 * 1e-9))
    }

    /// Whole-series energy.
    pub fn series_total(&self, key: &SeriesKey) -> f64 {
        self.read().series.get(key).map_or(0.0, Series::total)
    }

    /// Sum of a node's series totals, in rail-name order.
    pub fn node_total(&self, node_id: &str) -> f64 {
        self.read()
            .series
            .iter()
            .filter(|(k, _)| k.node_id == node_id)
            .map(|(_, s)| s.total())
            .sum()
    }

    pub fn node_ids(&self) -> Vec<String> {
        let ids: BTreeSet<String> = self
            .read()
            .series
            .keys()
            .map(|k| k.node_id.clone())
            .collect();
        ids.into_iter().collect()
    }

    /// Sum of [`Hub::node_total`] over all nodes, in node order.
    pub fn cluster_total(&self) -> f64 {
        self.node_ids().iter().map(|n| self.node_total(n)).sum()
    }

    /// Writes the selected points in `[t0, t1)` as CSV, sorted by node,
    /// rail and time.
    pub fn write_csv(
        &self,
        keys: &[SeriesKey],
        t0_ns: u64,
        t1_ns: u64,
        out: &mut impl Write,
    ) -> io::Result<()> {
        let mut keys = keys.to_vec();
        keys.sort();
        keys.dedup();
        let st = self.read();
        writeln!(out, "{CSV_HEADER}")?;
        for key in &keys {
            let Some(s) = st.series.get(key) else {
                continue;
            };
            let rows = if t0_ns < t1_ns {
                s.range(t0_ns, t1_ns)
            } else {
                &[]
            };
            for p in rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    p.node_id,
                    p.rail_name,
                    p.t_ns,
                    csv_float(p.i_amps),
                    csv_float(p.v_volts),
                    csv_float(p.e_joules),
                    p.window_ns,
                    p.seq
                )?;
            }
        }
        Ok(())
    }

    pub fn export_csv(
        &self,
        keys: &[SeriesKey],
        t0_ns: u64,
        t1_ns: u64,
        path: &Path,
    ) -> Result<(), HubError> {
        let wrap = |source| HubError::Export {
            path: path.to_owned(),
            source,
        };
        let file = std::fs::File::create(path).map_err(wrap)?;
        let mut w = io::BufWriter::new(file);
        self.write_csv(keys, t0_ns, t1_ns, &mut w).map_err(wrap)?;
        w.flush().map_err(wrap)
    }
}
