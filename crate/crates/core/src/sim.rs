//! Discrete-event cluster simulator.
//!
//! Every node runs sense model, averaging FSM, monitor firmware and collector
//! under one virtual clock in integer nanoseconds. The smallest event is a
//! single ADC conversion. The monitor polls every `t_avg / 2` and the
//! collector runs right after each poll. At equal timestamps conversions run
//! before polls and lower node indices first, so a run is a pure function of
//! its configuration and seed.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use energymon_mqtt::{Client, LocalBroker, LocalClient, QoS, Subscription, TopicFilter};
use serde::Serialize;
use thiserror::Error;

use crate::collector::{
    is_valid_segment, CollectorStats, EnergyCollector, Publisher, DEFAULT_RETRY_CAPACITY,
};
use crate::conf::{ConfDoc, ConfError, Section};
use crate::crossbar::CrossbarMap;
use crate::fsm::{AvgFsm, FsmConfig, FsmError};
use crate::hub::{Hub, IngestError, SeriesKey};
use crate::monitor::{ChannelTable, Mailbox, Monitor, MonitorStats, DEFAULT_MAILBOX_CAPACITY};
use crate::profile::{analytic_energy, WorkloadProfile};
use crate::sense::{AdcSpec, Board, ChannelKind, NoiseSource, RailState};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error(transparent)]
    Fsm(#[from] FsmError),
    #[error("transport: {0}")]
    Transport(String),
    #[error("hub: {0}")]
    Hub(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub node_id: String,
    pub board: Board,
    /// Routes board sensing lines (channel ids) to FSM register channels.
    pub crossbar: CrossbarMap,
    pub fsm: FsmConfig,
    pub mailbox_capacity: usize,
    pub retry_capacity: usize,
    /// Gaussian noise on the ADC input, volts RMS. Zero disables it.
    pub noise_sigma_v: f64,
    pub profile: WorkloadProfile,
}

impl NodeConfig {
    /// Default board, identity crossbar and default FSM.
    pub fn with_defaults(node_id: &str, profile: WorkloadProfile) -> NodeConfig {
        let fsm = FsmConfig::default();
        NodeConfig {
            node_id: node_id.to_owned(),
            board: Board::default_board(),
            crossbar: CrossbarMap::identity(fsm.total_channels()),
            fsm,
            mailbox_capacity: DEFAULT_MAILBOX_CAPACITY,
            retry_capacity: DEFAULT_RETRY_CAPACITY,
            noise_sigma_v: 0.0,
            profile,
        }
    }

    pub fn t_avg_ns(&self) -> u64 {
        self.fsm.t_avg_ns()
    }

    pub fn poll_period_ns(&self) -> u64 {
        (self.t_avg_ns() / 2).max(1)
    }

    /// Every problem with this node, prefixed with its id.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let id = &self.node_id;
        if !is_valid_segment(id) {
            out.push(format!("node {id:?}: id must be a non-empty topic segment"));
        }
        if let Err(e) = self.fsm.validate() {
            out.push(format!("node {id}: {e}"));
        }
        if self.board.channels().is_empty() {
            out.push(format!("node {id}: board has no channels"));
        }
        let total = self.fsm.total_channels();
        for spec in self.board.channels() {
            if !is_valid_segment(&spec.rail_name) {
                out.push(format!(
                    "node {id}: rail {:?} is not a valid topic segment",
                    spec.rail_name
                ));
            }
            match self.crossbar.route(spec.channel_id as u32) {
                Err(e) => out.push(format!("node {id}: {e}")),
                Ok(ch) if ch >= total => out.push(format!(
                    "node {id}: line {} routed to channel {ch}, but the FSM has {total} channels",
                    spec.channel_id
                )),
                Ok(_) => {}
            }
        }
        if self.mailbox_capacity == 0 {
            out.push(format!("node {id}: mailbox_capacity must be >= 1"));
        }
        if self.retry_capacity == 0 {
            out.push(format!("node {id}: retry_capacity must be >= 1"));
        }
        if !(self.noise_sigma_v >= 0.0 && self.noise_sigma_v.is_finite()) {
            out.push(format!("node {id}: noise_sigma_v must be finite and >= 0"));
        }
        out
    }
}

/// Checks every node and cross-node constraint before any stepping.
pub fn validate_cluster(nodes: &[NodeConfig]) -> Result<(), SimError> {
    let mut problems: Vec<String> = nodes.iter().flat_map(NodeConfig::problems).collect();
    let mut seen = std::collections::BTreeSet::new();
    for n in nodes {
        if !seen.insert(&n.node_id) {
            problems.push(format!("node {}: duplicate node id", n.node_id));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(SimError::Config(problems))
    }
}

const NODE_KEYS: &[&str] = &[
    "board",
    "crossbar",
    "profile",
    "k_window",
    "n_channels_per_adc",
    "adc_count",
    "adc_bits",
    "adc_vref_v",
    "adc_t_sample_min_ns",
    "mailbox_capacity",
    "retry_capacity",
    "noise_sigma_v",
];

fn read_file(path: &Path) -> Result<String, SimError> {
    std::fs::read_to_string(path).map_err(|e| SimError::Load {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn load_err(path: &Path, e: impl std::fmt::Display) -> SimError {
    SimError::Load {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

fn parse_node(section: &Section, base: &Path, cfg_path: &Path) -> Result<NodeConfig, SimError> {
    let conf = |e: ConfError| load_err(cfg_path, e);
    let node_id = section
        .suffix("node")
        .ok_or_else(|| {
            conf(ConfError::new(
                section.line,
                format!("expected [node.<id>], got [{}]", section.name),
            ))
        })?
        .to_owned();
    section.check_keys(NODE_KEYS).map_err(conf)?;

    let profile_path = base.join(&section.require("profile").map_err(conf)?.value);
    let profile = WorkloadProfile::parse(&read_file(&profile_path)?)
        .map_err(|e| load_err(&profile_path, e))?;
    let mut node = NodeConfig::with_defaults(&node_id, profile);

    if let Some(e) = section.get("board") {
        let p = base.join(&e.value);
        node.board = Board::parse(&read_file(&p)?).map_err(|e| load_err(&p, e))?;
    }
    let defaults = AdcSpec::default();
    node.fsm = FsmConfig {
        k_window: section
            .parse_or("k_window", node.fsm.k_window)
            .map_err(conf)?,
        n_channels_per_adc: section
            .parse_or("n_channels_per_adc", node.fsm.n_channels_per_adc)
            .map_err(conf)?,
        adc_count: section
            .parse_or("adc_count", node.fsm.adc_count)
            .map_err(conf)?,
        adc: AdcSpec {
            bits: section.parse_or("adc_bits", defaults.bits).map_err(conf)?,
            vref_v: section
                .parse_or("adc_vref_v", defaults.vref_v)
                .map_err(conf)?,
            t_sample_min_ns: section
                .parse_or("adc_t_sample_min_ns", defaults.t_sample_min_ns)
                .map_err(conf)?,
        },
    };
    let lines = node
        .board
        .channels()
        .iter()
        .map(|c| c.channel_id as u32 + 1)
        .max()
        .unwrap_or(0);
    node.crossbar = match section.get("crossbar") {
        Some(e) => {
            let p = base.join(&e.value);
            CrossbarMap::parse(&read_file(&p)?, lines, node.fsm.total_channels())
                .map_err(|e| load_err(&p, e))?
        }
        None => CrossbarMap::identity(lines.max(node.fsm.total_channels())),
    };
    node.mailbox_capacity = section
        .parse_or("mailbox_capacity", node.mailbox_capacity)
        .map_err(conf)?;
    node.retry_capacity = section
        .parse_or("retry_capacity", node.retry_capacity)
        .map_err(conf)?;
    node.noise_sigma_v = section.parse_or("noise_sigma_v", 0.0).map_err(conf)?;
    Ok(node)
}

/// Loads a cluster description: one `[node.<id>]` section per node. File
/// references are resolved relative to the config file.
pub fn load_cluster(path: &Path) -> Result<Vec<NodeConfig>, SimError> {
    let text = read_file(path)?;
    let doc = ConfDoc::parse(&text).map_err(|e| load_err(path, e))?;
    if let Some(e) = doc.global.entries.first() {
        return Err(load_err(
            path,
            ConfError::new(e.line, "key outside a [node.<id>] section"),
        ));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let nodes = doc
        .sections
        .iter()
        .map(|s| parse_node(s, base, path))
        .collect::<Result<Vec<_>, _>>()?;
    if nodes.is_empty() {
        return Err(load_err(path, "no [node.<id>] sections"));
    }
    validate_cluster(&nodes)?;
    Ok(nodes)
}

/// Half-open virtual-time interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start_ns: u64,
    pub end_ns: u64,
}

impl Interval {
    pub fn new(start_ns: u64, end_ns: u64) -> Interval {
        Interval { start_ns, end_ns }
    }

    pub fn contains(&self, t_ns: u64) -> bool {
        self.start_ns <= t_ns && t_ns < self.end_ns
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultPlan {
    /// Every publish fails while the broker is out.
    pub broker_outages: Vec<Interval>,
    /// The named node's collector skips its ticks, so its mailbox fills.
    pub collector_stalls: Vec<(String, Interval)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimOptions {
    pub t_end_ns: u64,
    pub seed: u64,
    pub faults: FaultPlan,
}

/// How collectors reach the broker.
pub trait Transport {
    type Pub: Publisher;
    fn connect(&mut self, node: &NodeConfig) -> Result<Self::Pub, SimError>;
    /// Called before each collector tick.
    fn before_tick(&mut self, _now_ns: u64) {}
    /// Called after each poll, whether or not the collector ran.
    fn after_tick(&mut self, _now_ns: u64) -> Result<(), SimError> {
        Ok(())
    }
}

/// In-process broker feeding a hub, with scripted outages.
pub struct InProcess<'a> {
    broker: LocalBroker,
    hub: &'a Hub,
    hub_client: LocalClient,
    outages: Vec<Interval>,
}

impl<'a> InProcess<'a> {
    pub fn new(broker: &LocalBroker, hub: &'a Hub, outages: Vec<Interval>) -> InProcess<'a> {
        let hub_client = broker.connect("energymon-hub", 0);
        let filter = TopicFilter::parse("energymon/#").expect("static filter");
        hub_client
            .subscribe(&[Subscription {
                filter,
                qos: QoS::AtMostOnce,
            }])
            .expect("fresh session");
        InProcess {
            broker: broker.clone(),
            hub,
            hub_client,
            outages,
        }
    }
}

impl Transport for InProcess<'_> {
    type Pub = LocalClient;

    fn connect(&mut self, node: &NodeConfig) -> Result<LocalClient, SimError> {
        Ok(self
            .broker
            .connect(&format!("collector-{}", node.node_id), 0))
    }

    fn before_tick(&mut self, now_ns: u64) {
        self.broker.set_time(now_ns);
        self.broker
            .set_available(!self.outages.iter().any(|o| o.contains(now_ns)));
    }

    fn after_tick(&mut self, now_ns: u64) -> Result<(), SimError> {
        for msg in self.hub_client.drain() {
            match self.hub.ingest(&msg.topic, &msg.payload, now_ns) {
                Ok(_) => {}
                Err(IngestError::Store(e)) => return Err(IngestError::Store(e).into()),
                Err(e) => log::warn!("hub rejected message on {}: {e}", msg.topic),
            }
        }
        Ok(())
    }
}

/// Publishes to an external broker over TCP, optionally pacing virtual time
/// against the wall clock.
pub struct TcpTransport {
    addr: SocketAddr,
    keepalive_s: u16,
    pace: Option<Instant>,
}

impl TcpTransport {
    pub fn new(addr: SocketAddr, realtime: bool) -> TcpTransport {
        TcpTransport {
            addr,
            keepalive_s: 30,
            pace: realtime.then(Instant::now),
        }
    }
}

impl Transport for TcpTransport {
    type Pub = Client;

    fn connect(&mut self, node: &NodeConfig) -> Result<Client, SimError> {
        Client::connect(
            self.addr,
            &format!("collector-{}", node.node_id),
            self.keepalive_s,
        )
        .map_err(|e| SimError::Transport(format!("{}: {e}", self.addr)))
    }

    fn after_tick(&mut self, now_ns: u64) -> Result<(), SimError> {
        if let Some(start) = self.pace {
            let due = start + Duration::from_nanos(now_ns);
            let wait = due.saturating_duration_since(Instant::now());
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
        Ok(())
    }
}

struct NodeRuntime<P> {
    fsm: AvgFsm,
    monitor: Monitor,
    mailbox: Mailbox,
    collector: EnergyCollector<P>,
    noise: Option<NoiseSource>,
    /// Board channel index wired to each FSM register channel.
    line_of_channel: Vec<Option<usize>>,
    stalls: Vec<Interval>,
    polls: u64,
}

const NODE_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

impl<P: Publisher> NodeRuntime<P> {
    fn new(
        cfg: &NodeConfig,
        idx: usize,
        opts: &SimOptions,
        publisher: P,
    ) -> Result<Self, SimError> {
        let fsm = AvgFsm::new(cfg.fsm)?;
        let table = ChannelTable::build(&cfg.board, &cfg.crossbar)
            .map_err(|e| SimError::Config(vec![format!("node {}: {e}", cfg.node_id)]))?;
        let mut line_of_channel = vec![None; cfg.fsm.total_channels() as usize];
        for (i, spec) in cfg.board.channels().iter().enumerate() {
            let ch = cfg
                .crossbar
                .route(spec.channel_id as u32)
                .expect("validated") as usize;
            line_of_channel[ch] = Some(i);
        }
        let noise = if cfg.noise_sigma_v > 0.0 {
            let seed = opts.seed ^ (idx as u64 + 1).wrapping_mul(NODE_SEED_MIX);
            Some(
                NoiseSource::new(cfg.noise_sigma_v, seed)
                    .map_err(|e| SimError::Config(vec![e.to_string()]))?,
            )
        } else {
            None
        };
        let nominal: BTreeMap<String, f64> = cfg
            .board
            .channels()
            .iter()
            .map(|c| (c.rail_name.clone(), c.nominal_voltage_v))
            .collect();
        Ok(NodeRuntime {
            fsm,
            monitor: Monitor::new(table, cfg.fsm.adc, cfg.t_avg_ns()),
            mailbox: Mailbox::new(cfg.mailbox_capacity),
            collector: EnergyCollector::new(&cfg.node_id, publisher, nominal)
                .with_retry_capacity(cfg.retry_capacity),
            noise,
            line_of_channel,
            stalls: opts
                .faults
                .collector_stalls
                .iter()
                .filter(|(n, _)| *n == cfg.node_id)
                .map(|(_, i)| *i)
                .collect(),
            polls: 0,
        })
    }

    fn convert(&mut self, cfg: &NodeConfig) -> Result<(), SimError> {
        let NodeRuntime {
            fsm,
            noise,
            line_of_channel,
            ..
        } = self;
        let adc = cfg.fsm.adc;
        let mut sampler = |channel: u32, t_ns: u64| -> Result<u32, String> {
            let Some(i) = line_of_channel[channel as usize] else {
                return Ok(0);
            };
            let spec = &cfg.board.channels()[i];
            let load = cfg.profile.state_at(&spec.rail_name, t_ns);
            let state = RailState {
                i_amps: load.i_amps,
                v_rail: load.v_volts,
            };
            crate::sense::sample_channel(state, spec, &adc, t_ns, noise.as_mut())
                .map(|s| s.code)
                .map_err(|e| e.to_string())
        };
        fsm.step(&mut sampler)?;
        Ok(())
    }

    fn poll(&mut self, now_ns: u64, transport: &mut impl Transport) {
        self.monitor.poll_once(self.fsm.bank(), &self.mailbox);
        self.polls += 1;
        if !self.stalls.iter().any(|s| s.contains(now_ns)) {
            transport.before_tick(now_ns);
            self.collector.tick(&self.mailbox);
        }
    }
}

/// Everything measured about one node during a run.
pub struct NodeOutcome<P> {
    pub node_id: String,
    pub monitor: MonitorStats,
    pub mailbox_pushed: u64,
    pub mailbox_popped: u64,
    pub mailbox_dropped: u64,
    pub mailbox_occupancy: usize,
    pub collector: CollectorStats,
    pub retry_pending: usize,
    /// Collector accumulator totals by rail.
    pub rail_joules: BTreeMap<String, f64>,
    pub publisher: P,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventClass {
    Conversion = 0,
    Poll = 1,
}

/// Runs the event loop for `nodes` over `[0, opts.t_end_ns]`.
pub fn run_with_transport<T: Transport>(
    nodes: &[NodeConfig],
    opts: &SimOptions,
    transport: &mut T,
) -> Result<Vec<NodeOutcome<T::Pub>>, SimError> {
    validate_cluster(nodes)?;
    if opts.t_end_ns == 0 {
        return Ok(Vec::new());
    }
    let mut runtimes = Vec::with_capacity(nodes.len());
    for (i, cfg) in nodes.iter().enumerate() {
        let publisher = transport.connect(cfg)?;
        runtimes.push(NodeRuntime::new(cfg, i, opts, publisher)?);
    }

    let t_end = opts.t_end_ns;
    let mut queue = BinaryHeap::new();
    for (i, cfg) in nodes.iter().enumerate() {
        let ts = cfg.fsm.adc.t_sample_min_ns;
        if ts <= t_end {
            queue.push(Reverse((ts, EventClass::Conversion, i)));
        }
        queue.push(Reverse((
            cfg.poll_period_ns().min(t_end),
            EventClass::Poll,
            i,
        )));
    }
    while let Some(Reverse((now, class, i))) = queue.pop() {
        let cfg = &nodes[i];
        let rt = &mut runtimes[i];
        match class {
            EventClass::Conversion => {
                rt.convert(cfg)?;
                let next = rt.fsm.next_conversion_ns();
                if next <= t_end {
                    queue.push(Reverse((next, EventClass::Conversion, i)));
                }
            }
            EventClass::Poll => {
                rt.poll(now, transport);
                transport.after_tick(now)?;
                if now < t_end {
                    let next = ((rt.polls + 1) * cfg.poll_period_ns()).min(t_end);
                    queue.push(Reverse((next, EventClass::Poll, i)));
                }
            }
        }
    }

    Ok(nodes
        .iter()
        .zip(runtimes)
        .map(|(cfg, rt)| NodeOutcome {
            node_id: cfg.node_id.clone(),
            monitor: rt.monitor.stats(),
            mailbox_pushed: rt.mailbox.pushed(),
            mailbox_popped: rt.mailbox.popped(),
            mailbox_dropped: rt.mailbox.dropped(),
            mailbox_occupancy: rt.mailbox.len(),
            collector: rt.collector.stats(),
            retry_pending: rt.collector.pending(),
            rail_joules: rt
                .collector
                .accumulators()
                .iter()
                .map(|(r, a)| (r.clone(), a.total_joules))
                .collect(),
            publisher: rt.collector.into_publisher(),
        })
        .collect())
}

fn rel_err(value: f64, oracle: f64) -> Option<f64> {
    (oracle != 0.0).then(|| (value - oracle) / oracle)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RailReport {
    pub node: String,
    pub rail: String,
    /// Collector accumulator total.
    pub measured_j: f64,
    /// Hub series total; absent when no hub observed the run.
    pub hub_j: Option<f64>,
    pub oracle_j: f64,
    /// Relative error of `hub_j` (or `measured_j` without a hub) against
    /// the oracle; absent when the oracle is zero.
    pub rel_err: Option<f64>,
    pub losses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReport {
    pub node: String,
    pub measured_j: f64,
    pub hub_j: Option<f64>,
    pub oracle_j: f64,
    pub rel_err: Option<f64>,
    /// Register updates observed by the monitor.
    pub updates: u64,
    /// Updates overwritten before the monitor polled them.
    pub missed: u64,
    /// Samples pushed into the mailbox.
    pub produced: u64,
    /// Samples taken out of the mailbox by the collector.
    pub forwarded: u64,
    /// Mailbox evictions.
    pub dropped: u64,
    pub dropped_current: u64,
    pub mailbox_occupancy: usize,
    pub negative_floored: u64,
    pub records: u64,
    pub published: u64,
    pub publish_failures: u64,
    pub retry_dropped: u64,
    pub retry_pending: usize,
    pub nominal_pairs: u64,
    pub losses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterReport {
    pub nodes: usize,
    pub t_end_ns: u64,
    pub seed: u64,
    pub measured_j: f64,
    pub hub_j: Option<f64>,
    pub oracle_j: f64,
    pub rel_err: Option<f64>,
    pub dropped: u64,
    pub losses: u64,
    pub hub_rejected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "scope", rename_all = "lowercase")]
pub enum ReportLine {
    Rail(RailReport),
    Node(NodeReport),
    Cluster(ClusterReport),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimulationReport {
    pub rails: Vec<RailReport>,
    pub nodes: Vec<NodeReport>,
    pub cluster: Option<ClusterReport>,
}

impl SimulationReport {
    pub fn is_empty(&self) -> bool {
        self.rails.is_empty() && self.nodes.is_empty() && self.cluster.is_none()
    }

    pub fn rail(&self, node: &str, rail: &str) -> Option<&RailReport> {
        self.rails.iter().find(|r| r.node == node && r.rail == rail)
    }

    pub fn node(&self, node: &str) -> Option<&NodeReport> {
        self.nodes.iter().find(|n| n.node == node)
    }

    /// One JSON object per line: rails, then nodes, then the cluster summary.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let lines = self
            .rails
            .iter()
            .cloned()
            .map(ReportLine::Rail)
            .chain(self.nodes.iter().cloned().map(ReportLine::Node))
            .chain(self.cluster.iter().cloned().map(ReportLine::Cluster));
        for l in lines {
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(&l).expect("report serializes")
            );
        }
        out
    }

    /// Builds the report from node outcomes, reading hub totals when a hub
    /// observed the run.
    pub fn build<P>(
        nodes: &[NodeConfig],
        outcomes: &[NodeOutcome<P>],
        hub: Option<&Hub>,
        opts: &SimOptions,
    ) -> Self {
        let mut report = SimulationReport::default();
        if outcomes.is_empty() {
            return report;
        }
        let t_end = opts.t_end_ns;
        let (mut c_measured, mut c_oracle, mut c_dropped) = (0.0, 0.0, 0);
        for (cfg, out) in nodes.iter().zip(outcomes) {
            let rails: Vec<String> = {
                let mut r: Vec<String> = cfg
                    .board
                    .channels()
                    .iter()
                    .filter(|c| c.kind == ChannelKind::CurrentSense)
                    .map(|c| c.rail_name.clone())
                    .collect();
                r.sort();
                r.dedup();
                r
            };
            let (mut n_measured, mut n_oracle, mut n_losses) = (0.0, 0.0, 0);
            for rail in &rails {
                let key = SeriesKey::new(&cfg.node_id, rail);
                let measured = out.rail_joules.get(rail).copied().unwrap_or(0.0);
                let hub_j = hub.map(|h| h.series_total(&key));
                let oracle = analytic_energy(&cfg.profile, rail, 0, t_end);
                let losses = hub.map_or(0, |h| h.series_losses(&key));
                n_measured += measured;
                n_oracle += oracle;
                n_losses += losses;
                report.rails.push(RailReport {
                    node: cfg.node_id.clone(),
                    rail: rail.clone(),
                    measured_j: measured,
                    hub_j,
                    oracle_j: oracle,
                    rel_err: rel_err(hub_j.unwrap_or(measured), oracle),
                    losses,
                });
            }
            let hub_j = hub.map(|h| h.node_total(&cfg.node_id));
            report.nodes.push(NodeReport {
                node: cfg.node_id.clone(),
                measured_j: n_measured,
                hub_j,
                oracle_j: n_oracle,
                rel_err: rel_err(hub_j.unwrap_or(n_measured), n_oracle),
                updates: out.monitor.updates,
                missed: out.monitor.missed,
                produced: out.mailbox_pushed,
                forwarded: out.mailbox_popped,
                dropped: out.mailbox_dropped,
                dropped_current: out.monitor.evicted_current,
                mailbox_occupancy: out.mailbox_occupancy,
                negative_floored: out.monitor.negative_floored,
                records: out.collector.records,
                published: out.collector.published,
                publish_failures: out.collector.publish_failures,
                retry_dropped: out.collector.retry_dropped,
                retry_pending: out.retry_pending,
                nominal_pairs: out.collector.nominal_pairs,
                losses: n_losses,
            });
            c_measured += n_measured;
            c_oracle += n_oracle;
            c_dropped += out.mailbox_dropped;
        }
        let hub_j = hub.map(Hub::cluster_total);
        let counters = hub.map(Hub::counters).unwrap_or_default();
        report.cluster = Some(ClusterReport {
            nodes: nodes.len(),
            t_end_ns: t_end,
            seed: opts.seed,
            measured_j: c_measured,
            hub_j,
            oracle_j: c_oracle,
            rel_err: rel_err(hub_j.unwrap_or(c_measured), c_oracle),
            dropped: c_dropped,
            losses: counters.losses,
            hub_rejected: counters.topic_errors
                + counters.parse_errors
                + counters.mismatches
                + counters.too_late
                + counters.duplicates,
        });
        report
    }
}

/// Runs the cluster through an in-process broker into `hub`.
pub fn run_simulation(
    nodes: &[NodeConfig],
    broker: &LocalBroker,
    hub: &Hub,
    opts: &SimOptions,
) -> Result<SimulationReport, SimError> {
    validate_cluster(nodes)?;
    if opts.t_end_ns == 0 {
        return Ok(SimulationReport::default());
    }
    let mut transport = InProcess::new(broker, hub, opts.faults.broker_outages.clone());
    let outcomes = run_with_transport(nodes, opts, &mut transport)?;
    for o in &outcomes {
        o.publisher.disconnect();
    }
    transport.hub_client.disconnect();
    hub.flush()
        .map_err(|e| SimError::Transport(e.to_string()))?;
    Ok(SimulationReport::build(nodes, &outcomes, Some(hub), opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{gen_profile, ProfileKind, RailLoad};

    const MS: u64 = 1_000_000;

    fn constant_node(id: &str) -> NodeConfig {
        let p = gen_profile(
            &ProfileKind::Constant {
                load: RailLoad::new(2.0, 0.85),
                duration_ns: 100 * MS,
            },
            Some("vdd_core"),
        )
        .unwrap();
        NodeConfig::with_defaults(id, p)
    }

    fn run(nodes: &[NodeConfig], t_end_ns: u64) -> (SimulationReport, Hub) {
        let hub = Hub::in_memory();
        let opts = SimOptions {
            t_end_ns,
            seed: 1,
            ..Default::default()
        };
        let r = run_simulation(nodes, &LocalBroker::new(), &hub, &opts).unwrap();
        (r, hub)
    }

    #[test]
    fn zero_duration_is_empty() {
        let (r, hub) = run(&[constant_node("n1")], 0);
        assert!(r.is_empty());
        assert_eq!(hub.counters().accepted, 0);
        assert_eq!(r.to_json_lines(), "");
    }

    #[test]
    fn constant_load_reaches_hub() {
        let (r, hub) = run(&[constant_node("n1")], 10 * MS);
        let rail = r.rail("n1", "vdd_core").unwrap();
        assert!(rail.rel_err.unwrap().abs() < 0.02, "{rail:?}");
        assert_eq!(rail.hub_j, Some(rail.measured_j));
        assert_eq!(hub.counters().losses, 0);
        let n = r.node("n1").unwrap();
        assert_eq!(n.dropped, 0);
        assert_eq!(n.produced, n.forwarded);
        assert_eq!(n.missed, 0);
    }

    #[test]
    fn identical_nodes_add_up() {
        let (one, _) = run(&[constant_node("a")], 5 * MS);
        let (three, _) = run(
            &[constant_node("a"), constant_node("b"), constant_node("c")],
            5 * MS,
        );
        let single = one.cluster.unwrap().hub_j.unwrap();
        assert_eq!(three.cluster.unwrap().hub_j.unwrap(), 3.0 * single);
    }

    #[test]
    fn report_is_deterministic_with_noise() {
        let mut n = constant_node("n1");
        n.noise_sigma_v = 0.002;
        let (a, _) = run(std::slice::from_ref(&n), 3 * MS);
        let (b, _) = run(&[n], 3 * MS);
        assert_eq!(a.to_json_lines(), b.to_json_lines());
    }

    #[test]
    fn validation_enumerates_problems() {
        let mut bad = constant_node("bad/id");
        bad.mailbox_capacity = 0;
        bad.crossbar = CrossbarMap::empty(16, 16);
        let dup = constant_node("x");
        let err = validate_cluster(&[bad, dup.clone(), dup]).unwrap_err();
        let SimError::Config(problems) = err else {
            panic!()
        };
        assert!(problems.len() > 16 + 2, "{problems:?}");
    }

    #[test]
    fn report_lines_are_tagged() {
        let (r, _) = run(&[constant_node("n1")], MS);
        let text = r.to_json_lines();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8 + 1 + 1);
        assert!(lines[0].starts_with(r#"{"scope":"rail","node":"n1","rail":"vdd_3v3""#));
        assert!(lines[8].starts_with(r#"{"scope":"node""#));
        assert!(lines[9].starts_with(r#"{"scope":"cluster""#));
    }
}
