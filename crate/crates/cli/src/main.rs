use std::error::Error;
use std::fmt::Display;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use energymon_core::conf::parse_duration;
use energymon_core::hub::{HubCounters, IngestError};
use energymon_core::profile::{ProfileKind, RailLoad};
use energymon_core::sim::{load_cluster, run_with_transport, NodeConfig, TcpTransport};
use energymon_core::{
    gen_profile, run_simulation, Hub, SeriesKey, SimOptions, SimulationReport, TOPIC_PREFIX,
};
use energymon_mqtt::{BrokerServer, Client, LocalBroker, QoS};

#[derive(Parser)]
#[command(
    name = "energymon",
    version,
    about = "Rail-level energy monitoring: broker, hub, simulated nodes and queries"
)]
struct Cli {
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run an MQTT broker.
    Broker(BrokerArgs),
    /// Subscribe to telemetry and persist it to a store file.
    Hub(HubArgs),
    /// Run one simulated node from a cluster config, publishing over TCP.
    Node(NodeArgs),
    /// Simulate a cluster and print the energy report.
    Simulate(SimulateArgs),
    /// Write a workload profile.
    GenProfile(GenProfileArgs),
    /// Energy and mean power of one series over [from, to).
    Query(QueryArgs),
    /// Export stored points in [from, to) as CSV.
    Export(ExportArgs),
}

fn duration(s: &str) -> Result<u64, String> {
    parse_duration(s)
}

#[derive(Args)]
struct BrokerArgs {
    /// Address to listen on.
    #[arg(long, default_value = "0.0.0.0:1883")]
    listen: String,
}

#[derive(Args)]
struct HubArgs {
    /// Broker address.
    #[arg(long, default_value = "127.0.0.1:1883")]
    broker: String,
    /// Store file. Existing records are kept and new ones appended.
    #[arg(long)]
    store: PathBuf,
    /// Start from an empty store instead of appending.
    #[arg(long)]
    fresh: bool,
    #[arg(long, default_value = "energymon-hub")]
    client_id: String,
    /// Keepalive in seconds.
    #[arg(long, default_value_t = 30)]
    keepalive: u16,
    /// Exit once no message has arrived for this long.
    #[arg(long, value_parser = duration)]
    idle_exit: Option<u64>,
}

#[derive(Args)]
struct NodeArgs {
    /// Cluster config file.
    #[arg(long)]
    config: PathBuf,
    /// Which node of the config to run.
    #[arg(long)]
    node: String,
    /// Broker address.
    #[arg(long, default_value = "127.0.0.1:1883")]
    broker: String,
    /// Virtual run length.
    #[arg(long, value_parser = duration)]
    t_end: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pace virtual time against the wall clock.
    #[arg(long)]
    realtime: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Cluster config file.
    #[arg(long)]
    config: PathBuf,
    /// Virtual run length.
    #[arg(long, value_parser = duration)]
    t_end: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Persist hub records to this file (replaced if present).
    #[arg(long)]
    store: Option<PathBuf>,
    /// Publish through an external broker instead of the in-process one.
    #[arg(long)]
    broker: Option<String>,
    /// Pace virtual time against the wall clock (external broker only).
    #[arg(long, requires = "broker")]
    realtime: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Constant,
    Step,
    #[value(name = "ann_epoch", alias = "ann-epoch")]
    AnnEpoch,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct GenProfileArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Rail to load; all rails when omitted.
    #[arg(long)]
    rail: Option<String>,
    /// Rail voltage in volts.
    #[arg(long, default_value_t = 0.85)]
    voltage: f64,
    /// Current in amps (constant).
    #[arg(long)]
    current: Option<f64>,
    /// Duration (constant).
    #[arg(long, value_parser = duration)]
    duration: Option<u64>,
    /// Low current in amps (step).
    #[arg(long)]
    low: Option<f64>,
    /// High current in amps (step).
    #[arg(long)]
    high: Option<f64>,
    /// Full low+high period (step).
    #[arg(long, value_parser = duration)]
    period: Option<u64>,
    /// Number of periods (step).
    #[arg(long)]
    count: Option<u64>,
    /// Data-loading phase: amps,duration (ann_epoch).
    #[arg(long, value_parser = phase)]
    load: Option<(f64, u64)>,
    /// Forward-pass phase: amps,duration (ann_epoch).
    #[arg(long, value_parser = phase)]
    forward: Option<(f64, u64)>,
    /// Backward-pass phase: amps,duration (ann_epoch).
    #[arg(long, value_parser = phase)]
    backward: Option<(f64, u64)>,
    /// Idle phase: amps,duration (ann_epoch).
    #[arg(long, value_parser = phase)]
    idle: Option<(f64, u64)>,
    /// Output file; standard output when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn phase(s: &str) -> Result<(f64, u64), String> {
    let (a, d) = s.split_once(',').ok_or("expected <amps>,<duration>")?;
    let amps = a.trim().parse().map_err(|e| format!("amps {a:?}: {e}"))?;
    Ok((amps, parse_duration(d.trim())?))
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    node: String,
    #[arg(long)]
    rail: String,
    #[arg(long, value_parser = duration, default_value = "0")]
    from: u64,
    #[arg(long, value_parser = duration)]
    to: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    store: PathBuf,
    /// Only this node.
    #[arg(long)]
    node: Option<String>,
    /// Only this rail.
    #[arg(long)]
    rail: Option<String>,
    #[arg(long, value_parser = duration, default_value = "0")]
    from: u64,
    #[arg(long, value_parser = duration)]
    to: u64,
    /// Output file; standard output when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

enum Failure {
    Usage(clap::Error),
    Runtime(Box<dyn Error>),
}

impl<E: Into<Box<dyn Error>>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(verb: &str, kind: ErrorKind, msg: impl Display) -> Failure {
    let mut cmd = Cli::command();
    cmd.build();
    let sub = cmd.find_subcommand_mut(verb).expect("known verb");
    Failure::Usage(sub.error(kind, msg))
}

fn verb_usage(verb: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match verb.and_then(|v| cmd.find_subcommand_mut(v)) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => {
                    if !e.render().to_string().contains("Usage:") {
                        eprintln!("\n{}", verb_usage(std::env::args().nth(1).as_deref()));
                    }
                    ExitCode::from(1)
                }
            };
        }
    };
    let result = match cli.command {
        Verb::Broker(a) => broker(a),
        Verb::Hub(a) => hub(a),
        Verb::Node(a) => node(a),
        Verb::Simulate(a) => simulate(a),
        Verb::GenProfile(a) => gen_profile_cmd(a),
        Verb::Query(a) => query(a),
        Verb::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("energymon: {e}");
            ExitCode::from(2)
        }
    }
}

fn wall_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos() as u64)
}

fn resolve(addr: &str) -> Result<SocketAddr, Box<dyn Error>> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| format!("{addr}: no address").into())
}

fn interrupt_flag() -> Result<Arc<AtomicBool>, ctrlc::Error> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))?;
    Ok(stop)
}

fn write_out(path: Option<&Path>, text: &str) -> io::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()
        }
    }
}

fn broker(a: BrokerArgs) -> Outcome {
    let server = BrokerServer::bind(&a.listen).map_err(|e| format!("{}: {e}", a.listen))?;
    let addr = server.local_addr()?;
    let handle = server.stop_flag();
    ctrlc::set_handler(move || handle.stop())?;
    println!("{addr}");
    io::stdout().flush()?;
    server.run()?;
    log::info!("broker stopped");
    Ok(())
}

fn subscribe_hub(addr: &str, client_id: &str, keepalive: u16) -> Result<Client, Box<dyn Error>> {
    let mut client = Client::connect(resolve(addr)?, client_id, keepalive)
        .map_err(|e| format!("{addr}: {e}"))?;
    let filter = format!("{TOPIC_PREFIX}/#");
    let granted = client.subscribe(&[(&filter, QoS::AtMostOnce)])?;
    if granted.first().copied().flatten().is_none() {
        return Err(format!("broker refused subscription to {filter}").into());
    }
    Ok(client)
}

/// Feeds broker traffic into `hub` until `stop` is raised or the stream has
/// been idle for `idle_exit`.
fn pump(
    client: &mut Client,
    hub: &Hub,
    stop: &AtomicBool,
    idle_exit: Option<Duration>,
) -> Result<(), Box<dyn Error>> {
    let mut last_msg = Instant::now();
    let mut last_flush = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        if let Some(msg) = client.recv_timeout(Duration::from_millis(100))? {
            last_msg = Instant::now();
            match hub.ingest(&msg.topic, &msg.payload, wall_ns()) {
                Ok(_) => {}
                Err(IngestError::Store(e)) => return Err(e.into()),
                Err(e) => log::warn!("rejected message on {}: {e}", msg.topic),
            }
        } else if idle_exit.is_some_and(|d| last_msg.elapsed() >= d) {
            break;
        }
        if last_flush.elapsed() >= Duration::from_secs(1) {
            hub.flush()?;
            last_flush = Instant::now();
        }
    }
    hub.flush()?;
    Ok(())
}

fn log_counters(c: &HubCounters) {
    log::info!(
        "hub: {} accepted, {} losses, {} duplicates, {} too late, {} malformed",
        c.accepted,
        c.losses,
        c.duplicates,
        c.too_late,
        c.topic_errors + c.parse_errors + c.mismatches
    );
}

fn hub(a: HubArgs) -> Outcome {
    let hub = if a.fresh {
        Hub::create(&a.store)?
    } else {
        let (hub, rec) = Hub::open(&a.store)?;
        if rec.points > 0 || rec.warnings > 0 {
            log::info!(
                "{}: reopened with {} records",
                a.store.display(),
                rec.points
            );
        }
        hub
    };
    let stop = interrupt_flag()?;
    let mut client = subscribe_hub(&a.broker, &a.client_id, a.keepalive)?;
    let result = pump(
        &mut client,
        &hub,
        &stop,
        a.idle_exit.map(Duration::from_nanos),
    );
    let _ = client.disconnect();
    hub.flush()?;
    log_counters(&hub.counters());
    Ok(result?)
}

fn load_nodes(path: &Path) -> Result<Vec<NodeConfig>, Failure> {
    Ok(load_cluster(path)?)
}

fn node(a: NodeArgs) -> Outcome {
    let nodes = load_nodes(&a.config)?;
    let Some(cfg) = nodes.into_iter().find(|n| n.node_id == a.node) else {
        return Err(format!("{}: no node {:?}", a.config.display(), a.node).into());
    };
    let nodes = [cfg];
    let opts = SimOptions {
        t_end_ns: a.t_end,
        seed: a.seed,
        ..Default::default()
    };
    let mut transport = TcpTransport::new(resolve(&a.broker)?, a.realtime);
    let outcomes = run_with_transport(&nodes, &opts, &mut transport)?;
    let report = SimulationReport::build(&nodes, &outcomes, None, &opts);
    for o in outcomes {
        let _ = o.publisher.disconnect();
    }
    write_out(None, &report.to_json_lines())?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Outcome {
    let nodes = load_nodes(&a.config)?;
    let opts = SimOptions {
        t_end_ns: a.t_end,
        seed: a.seed,
        ..Default::default()
    };
    let hub = Arc::new(match &a.store {
        Some(p) => Hub::create(p)?,
        None => Hub::in_memory(),
    });

    let report = match &a.broker {
        None => {
            let h = hub.clone();
            ctrlc::set_handler(move || {
                if let Err(e) = h.flush() {
                    eprintln!("energymon: {e}");
                }
                std::process::exit(130);
            })?;
            run_simulation(&nodes, &LocalBroker::new(), &hub, &opts)?
        }
        Some(addr) => {
            let stop = interrupt_flag()?;
            let ingest = match a.store {
                Some(_) => {
                    let mut client = subscribe_hub(addr, "energymon-simulate-hub", 30)?;
                    let (h, s) = (hub.clone(), stop.clone());
                    Some(thread::spawn(move || {
                        let r = pump(&mut client, &h, &s, Some(Duration::from_millis(500)))
                            .map_err(|e| e.to_string());
                        let _ = client.disconnect();
                        r
                    }))
                }
                None => None,
            };
            let mut transport = TcpTransport::new(resolve(addr)?, a.realtime);
            let outcomes = run_with_transport(&nodes, &opts, &mut transport);
            let with_hub = match ingest {
                Some(t) => {
                    if outcomes.is_err() {
                        stop.store(true, Ordering::SeqCst);
                    }
                    t.join().map_err(|_| "hub thread panicked")??;
                    true
                }
                None => false,
            };
            let outcomes = outcomes?;
            let report =
                SimulationReport::build(&nodes, &outcomes, with_hub.then_some(&*hub), &opts);
            for o in outcomes {
                let _ = o.publisher.disconnect();
            }
            report
        }
    };
    hub.flush()?;
    write_out(None, &report.to_json_lines())?;
    Ok(())
}

fn gen_profile_cmd(a: GenProfileArgs) -> Outcome {
    fn need<T>(v: Option<T>, flag: &str, kind: &str) -> Result<T, Failure> {
        v.ok_or_else(|| {
            usage(
                "gen-profile",
                ErrorKind::MissingRequiredArgument,
                format!("--kind {kind} requires --{flag}"),
            )
        })
    }
    let kind = match a.kind {
        Kind::Constant => ProfileKind::Constant {
            load: RailLoad::new(need(a.current, "current", "constant")?, a.voltage),
            duration_ns: need(a.duration, "duration", "constant")?,
        },
        Kind::Step => ProfileKind::Step {
            low_a: need(a.low, "low", "step")?,
            high_a: need(a.high, "high", "step")?,
            v_volts: a.voltage,
            period_ns: need(a.period, "period", "step")?,
            count: need(a.count, "count", "step")?,
        },
        Kind::AnnEpoch => {
            let ProfileKind::AnnEpoch {
                load,
                forward,
                backward,
                idle,
                ..
            } = ProfileKind::ann_epoch_default()
            else {
                unreachable!("default is an ann_epoch profile")
            };
            ProfileKind::AnnEpoch {
                v_volts: a.voltage,
                load: a.load.unwrap_or(load),
                forward: a.forward.unwrap_or(forward),
                backward: a.backward.unwrap_or(backward),
                idle: a.idle.unwrap_or(idle),
            }
        }
    };
    let profile = gen_profile(&kind, a.rail.as_deref())
        .map_err(|e| usage("gen-profile", ErrorKind::ValueValidation, e))?;
    write_out(a.output.as_deref(), &profile.to_text())?;
    Ok(())
}

fn load_store(verb: &str, path: &Path, from: u64, to: u64) -> Result<Hub, Failure> {
    if from >= to {
        return Err(usage(
            verb,
            ErrorKind::ValueValidation,
            format!("--from ({from} ns) must be before --to ({to} ns)"),
        ));
    }
    let (hub, rec) = Hub::load(path)?;
    if rec.warnings > 0 {
        log::warn!("{}: ignored an incomplete final record", path.display());
    }
    Ok(hub)
}

fn query(a: QueryArgs) -> Outcome {
    let hub = load_store("query", &a.store, a.from, a.to)?;
    let key = SeriesKey::new(&a.node, &a.rail);
    let q = hub.query_energy(&key, a.from, a.to)?;
    let power = hub.query_avg_power(&key, a.from, a.to)?;
    if !q.found {
        log::warn!("no series {key} in {}", a.store.display());
    }
    let line = serde_json::json!({
        "node": a.node,
        "rail": a.rail,
        "t0_ns": a.from,
        "t1_ns": a.to,
        "e_j": q.joules,
        "avg_power_w": power,
        "points": q.points,
        "found": q.found,
    });
    write_out(None, &format!("{line}\n"))?;
    Ok(())
}

fn export(a: ExportArgs) -> Outcome {
    let hub = load_store("export", &a.store, a.from, a.to)?;
    let keys: Vec<SeriesKey> = hub
        .series_keys()
        .into_iter()
        .filter(|k| a.node.as_ref().is_none_or(|n| *n == k.node_id))
        .filter(|k| a.rail.as_ref().is_none_or(|r| *r == k.rail_name))
        .collect();
    match &a.output {
        Some(path) => hub.export_csv(&keys, a.from, a.to, path)?,
        None => {
            let mut out = BufWriter::new(io::stdout().lock());
            hub.write_csv(&keys, a.from, a.to, &mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}
