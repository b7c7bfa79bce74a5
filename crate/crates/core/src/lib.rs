//! Runtime energy monitor for FPGA-hosted soft-cores, modeled end to end.
//!
//! The pipeline mirrors the hardware path from shunt to dashboard:
//!
//! 1. [`sense`]: shunt, conditioning amplifier and ADC forward model
//! 2. [`crossbar`]: sensing-line to ADC-channel routing
//! 3. [`fsm`] and [`registers`]: multiplexed K-sample averaging latched
//!    into a memory-mapped register bank
//! 4. [`monitor`]: bare-metal firmware converting codes to amps and volts,
//!    forwarding them over a bounded mailbox
//! 5. [`collector`]: per-window energy, accumulation and MQTT publication
//! 6. [`hub`] and [`store`]: central subscriber, loss accounting,
//!    append-only time-series log, queries and CSV export
//! 7. [`sim`]: discrete-event harness under a shared virtual clock, with
//!    synthetic [`profile`]s and an analytic energy oracle

pub mod collector;
pub mod conf;
pub mod crossbar;
pub mod fsm;
pub mod hub;
pub mod monitor;
pub mod profile;
pub mod registers;
pub mod sense;
pub mod sim;
pub mod store;

pub use collector::{energy_of, EnergyCollector, EnergyRecord, Publisher, RailAccumulator};
pub use crossbar::CrossbarMap;
pub use fsm::{t_avg, AveragedSample, AvgFsm, FsmConfig};
pub use hub::{Hub, SeriesKey, StoredPoint};
pub use monitor::{Mailbox, Monitor, PhysicalSample, Quantity};
pub use profile::{analytic_energy, gen_profile, ProfileKind, WorkloadProfile};
pub use registers::RegisterBank;
pub use sense::{AdcSpec, Board, ChannelKind, ChannelSpec, RawSample};
pub use sim::{run_simulation, NodeConfig, SimOptions, SimulationReport};

/// Topic prefix shared by collectors and the hub.
pub const TOPIC_PREFIX: &str = "energymon";
