//! Forward model of the measurement board.
//!
//! Current channels use high-side shunt sensing: the shunt's differential
//! voltage is scaled by a conditioning amplifier into the ADC range. Voltage
//! channels pass the rail through a resistive divider straight to the ADC.
//! The quantizer is a floor (mid-rise) transfer with clamping at full scale.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::conf::{ConfDoc, ConfError, Section};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SenseError {
    #[error("channel {channel}: expected a {expected} channel")]
    KindMismatch { channel: u16, expected: ChannelKind },
    #[error("negative current {0} A (power delivery is unidirectional)")]
    NegativeCurrent(f64),
    #[error("unknown channel {0}")]
    UnknownChannel(u16),
    #[error("invalid channel {channel}: {reason}")]
    InvalidChannel { channel: u16, reason: String },
    #[error("invalid ADC: {0}")]
    InvalidAdc(String),
    #[error("board file: {0}")]
    Conf(#[from] ConfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelKind {
    CurrentSense,
    VoltageSense,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::CurrentSense => "current",
            ChannelKind::VoltageSense => "voltage",
        })
    }
}

/// Sensing-chain parameters for one board line.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub channel_id: u16,
    pub rail_name: String,
    pub kind: ChannelKind,
    /// Shunt resistance in ohms (current channels).
    pub r_shunt_ohm: f64,
    pub cond_gain: f64,
    pub cond_offset_v: f64,
    /// Divider ratio in (0, 1] (voltage channels).
    pub divider_ratio: f64,
    pub nominal_voltage_v: f64,
}

impl ChannelSpec {
    pub fn current(channel_id: u16, rail: &str, r_shunt_ohm: f64, cond_gain: f64) -> ChannelSpec {
        ChannelSpec {
            channel_id,
            rail_name: rail.to_owned(),
            kind: ChannelKind::CurrentSense,
            r_shunt_ohm,
            cond_gain,
            cond_offset_v: 0.0,
            divider_ratio: 1.0,
            nominal_voltage_v: 0.0,
        }
    }

    pub fn voltage(channel_id: u16, rail: &str, divider_ratio: f64) -> ChannelSpec {
        ChannelSpec {
            channel_id,
            rail_name: rail.to_owned(),
            kind: ChannelKind::VoltageSense,
            r_shunt_ohm: 0.0,
            cond_gain: 1.0,
            cond_offset_v: 0.0,
            divider_ratio,
            nominal_voltage_v: 0.0,
        }
    }

    pub fn with_offset(mut self, offset_v: f64) -> Self {
        self.cond_offset_v = offset_v;
        self
    }

    pub fn with_nominal(mut self, nominal_v: f64) -> Self {
        self.nominal_voltage_v = nominal_v;
        self
    }

    pub fn validate(&self) -> Result<(), SenseError> {
        let bad = |reason: &str| SenseError::InvalidChannel {
            channel: self.channel_id,
            reason: reason.to_owned(),
        };
        if self.rail_name.is_empty()
            || self
                .rail_name
                .chars()
                .any(|c| c == '/' || c == '+' || c == '#' || c.is_whitespace())
        {
            return Err(bad("rail name must be a non-empty topic segment"));
        }
        if !(self.nominal_voltage_v >= 0.0 && self.nominal_voltage_v.is_finite()) {
            return Err(bad("nominal_voltage_v must be >= 0"));
        }
        match self.kind {
            ChannelKind::CurrentSense => {
                if !(self.r_shunt_ohm > 0.0 && self.r_shunt_ohm.is_finite()) {
                    return Err(bad("r_shunt_ohm must be > 0"));
                }
                if !(self.cond_gain > 0.0 && self.cond_gain.is_finite()) {
                    return Err(bad("cond_gain must be > 0"));
                }
                if !self.cond_offset_v.is_finite() {
                    return Err(bad("cond_offset_v must be finite"));
                }
            }
            ChannelKind::VoltageSense => {
                if !(self.divider_ratio > 0.0 && self.divider_ratio <= 1.0) {
                    return Err(bad("divider_ratio must be in (0, 1]"));
                }
            }
        }
        Ok(())
    }

    fn expect(&self, kind: ChannelKind) -> Result<(), SenseError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(SenseError::KindMismatch {
                channel: self.channel_id,
                expected: kind,
            })
        }
    }

    /// Smallest current that drives the ADC to full scale.
    pub fn saturation_current(&self, adc: &AdcSpec) -> f64 {
        (adc.vref_v - self.cond_offset_v) / (self.cond_gain * self.r_shunt_ohm)
    }

    /// One ADC step referred back to the shunt current.
    pub fn current_lsb(&self, adc: &AdcSpec) -> f64 {
        adc.vref_v / (adc.full_scale() as f64 * self.cond_gain * self.r_shunt_ohm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcSpec {
    pub bits: u8,
    pub vref_v: f64,
    /// Minimum time per conversion, in nanoseconds.
    pub t_sample_min_ns: u64,
}

impl Default for AdcSpec {
    fn default() -> Self {
        AdcSpec {
            bits: 12,
            vref_v: 3.3,
            t_sample_min_ns: 1000,
        }
    }
}

impl AdcSpec {
    pub fn validate(&self) -> Result<(), SenseError> {
        if !(8..=16).contains(&self.bits) {
            return Err(SenseError::InvalidAdc(format!(
                "bits {} not in 8..=16",
                self.bits
            )));
        }
        if !(self.vref_v > 0.0 && self.vref_v.is_finite()) {
            return Err(SenseError::InvalidAdc(format!(
                "vref {} must be > 0",
                self.vref_v
            )));
        }
        if self.t_sample_min_ns < 1000 {
            return Err(SenseError::InvalidAdc(format!(
                "t_sample_min_ns {} below 1000 ns",
                self.t_sample_min_ns
            )));
        }
        Ok(())
    }

    /// 2^bits.
    pub fn full_scale(&self) -> u32 {
        1u32 << self.bits
    }

    pub fn max_code(&self) -> u32 {
        self.full_scale() - 1
    }
}

/// One ADC conversion result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawSample {
    pub channel_id: u16,
    pub code: u32,
    pub t_ns: u64,
    /// The analog input was outside [0, vref] before clamping.
    pub saturated: bool,
}

/// True electrical state of a rail at an instant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RailState {
    pub i_amps: f64,
    pub v_rail: f64,
}

/// Voltage across the shunt for a given load current.
pub fn differential_voltage(i_amps: f64, spec: &ChannelSpec) -> Result<f64, SenseError> {
    spec.expect(ChannelKind::CurrentSense)?;
    if i_amps < 0.0 {
        return Err(SenseError::NegativeCurrent(i_amps));
    }
    Ok(i_amps * spec.r_shunt_ohm)
}

fn condition_unclamped(v_diff: f64, spec: &ChannelSpec) -> f64 {
    v_diff * spec.cond_gain + spec.cond_offset_v
}

/// Amplifier output, saturating at the ADC input rails.
pub fn condition(v_diff: f64, spec: &ChannelSpec, adc: &AdcSpec) -> f64 {
    condition_unclamped(v_diff, spec).clamp(0.0, adc.vref_v)
}

pub fn quantize(v: f64, adc: &AdcSpec) -> u32 {
    if v <= 0.0 || v.is_nan() {
        return 0;
    }
    let steps = (v / adc.vref_v * adc.full_scale() as f64).floor();
    if steps >= adc.max_code() as f64 {
        adc.max_code()
    } else {
        steps as u32
    }
}

/// Seeded zero-mean Gaussian noise on the ADC input.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    dist: Normal<f64>,
}

impl NoiseSource {
    pub fn new(sigma_v: f64, seed: u64) -> Result<NoiseSource, SenseError> {
        let dist = Normal::new(0.0, sigma_v)
            .map_err(|e| SenseError::InvalidAdc(format!("noise sigma {sigma_v}: {e}")))?;
        Ok(NoiseSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist,
        })
    }

    pub fn sample(&mut self) -> f64 {
        self.dist.sample(&mut self.rng)
    }
}

/// Runs one conversion of `spec`'s line at `t_ns`.
pub fn sample_channel(
    state: RailState,
    spec: &ChannelSpec,
    adc: &AdcSpec,
    t_ns: u64,
    noise: Option<&mut NoiseSource>,
) -> Result<RawSample, SenseError> {
    let analog = match spec.kind {
        ChannelKind::CurrentSense => {
            condition_unclamped(differential_voltage(state.i_amps, spec)?, spec)
        }
        ChannelKind::VoltageSense => state.v_rail * spec.divider_ratio,
    };
    let analog = analog + noise.map_or(0.0, |n| n.sample());
    let clamped = analog.clamp(0.0, adc.vref_v);
    Ok(RawSample {
        channel_id: spec.channel_id,
        code: quantize(clamped, adc),
        t_ns,
        saturated: analog > adc.vref_v || analog < 0.0,
    })
}

/// The set of sensing lines on a measurement board.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Board {
    channels: Vec<ChannelSpec>,
}

const BOARD_KEYS: &[&str] = &[
    "kind",
    "rail",
    "r_shunt_ohm",
    "cond_gain",
    "cond_offset_v",
    "divider_ratio",
    "nominal_voltage_v",
];

impl Board {
    pub fn new(mut channels: Vec<ChannelSpec>) -> Result<Board, SenseError> {
        let mut seen = BTreeSet::new();
        let mut pairs = BTreeSet::new();
        for ch in &channels {
            ch.validate()?;
            if !seen.insert(ch.channel_id) {
                return Err(SenseError::InvalidChannel {
                    channel: ch.channel_id,
                    reason: "duplicate channel id".into(),
                });
            }
            if !pairs.insert((ch.rail_name.clone(), ch.kind)) {
                return Err(SenseError::InvalidChannel {
                    channel: ch.channel_id,
                    reason: format!("rail {} already has a {} channel", ch.rail_name, ch.kind),
                });
            }
        }
        channels.sort_by_key(|c| c.channel_id);
        Ok(Board { channels })
    }

    /// Eight rails, each with a current and a voltage line (16 lines).
    ///
    /// Rail `r` uses line `2r` for current and `2r + 1` for voltage. Shunts are
    /// 10 mΩ with a gain of 100, so every current line spans 0 to 3.3 A on a
    /// 3.3 V ADC.
    pub fn default_board() -> Board {
        const RAILS: [(&str, f64, f64); 8] = [
            ("vdd_core", 0.85, 1.0),
            ("vdd_soc", 1.0, 1.0),
            ("vdd_fabric", 1.0, 1.0),
            ("vdd_ddr", 1.1, 1.0),
            ("vdd_pll", 1.8, 0.5),
            ("vdd_io", 1.8, 0.5),
            ("vdd_aux", 2.5, 0.5),
            ("vdd_3v3", 3.3, 0.5),
        ];
        let mut channels = Vec::new();
        for (r, (rail, nominal, ratio)) in RAILS.iter().enumerate() {
            let id = 2 * r as u16;
            channels.push(ChannelSpec::current(id, rail, 0.01, 100.0).with_nominal(*nominal));
            channels.push(ChannelSpec::voltage(id + 1, rail, *ratio).with_nominal(*nominal));
        }
        Board::new(channels).expect("default board is valid")
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn channel(&self, id: u16) -> Result<&ChannelSpec, SenseError> {
        self.channels
            .iter()
            .find(|c| c.channel_id == id)
            .ok_or(SenseError::UnknownChannel(id))
    }

    /// Rail names in first-appearance (line id) order, deduplicated.
    pub fn rails(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.channels {
            if !out.contains(&c.rail_name) {
                out.push(c.rail_name.clone());
            }
        }
        out
    }

    pub fn nominal_voltage(&self, rail: &str) -> Option<f64> {
        self.channels
            .iter()
            .find(|c| c.rail_name == rail)
            .map(|c| c.nominal_voltage_v)
    }

    pub fn sample(
        &self,
        channel_id: u16,
        state: RailState,
        adc: &AdcSpec,
        t_ns: u64,
        noise: Option<&mut NoiseSource>,
    ) -> Result<RawSample, SenseError> {
        sample_channel(state, self.channel(channel_id)?, adc, t_ns, noise)
    }

    /// Parses a board description with one `[channel.<id>]` section per line.
    pub fn parse(text: &str) -> Result<Board, SenseError> {
        let doc = ConfDoc::parse(text)?;
        if let Some(e) = doc.global.entries.first() {
            return Err(ConfError::new(e.line, "key outside a [channel.<id>] section").into());
        }
        let mut channels = Vec::new();
        for section in &doc.sections {
            channels.push(parse_channel(section)?);
        }
        Board::new(channels)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.channels {
            out.push_str(&format!("[channel.{}]\n", c.channel_id));
            out.push_str(&format!("kind = {}\n", c.kind));
            out.push_str(&format!("rail = {}\n", c.rail_name));
            match c.kind {
                ChannelKind::CurrentSense => {
                    out.push_str(&format!("r_shunt_ohm = {}\n", c.r_shunt_ohm));
                    out.push_str(&format!("cond_gain = {}\n", c.cond_gain));
                    out.push_str(&format!("cond_offset_v = {}\n", c.cond_offset_v));
                }
                ChannelKind::VoltageSense => {
                    out.push_str(&format!("divider_ratio = {}\n", c.divider_ratio));
                }
            }
            out.push_str(&format!("nominal_voltage_v = {}\n\n", c.nominal_voltage_v));
        }
        out
    }
}

fn parse_channel(section: &Section) -> Result<ChannelSpec, SenseError> {
    let id_text = section.suffix("channel").ok_or_else(|| {
        ConfError::new(
            section.line,
            format!("expected [channel.<id>], got [{}]", section.name),
        )
    })?;
    let channel_id: u16 = id_text
        .parse()
        .map_err(|_| ConfError::new(section.line, format!("bad channel id {id_text:?}")))?;
    section.check_keys(BOARD_KEYS)?;
    let kind_entry = section.require("kind")?;
    let kind = match kind_entry.value.as_str() {
        "current" => ChannelKind::CurrentSense,
        "voltage" => ChannelKind::VoltageSense,
        other => {
            return Err(ConfError::new(
                kind_entry.line,
                format!("kind must be `current` or `voltage`, got {other:?}"),
            )
            .into())
        }
    };
    let rail = section.require("rail")?.value.clone();
    let spec = match kind {
        ChannelKind::CurrentSense => ChannelSpec {
            channel_id,
            rail_name: rail,
            kind,
            r_shunt_ohm: section
                .parse("r_shunt_ohm")?
                .ok_or_else(|| ConfError::new(section.line, "current channel needs r_shunt_ohm"))?,
            cond_gain: section.parse_or("cond_gain", 100.0)?,
            cond_offset_v: section.parse_or("cond_offset_v", 0.0)?,
            divider_ratio: 1.0,
            nominal_voltage_v: section.parse_or("nominal_voltage_v", 0.0)?,
        },
        ChannelKind::VoltageSense => ChannelSpec {
            channel_id,
            rail_name: rail,
            kind,
            r_shunt_ohm: 0.0,
            cond_gain: 1.0,
            cond_offset_v: 0.0,
            divider_ratio: section.parse_or("divider_ratio", 1.0)?,
            nominal_voltage_v: section.parse_or("nominal_voltage_v", 0.0)?,
        },
    };
    Ok(spec)
}
