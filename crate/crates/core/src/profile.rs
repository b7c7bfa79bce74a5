//! Synthetic workload profiles and the analytic energy oracle.
//!
//! A profile is a list of phases, each holding a constant (current, voltage)
//! per rail. The phase list can repeat; once the last repetition ends the
//! final phase's values are held.
//!
//! Text form:
//!
//! ```text
//! cycles = forever        # or a positive count; default 1
//! [phase.0]
//! duration_ns = 10ms
//! all = 0.5, 0.85         # every rail not listed explicitly
//! rail.vdd_core = 2.0, 0.85
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::conf::{parse_duration, ConfDoc, ConfError, Section};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error(transparent)]
    Conf(#[from] ConfError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ProfileError> {
    Err(ProfileError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RailLoad {
    pub i_amps: f64,
    pub v_volts: f64,
}

impl RailLoad {
    pub fn new(i_amps: f64, v_volts: f64) -> RailLoad {
        RailLoad { i_amps, v_volts }
    }

    /// Power in watts.
    pub fn power(&self) -> f64 {
        self.i_amps * self.v_volts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub duration_ns: u64,
    pub loads: BTreeMap<String, RailLoad>,
    /// Load for rails not in `loads`. Without it such rails are off.
    pub default: Option<RailLoad>,
}

impl Phase {
    pub fn uniform(duration_ns: u64, load: RailLoad) -> Phase {
        Phase {
            duration_ns,
            loads: BTreeMap::new(),
            default: Some(load),
        }
    }

    pub fn load(&self, rail: &str) -> RailLoad {
        self.loads
            .get(rail)
            .copied()
            .or(self.default)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Repeat {
    Times(u64),
    Forever,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadProfile {
    phases: Vec<Phase>,
    repeat: Repeat,
    cycle_ns: u64,
}

impl WorkloadProfile {
    pub fn new(phases: Vec<Phase>, repeat: Repeat) -> Result<WorkloadProfile, ProfileError> {
        if phases.is_empty() {
            return invalid("a profile needs at least one phase");
        }
        if repeat == Repeat::Times(0) {
            return invalid("cycle count must be at least 1");
        }
        let mut cycle_ns: u64 = 0;
        for (i, p) in phases.iter().enumerate() {
            if p.duration_ns == 0 {
                return invalid(format!("phase {i} has zero duration"));
            }
            for (rail, l) in p
                .loads
                .iter()
                .map(|(r, l)| (r.as_str(), l))
                .chain(p.default.iter().map(|l| ("all", l)))
            {
                if !(l.i_amps >= 0.0
                    && l.v_volts >= 0.0
                    && l.i_amps.is_finite()
                    && l.v_volts.is_finite())
                {
                    return invalid(format!(
                        "phase {i}, rail {rail}: current and voltage must be finite and >= 0"
                    ));
                }
            }
            cycle_ns = cycle_ns
                .checked_add(p.duration_ns)
                .ok_or_else(|| ProfileError::Invalid("profile length overflows".into()))?;
        }
        Ok(WorkloadProfile {
            phases,
            repeat,
            cycle_ns,
        })
    }

    pub fn constant(load: RailLoad, duration_ns: u64) -> Result<WorkloadProfile, ProfileError> {
        WorkloadProfile::new(vec![Phase::uniform(duration_ns, load)], Repeat::Times(1))
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn repeat(&self) -> Repeat {
        self.repeat
    }

    /// Length of one pass over the phase list.
    pub fn cycle_ns(&self) -> u64 {
        self.cycle_ns
    }

    /// End of the repeating part; `None` when it repeats forever.
    fn repeat_end(&self) -> Option<u64> {
        match self.repeat {
            Repeat::Times(n) => Some(self.cycle_ns.saturating_mul(n)),
            Repeat::Forever => None,
        }
    }

    pub fn phase_at(&self, t_ns: u64) -> &Phase {
        if self.repeat_end().is_some_and(|end| t_ns >= end) {
            return self.phases.last().expect("non-empty");
        }
        let mut offset = t_ns % self.cycle_ns;
        for p in &self.phases {
            if offset < p.duration_ns {
                return p;
            }
            offset -= p.duration_ns;
        }
        unreachable!("offset below cycle length")
    }

    /// Electrical state of `rail` at `t_ns`.
    pub fn state_at(&self, rail: &str, t_ns: u64) -> RailLoad {
        self.phase_at(t_ns).load(rail)
    }

    /// Energy over `[a, b)` with both ends inside one cycle, `a < b <= cycle`.
    fn cycle_energy(&self, rail: &str, a: u64, b: u64) -> f64 {
        let mut e = 0.0;
        let mut start = 0;
        for p in &self.phases {
            let end = start + p.duration_ns;
            let lo = a.max(start);
            let hi = b.min(end);
            if lo < hi {
                e += p.load(rail).power() * (hi - lo) as f64 * 1e-9;
            }
            start = end;
        }
        e
    }

    fn repeating_energy(&self, rail: &str, a: u64, b: u64) -> f64 {
        let c = self.cycle_ns;
        let (c0, c1) = (a / c, (b - 1) / c);
        if c0 == c1 {
            return self.cycle_energy(rail, a - c0 * c, b - c0 * c);
        }
        let full = c1 - c0 - 1;
        let mut e = self.cycle_energy(rail, a - c0 * c, c);
        if full > 0 {
            e += full as f64 * self.cycle_energy(rail, 0, c);
        }
        e + self.cycle_energy(rail, 0, b - c1 * c)
    }
}

/// Exact integral of `i * v` for `rail` over `[t0, t1)`, in joules.
pub fn analytic_energy(profile: &WorkloadProfile, rail: &str, t0_ns: u64, t1_ns: u64) -> f64 {
    if t1_ns <= t0_ns {
        return 0.0;
    }
    let end = profile.repeat_end().unwrap_or(u64::MAX);
    let mut e = 0.0;
    if t0_ns < end {
        e += profile.repeating_energy(rail, t0_ns, t1_ns.min(end));
    }
    if t1_ns > end {
        let held = profile.phases.last().expect("non-empty").load(rail);
        e += held.power() * (t1_ns - t0_ns.max(end)) as f64 * 1e-9;
    }
    e
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileKind {
    Constant {
        load: RailLoad,
        duration_ns: u64,
    },
    /// Alternating low/high halves of `period_ns`, `count` periods.
    Step {
        low_a: f64,
        high_a: f64,
        v_volts: f64,
        period_ns: u64,
        count: u64,
    },
    /// Repeating load, forward, backward, idle template of a training epoch.
    AnnEpoch {
        v_volts: f64,
        load: (f64, u64),
        forward: (f64, u64),
        backward: (f64, u64),
        idle: (f64, u64),
    },
}

impl ProfileKind {
    pub fn ann_epoch_default() -> ProfileKind {
        ProfileKind::AnnEpoch {
            v_volts: 0.85,
            load: (0.6, 5_000_000),
            forward: (1.8, 10_000_000),
            backward: (2.4, 15_000_000),
            idle: (0.3, 5_000_000),
        }
    }
}

/// Builds a profile applying the generated load to `rail`, or to every
/// rail when `rail` is `None`.
pub fn gen_profile(
    kind: &ProfileKind,
    rail: Option<&str>,
) -> Result<WorkloadProfile, ProfileError> {
    fn positive(name: &str, x: f64) -> Result<(), ProfileError> {
        if x > 0.0 && x.is_finite() {
            Ok(())
        } else {
            invalid(format!("{name} must be positive, got {x}"))
        }
    }
    fn duration(name: &str, d: u64) -> Result<(), ProfileError> {
        if d > 0 {
            Ok(())
        } else {
            invalid(format!("{name} must be positive"))
        }
    }
    let phase = |duration_ns: u64, i: f64, v: f64| {
        let load = RailLoad::new(i, v);
        match rail {
            Some(r) => Phase {
                duration_ns,
                loads: BTreeMap::from([(r.to_owned(), load)]),
                default: None,
            },
            None => Phase::uniform(duration_ns, load),
        }
    };
    match *kind {
        ProfileKind::Constant { load, duration_ns } => {
            positive("current", load.i_amps)?;
            positive("voltage", load.v_volts)?;
            duration("duration", duration_ns)?;
            WorkloadProfile::new(
                vec![phase(duration_ns, load.i_amps, load.v_volts)],
                Repeat::Times(1),
            )
        }
        ProfileKind::Step {
            low_a,
            high_a,
            v_volts,
            period_ns,
            count,
        } => {
            positive("low current", low_a)?;
            positive("high current", high_a)?;
            positive("voltage", v_volts)?;
            if period_ns < 2 {
                return invalid("step period must be at least 2 ns");
            }
            if count == 0 {
                return invalid("step count must be at least 1");
            }
            let low_ns = period_ns / 2;
            let high_ns = period_ns - low_ns;
            let phases = (0..count)
                .flat_map(|_| {
                    [
                        phase(low_ns, low_a, v_volts),
                        phase(high_ns, high_a, v_volts),
                    ]
                })
                .collect();
            WorkloadProfile::new(phases, Repeat::Times(1))
        }
        ProfileKind::AnnEpoch {
            v_volts,
            load,
            forward,
            backward,
            idle,
        } => {
            positive("voltage", v_volts)?;
            let mut phases = Vec::new();
            for (name, (i, d)) in [
                ("load", load),
                ("forward", forward),
                ("backward", backward),
                ("idle", idle),
            ] {
                positive(&format!("{name} current"), i)?;
                duration(&format!("{name} duration"), d)?;
                phases.push(phase(d, i, v_volts));
            }
            WorkloadProfile::new(phases, Repeat::Forever)
        }
    }
}

fn parse_load(entry_line: usize, value: &str) -> Result<RailLoad, ConfError> {
    let bad = || {
        ConfError::new(
            entry_line,
            format!("expected `<amps>, <volts>`, got {value:?}"),
        )
    };
    let (i, v) = value.split_once(',').ok_or_else(bad)?;
    Ok(RailLoad::new(
        i.trim().parse().map_err(|_| bad())?,
        v.trim().parse().map_err(|_| bad())?,
    ))
}

fn parse_phase(section: &Section) -> Result<(u64, Phase), ProfileError> {
    let index: u64 = section
        .suffix("phase")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            ConfError::new(
                section.line,
                format!("expected [phase.<n>], got [{}]", section.name),
            )
        })?;
    let dur = section.require("duration_ns")?;
    let duration_ns = parse_duration(&dur.value).map_err(|e| ConfError::new(dur.line, e))?;
    let mut phase = Phase {
        duration_ns,
        loads: BTreeMap::new(),
        default: None,
    };
    for e in &section.entries {
        if e.key == "duration_ns" {
            continue;
        }
        if e.key == "all" {
            phase.default = Some(parse_load(e.line, &e.value)?);
        } else if let Some(rail) = e.key.strip_prefix("rail.") {
            phase
                .loads
                .insert(rail.to_owned(), parse_load(e.line, &e.value)?);
        } else {
            return Err(ConfError::new(
                e.line,
                format!("unknown key `{}` in [{}]", e.key, section.name),
            )
            .into());
        }
    }
    Ok((index, phase))
}

impl WorkloadProfile {
    pub fn parse(text: &str) -> Result<WorkloadProfile, ProfileError> {
        let doc = ConfDoc::parse(text)?;
        doc.global.check_keys(&["cycles"])?;
        let repeat = match doc.global.get("cycles") {
            None => Repeat::Times(1),
            Some(e) if e.value == "forever" => Repeat::Forever,
            Some(e) => Repeat::Times(e.value.parse().map_err(|_| {
                ConfError::new(
                    e.line,
                    format!("cycles must be a count or `forever`, got {:?}", e.value),
                )
            })?),
        };
        let mut phases = BTreeMap::new();
        for s in &doc.sections {
            let (i, p) = parse_phase(s)?;
            if phases.insert(i, p).is_some() {
                return Err(ConfError::new(s.line, format!("duplicate phase {i}")).into());
            }
        }
        if phases.keys().copied().ne(0..phases.len() as u64) {
            return invalid("phases must be numbered 0, 1, 2, ... without gaps");
        }
        WorkloadProfile::new(phases.into_values().collect(), repeat)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self.repeat {
            Repeat::Forever => out.push_str("cycles = forever\n"),
            Repeat::Times(n) => {
                let _ = writeln!(out, "cycles = {n}");
            }
        }
        for (i, p) in self.phases.iter().enumerate() {
            let _ = writeln!(out, "\n[phase.{i}]\nduration_ns = {}", p.duration_ns);
            if let Some(d) = p.default {
                let _ = writeln!(out, "all = {}, {}", d.i_amps, d.v_volts);
            }
            for (rail, l) in &p.loads {
                let _ = writeln!(out, "rail.{rail} = {}, {}", l.i_amps, l.v_volts);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: u64 = 1_000_000;

    fn two_phase(repeat: Repeat) -> WorkloadProfile {
        WorkloadProfile::new(
            vec![
                Phase::uniform(10 * MS, RailLoad::new(1.0, 1.0)),
                Phase::uniform(10 * MS, RailLoad::new(2.0, 0.5)),
            ],
            repeat,
        )
        .unwrap()
    }

    #[test]
    fn state_examples() {
        let c = WorkloadProfile::constant(RailLoad::new(2.0, 0.85), 10 * MS).unwrap();
        assert_eq!(c.state_at("vdd_core", 5 * MS), RailLoad::new(2.0, 0.85));
        assert_eq!(c.state_at("vdd_core", 50 * MS), RailLoad::new(2.0, 0.85));
        let p = two_phase(Repeat::Forever);
        assert_eq!(p.state_at("x", 25 * MS), RailLoad::new(1.0, 1.0));
        assert_eq!(p.state_at("x", 15 * MS), RailLoad::new(2.0, 0.5));
        let once = two_phase(Repeat::Times(1));
        assert_eq!(once.state_at("x", 25 * MS), RailLoad::new(2.0, 0.5));
        assert_eq!(
            two_phase(Repeat::Times(2)).state_at("x", 25 * MS),
            RailLoad::new(1.0, 1.0)
        );
    }

    #[test]
    fn energy_examples() {
        let c = WorkloadProfile::constant(RailLoad::new(2.0, 0.85), 10 * MS).unwrap();
        assert!((analytic_energy(&c, "r", 0, 10 * MS) - 0.017).abs() < 1e-15);
        assert!((analytic_energy(&c, "r", 0, 5 * MS) - 0.0085).abs() < 1e-15);
        let z = WorkloadProfile::constant(RailLoad::new(0.0, 0.85), 10 * MS).unwrap();
        assert_eq!(analytic_energy(&z, "r", 0, 10 * MS), 0.0);
        assert_eq!(analytic_energy(&c, "r", 5, 5), 0.0);
    }

    /// Brute-force integration at 1 µs resolution against the closed form.
    #[test]
    fn energy_matches_stepwise_sum() {
        let p = two_phase(Repeat::Times(3));
        let step = 1000;
        for (t0, t1) in [
            (0, 20 * MS),
            (3 * MS, 47 * MS),
            (15 * MS, 95 * MS),
            (61 * MS, 62 * MS),
        ] {
            let brute: f64 = (t0 / step..t1 / step)
                .map(|k| p.state_at("r", k * step).power() * step as f64 * 1e-9)
                .sum();
            let exact = analytic_energy(&p, "r", t0, t1);
            assert!(
                (brute - exact).abs() < 1e-12,
                "{t0}..{t1}: {brute} vs {exact}"
            );
        }
        let f = two_phase(Repeat::Forever);
        let cycles = 1000;
        let e = analytic_energy(&f, "r", 0, cycles * 20 * MS);
        assert!((e - cycles as f64 * 0.02).abs() < 1e-9);
    }

    #[test]
    fn per_rail_loads() {
        let p = gen_profile(
            &ProfileKind::Constant {
                load: RailLoad::new(2.0, 0.85),
                duration_ns: 100 * MS,
            },
            Some("vdd_core"),
        )
        .unwrap();
        assert_eq!(p.state_at("vdd_soc", 0), RailLoad::default());
        assert_eq!(p.state_at("vdd_core", 0).i_amps, 2.0);
    }

    #[test]
    fn gen_examples() {
        let c = gen_profile(
            &ProfileKind::Constant {
                load: RailLoad::new(2.0, 0.85),
                duration_ns: 100 * MS,
            },
            None,
        )
        .unwrap();
        assert_eq!(c.phases().len(), 1);
        let s = gen_profile(
            &ProfileKind::Step {
                low_a: 0.5,
                high_a: 2.0,
                v_volts: 0.85,
                period_ns: 20 * MS,
                count: 5,
            },
            None,
        )
        .unwrap();
        assert_eq!(s.phases().len(), 10);
        assert_eq!(s.cycle_ns(), 100 * MS);
        assert_eq!(s.state_at("r", 0).i_amps, 0.5);
        assert_eq!(s.state_at("r", 10 * MS).i_amps, 2.0);
        let a = gen_profile(&ProfileKind::ann_epoch_default(), None).unwrap();
        assert_eq!(a.phases().len(), 4);
        assert_eq!(a.repeat(), Repeat::Forever);
    }

    #[test]
    fn gen_rejects_non_positive() {
        let bad = [
            ProfileKind::Constant {
                load: RailLoad::new(0.0, 0.85),
                duration_ns: MS,
            },
            ProfileKind::Constant {
                load: RailLoad::new(1.0, 0.85),
                duration_ns: 0,
            },
            ProfileKind::Step {
                low_a: -0.5,
                high_a: 2.0,
                v_volts: 0.85,
                period_ns: MS,
                count: 1,
            },
            ProfileKind::Step {
                low_a: 0.5,
                high_a: 2.0,
                v_volts: 0.85,
                period_ns: MS,
                count: 0,
            },
        ];
        for k in bad {
            assert!(gen_profile(&k, None).is_err(), "{k:?}");
        }
    }

    #[test]
    fn text_round_trip() {
        for p in [
            gen_profile(&ProfileKind::ann_epoch_default(), None).unwrap(),
            gen_profile(
                &ProfileKind::Step {
                    low_a: 0.5,
                    high_a: 2.0,
                    v_volts: 0.85,
                    period_ns: 20 * MS,
                    count: 2,
                },
                Some("vdd_core"),
            )
            .unwrap(),
        ] {
            assert_eq!(WorkloadProfile::parse(&p.to_text()).unwrap(), p);
        }
    }

    #[test]
    fn parse_accepts_suffixes_and_rejects_gaps() {
        let p = WorkloadProfile::parse("cycles = 2\n[phase.0]\nduration_ns = 10ms\nall = 1, 0.5\n")
            .unwrap();
        assert_eq!(p.cycle_ns(), 10 * MS);
        assert_eq!(p.repeat(), Repeat::Times(2));
        assert!(WorkloadProfile::parse("[phase.1]\nduration_ns = 1\n").is_err());
        assert!(WorkloadProfile::parse("[phase.0]\nduration_ns = 1\nbogus = 1\n").is_err());
        assert!(WorkloadProfile::parse("[phase.0]\nduration_ns = 0\n").is_err());
        assert!(WorkloadProfile::parse("").is_err());
    }
}
