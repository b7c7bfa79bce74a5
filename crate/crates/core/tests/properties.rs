use std::collections::{BTreeMap, BTreeSet};

use energymon_core::collector::{decode_record, encode_record, energy_of, PublishError, Publisher};
use energymon_core::crossbar::CrossbarMap;
use energymon_core::fsm::{AvgFsm, FsmConfig};
use energymon_core::hub::{Hub, SeriesKey};
use energymon_core::monitor::{reconstruct_current, Mailbox, PhysicalSample, Quantity};
use energymon_core::profile::{analytic_energy, gen_profile, ProfileKind, RailLoad};
use energymon_core::sense::{sample_channel, AdcSpec, ChannelSpec, NoiseSource, RailState};
use energymon_core::sim::{run_simulation, NodeConfig, SimOptions};
use energymon_core::{EnergyCollector, EnergyRecord};
use energymon_mqtt::LocalBroker;
use proptest::prelude::*;

fn adc() -> AdcSpec {
    AdcSpec::default()
}

fn shunt() -> ChannelSpec {
    ChannelSpec::current(0, "vdd_core", 0.01, 100.0)
}

fn code_of(i: f64, spec: &ChannelSpec) -> u32 {
    sample_channel(
        RailState {
            i_amps: i,
            v_rail: 0.0,
        },
        spec,
        &adc(),
        0,
        None,
    )
    .unwrap()
    .code
}

fn record(node: &str, rail: &str, seq: u32, t_ns: u64, i: f64) -> EnergyRecord {
    EnergyRecord {
        node_id: node.into(),
        rail_name: rail.into(),
        t_ns,
        i_amps: i,
        v_volts: 0.85,
        e_joules: energy_of(i, 0.85, 128_000),
        window_ns: 128_000,
        seq,
        nominal_voltage: false,
    }
}

fn ingest(hub: &Hub, r: &EnergyRecord) {
    let (topic, payload) = encode_record(r).unwrap();
    hub.ingest(&topic, &payload, r.t_ns).unwrap();
}

#[derive(Default)]
struct Recorder(Vec<(String, Vec<u8>)>);

impl Publisher for Recorder {
    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<(), PublishError> {
        self.0.push((topic.to_owned(), payload.to_vec()));
        Ok(())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quantizer_is_monotone(a in 0.0f64..5.0, b in 0.0f64..5.0, off in 0.0f64..0.2) {
        let spec = shunt().with_offset(off);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(code_of(lo, &spec) <= code_of(hi, &spec));
    }

    #[test]
    fn reconstruction_within_one_lsb(frac in 0.0f64..1.0) {
        let spec = shunt();
        let i = frac * spec.saturation_current(&adc());
        let rec = reconstruct_current(code_of(i, &spec), &spec, &adc()).unwrap();
        let lsb = 3.3 / (4096.0 * 100.0 * 0.01);
        prop_assert!((rec - i).abs() <= lsb, "i={} rec={}", i, rec);
    }

    #[test]
    fn saturation_pins_max_code(extra in 0.0f64..10.0, off in 0.0f64..0.5) {
        let spec = shunt().with_offset(off);
        let i_sat = (3.3 - off) / (100.0 * 0.01);
        prop_assert_eq!(code_of(i_sat + extra, &spec), 4095);
    }

    #[test]
    fn noisy_sampling_is_deterministic(seed: u64, i in 0.0f64..3.0) {
        let run = || {
            let mut noise = NoiseSource::new(0.002, seed).unwrap();
            (0..32)
                .map(|t| {
                    sample_channel(RailState { i_amps: i, v_rail: 0.0 }, &shunt(), &adc(), t, Some(&mut noise))
                        .unwrap()
                        .code
                })
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn crossbar_round_trips(
        (lines, channels, pairs) in (1u32..48, 1u32..48).prop_flat_map(|(l, c)| {
            let k = l.min(c) as usize;
            (
                Just(l),
                Just(c),
                (Just((0..l).collect::<Vec<_>>()).prop_shuffle(), Just((0..c).collect::<Vec<_>>()).prop_shuffle(), 0..=k)
                    .prop_map(|(ls, cs, n)| ls.into_iter().zip(cs).take(n).collect::<Vec<_>>()),
            )
        })
    ) {
        let map = CrossbarMap::from_pairs(pairs.clone(), lines, channels).unwrap();
        let parsed = CrossbarMap::parse(&map.serialize(), lines, channels).unwrap();
        prop_assert_eq!(&parsed, &map);
        for (l, c) in pairs {
            prop_assert_eq!(parsed.route(l).unwrap(), c);
        }
    }

    #[test]
    fn non_injective_maps_are_rejected(
        pairs in prop::collection::vec((0u32..16, 0u32..16), 1..20)
    ) {
        let lines: BTreeSet<u32> = pairs.iter().map(|p| p.0).collect();
        let chans: BTreeSet<u32> = pairs.iter().map(|p| p.1).collect();
        // Each line and each channel may appear in at most one statement.
        let injective = lines.len() == pairs.len() && chans.len() == pairs.len();
        prop_assert_eq!(CrossbarMap::from_pairs(pairs, 16, 16).is_ok(), injective);
    }

    #[test]
    fn fsm_average_bounds_and_monotone_time(
        k in 1u32..12,
        n in 1u32..5,
        a in 1u32..3,
        codes in prop::collection::vec(0u32..4096, 64),
    ) {
        let cfg = FsmConfig { k_window: k, n_channels_per_adc: n, adc_count: a, adc: adc() };
        let mut fsm = AvgFsm::new(cfg).unwrap();
        let mut trace: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut last: BTreeMap<u32, (u64, u32)> = BTreeMap::new();
        for step in 0..(k * n * 3) as usize {
            let mut sampler = |c: u32, _t: u64| {
                let code = codes[(step + c as usize * 7) % codes.len()];
                trace.entry(c).or_default().push(code);
                Ok::<u32, String>(code)
            };
            let out = fsm.step(&mut sampler).unwrap();
            for s in out {
                let window = &trace[&s.channel_id][trace[&s.channel_id].len() - k as usize..];
                prop_assert!(*window.iter().min().unwrap() <= s.avg_code);
                prop_assert!(s.avg_code <= *window.iter().max().unwrap());
                prop_assert_eq!(s.avg_code, window.iter().map(|&c| c as u64).sum::<u64>() as u32 / k);
                if let Some(&(t, seq)) = last.get(&s.channel_id) {
                    prop_assert!(s.t_ns > t && s.seq == seq + 1);
                }
                last.insert(s.channel_id, (s.t_ns, s.seq));
            }
        }
    }

    #[test]
    fn mailbox_conserves_counts(cap in 1usize..32, ops in prop::collection::vec(any::<bool>(), 0..200)) {
        let mb = Mailbox::new(cap);
        let mut evicted = 0u64;
        for (i, push) in ops.into_iter().enumerate() {
            if push {
                let s = PhysicalSample {
                    rail_name: "r".into(),
                    kind: Quantity::Current,
                    value: 1.0,
                    t_ns: i as u64,
                    window_ns: 1,
                    seq: i as u32,
                };
                evicted += mb.push(s).is_some() as u64;
            } else {
                mb.pop();
            }
            prop_assert!(mb.len() <= cap);
            prop_assert_eq!(mb.pushed(), mb.popped() + mb.dropped() + mb.len() as u64);
        }
        prop_assert_eq!(mb.dropped(), evicted);
    }

    #[test]
    fn energy_scales_linearly(i in 0.0f64..10.0, v in 0.0f64..5.0, w in 1u64..10_000_000) {
        let e = energy_of(i, v, w);
        prop_assert!(e >= 0.0);
        prop_assert_eq!(energy_of(2.0 * i, v, w), 2.0 * e);
    }

    #[test]
    fn collector_totals_match_published_records(
        currents in prop::collection::vec((0usize..3, 0.0f64..3.0), 1..80)
    ) {
        let rails = ["vdd_a", "vdd_b", "vdd_c"];
        let nominal: BTreeMap<String, f64> = rails.iter().map(|r| (r.to_string(), 1.0)).collect();
        let mut collector = EnergyCollector::new("n1", Recorder::default(), nominal);
        let mb = Mailbox::new(1024);
        let mut seqs = [0u32; 3];
        for (k, (r, i)) in currents.iter().enumerate() {
            seqs[*r] += 1;
            mb.push(PhysicalSample {
                rail_name: rails[*r].into(),
                kind: Quantity::Current,
                value: *i,
                t_ns: k as u64 * 1000,
                window_ns: 1000,
                seq: seqs[*r],
            });
            if k % 7 == 0 {
                collector.tick(&mb);
            }
        }
        collector.tick(&mb);

        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut last_seq: BTreeMap<String, u32> = BTreeMap::new();
        for (topic, payload) in &collector.publisher().0 {
            let segs: Vec<&str> = topic.split('/').collect();
            prop_assert_eq!(segs.len(), 3);
            prop_assert_eq!(segs[0], "energymon");
            prop_assert!(!topic.contains(['+', '#']));
            let rec = decode_record(payload).unwrap();
            prop_assert_eq!(segs[1], rec.node_id.as_str());
            prop_assert_eq!(segs[2], rec.rail_name.as_str());
            prop_assert_eq!(rec.e_joules, energy_of(rec.i_amps, rec.v_volts, rec.window_ns));
            if let Some(prev) = last_seq.insert(rec.rail_name.clone(), rec.seq) {
                prop_assert!(rec.seq > prev);
            }
            *sums.entry(rec.rail_name).or_default() += rec.e_joules;
        }
        prop_assert_eq!(collector.publisher().0.len(), currents.len());
        for (rail, acc) in collector.accumulators() {
            prop_assert_eq!(acc.total_joules, sums[rail]);
        }
    }

    #[test]
    fn hub_queries_are_additive(
        points in prop::collection::vec((0u64..1_000_000, 0.0f64..3.0), 1..100),
        t1 in 0u64..1_000_001,
    ) {
        let hub = Hub::in_memory();
        for (k, (t, i)) in points.iter().enumerate() {
            ingest(&hub, &record("n", "r", k as u32 + 1, *t, *i));
        }
        let key = SeriesKey::new("n", "r");
        let t2 = 1_000_001;
        let q = |a: u64, b: u64| if a < b { hub.query_energy(&key, a, b).unwrap() } else { Default::default() };
        let (whole, left, right) = (q(0, t2), q(0, t1), q(t1, t2));
        prop_assert_eq!(whole.points, points.len());
        prop_assert_eq!(left.points + right.points, whole.points);
        let tol = 1e-12 * whole.joules.max(1e-12);
        prop_assert!((left.joules + right.joules - whole.joules).abs() <= tol);
        let mut got: Vec<u32> = hub.points(&key).iter().map(|p| p.seq).collect();
        got.sort_unstable();
        prop_assert_eq!(got, (1..=points.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn hub_counts_injected_gaps(drop in prop::collection::btree_set(1u32..300, 0..60)) {
        let hub = Hub::in_memory();
        for seq in (1..=300u32).filter(|s| !drop.contains(s)) {
            ingest(&hub, &record("n", "r", seq, seq as u64 * 1000, 1.0));
        }
        let max_kept = (1..=300u32).rev().find(|s| !drop.contains(s)).unwrap();
        let expected = drop.iter().filter(|&&s| s < max_kept).count() as u64;
        prop_assert_eq!(hub.counters().losses, expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn store_survives_reopen_after_any_cut(n in 1usize..40, cut_frac in 0.0f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        {
            let hub = Hub::create(&path).unwrap();
            for k in 0..n {
                ingest(&hub, &record("n", "r", k as u32 + 1, k as u64 * 1000, 0.5));
            }
            hub.flush().unwrap();
        }
        let bytes = std::fs::read(&path).unwrap();
        let cut = (bytes.len() as f64 * cut_frac) as usize;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let complete = bytes[..cut].iter().filter(|&&b| b == b'\n').count();
        let (hub, rec) = Hub::open(&path).unwrap();
        prop_assert_eq!(rec.points, complete);
        prop_assert_eq!(rec.warnings, u64::from(cut > 0 && bytes[cut - 1] != b'\n'));
        prop_assert_eq!(hub.points(&SeriesKey::new("n", "r")).len(), complete);
    }

    #[test]
    fn measured_energy_scales_with_current(c in 0.25f64..1.5) {
        let t_end = 10_000_000;
        let run = |i: f64| {
            let p = gen_profile(
                &ProfileKind::Constant { load: RailLoad::new(i, 1.0), duration_ns: t_end },
                Some("vdd_soc"),
            )
            .unwrap();
            let node = NodeConfig::with_defaults("n", p.clone());
            let opts = SimOptions { t_end_ns: t_end, seed: 3, ..Default::default() };
            let report = run_simulation(&[node], &LocalBroker::new(), &Hub::in_memory(), &opts).unwrap();
            (report.rail("n", "vdd_soc").unwrap().measured_j, analytic_energy(&p, "vdd_soc", 0, t_end))
        };
        let (base, base_oracle) = run(1.0);
        let (scaled, scaled_oracle) = run(c);
        prop_assert!((scaled_oracle - c * base_oracle).abs() < 1e-12);
        // Current and voltage LSB terms over the run plus one edge window, per run.
        let lsb_i = 3.3 / (4096.0 * 100.0 * 0.01);
        let lsb_v = 3.3 / 4096.0;
        let t = t_end as f64 * 1e-9;
        let window = 128e-6;
        let bound = |i: f64| (lsb_i * 1.0 + lsb_v * i) * t + i * 1.0 * window;
        prop_assert!(
            (scaled - c * base).abs() <= bound(c) + c * bound(1.0),
            "c={} scaled={} base={}", c, scaled, base
        );
    }
}
