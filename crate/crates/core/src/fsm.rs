//! Averaging state machine on the FPGA side.
//!
//! `adc_count` ADCs run in lockstep. ADC `a` multiplexes channels
//! `a * N .. a * N + N`. Each channel is converted `K` times in a row, the
//! integer mean is latched with the timestamp of the K-th conversion, and the
//! mux moves on. A channel therefore refreshes every `t_s * K * N`.

use std::sync::Arc;

use thiserror::Error;

use crate::registers::RegisterBank;
use crate::sense::{AdcSpec, SenseError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FsmError {
    #[error("invalid FSM configuration: {0}")]
    Config(String),
    #[error("sampling channel {channel} failed: {reason}")]
    Sampler { channel: u32, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsmConfig {
    pub k_window: u32,
    pub n_channels_per_adc: u32,
    pub adc_count: u32,
    pub adc: AdcSpec,
}

impl Default for FsmConfig {
    fn default() -> Self {
        FsmConfig {
            k_window: 16,
            n_channels_per_adc: 8,
            adc_count: 2,
            adc: AdcSpec::default(),
        }
    }
}

impl FsmConfig {
    pub fn validate(&self) -> Result<(), FsmError> {
        if self.k_window == 0 || self.n_channels_per_adc == 0 || self.adc_count == 0 {
            return Err(FsmError::Config(
                "k_window, n_channels_per_adc and adc_count must be >= 1".into(),
            ));
        }
        self.adc
            .validate()
            .map_err(|e: SenseError| FsmError::Config(e.to_string()))?;
        if self.k_window as u64 * self.adc.max_code() as u64 > u32::MAX as u64 {
            return Err(FsmError::Config(
                "k_window too large for 32-bit accumulation".into(),
            ));
        }
        Ok(())
    }

    pub fn total_channels(&self) -> u32 {
        self.adc_count * self.n_channels_per_adc
    }

    pub fn t_avg_ns(&self) -> u64 {
        t_avg(self)
    }
}

/// Time between consecutive latches of one channel.
pub fn t_avg(config: &FsmConfig) -> u64 {
    config.adc.t_sample_min_ns * config.k_window as u64 * config.n_channels_per_adc as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AveragedSample {
    pub channel_id: u32,
    pub avg_code: u32,
    pub t_ns: u64,
    pub seq: u32,
}

/// Source of raw ADC codes for a channel at a conversion instant.
pub trait ChannelSampler {
    fn sample(&mut self, channel: u32, t_ns: u64) -> Result<u32, String>;
}

impl<F> ChannelSampler for F
where
    F: FnMut(u32, u64) -> Result<u32, String>,
{
    fn sample(&mut self, channel: u32, t_ns: u64) -> Result<u32, String> {
        self(channel, t_ns)
    }
}

#[derive(Debug)]
pub struct AvgFsm {
    config: FsmConfig,
    bank: Arc<RegisterBank>,
    now_ns: u64,
    mux: u32,
    taken: u32,
    sums: Vec<u32>,
}

impl AvgFsm {
    pub fn new(config: FsmConfig) -> Result<AvgFsm, FsmError> {
        config.validate()?;
        let bank = Arc::new(RegisterBank::new(config.total_channels()));
        Ok(AvgFsm {
            config,
            bank,
            now_ns: 0,
            mux: 0,
            taken: 0,
            sums: vec![0; config.adc_count as usize],
        })
    }

    pub fn config(&self) -> &FsmConfig {
        &self.config
    }

    pub fn bank(&self) -> &Arc<RegisterBank> {
        &self.bank
    }

    /// Virtual time of the last completed conversion.
    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    /// Completion time of the next conversion.
    pub fn next_conversion_ns(&self) -> u64 {
        self.now_ns + self.config.adc.t_sample_min_ns
    }

    /// Channels currently selected by the muxes, one per ADC.
    pub fn selected_channels(&self) -> impl Iterator<Item = u32> + '_ {
        let n = self.config.n_channels_per_adc;
        (0..self.config.adc_count).map(move |a| a * n + self.mux)
    }

    /// Performs one conversion on every ADC.
    ///
    /// Returns the samples latched by this step: empty until the K-th
    /// conversion of the current mux position, then one per ADC.
    pub fn step(
        &mut self,
        sampler: &mut impl ChannelSampler,
    ) -> Result<Vec<AveragedSample>, FsmError> {
        let t = self.next_conversion_ns();
        let n = self.config.n_channels_per_adc;
        for a in 0..self.config.adc_count {
            let channel = a * n + self.mux;
            let code = sampler
                .sample(channel, t)
                .map_err(|reason| FsmError::Sampler { channel, reason })?;
            self.sums[a as usize] += code.min(self.config.adc.max_code());
        }
        self.now_ns = t;
        self.taken += 1;
        if self.taken < self.config.k_window {
            return Ok(Vec::new());
        }
        let mut latched = Vec::with_capacity(self.config.adc_count as usize);
        for a in 0..self.config.adc_count {
            let channel = a * n + self.mux;
            let avg_code = self.sums[a as usize] / self.config.k_window;
            let seq = self
                .bank
                .latch(channel, avg_code, t)
                .expect("channel index within bank");
            latched.push(AveragedSample {
                channel_id: channel,
                avg_code,
                t_ns: t,
                seq,
            });
            self.sums[a as usize] = 0;
        }
        self.taken = 0;
        self.mux = (self.mux + 1) % n;
        Ok(latched)
    }

    /// Clears accumulators and registers and returns the muxes to channel 0.
    /// Virtual time is not rewound.
    pub fn reset(&mut self) {
        self.mux = 0;
        self.taken = 0;
        self.sums.iter_mut().for_each(|s| *s = 0);
        self.bank.clear();
    }
}
