//! Memory-mapped register bank holding the latest average per channel.
//!
//! Each channel occupies [`WORDS_PER_CHANNEL`] 32-bit words:
//!
//! | offset | name    | meaning                                       |
//! |--------|---------|-----------------------------------------------|
//! | 0      | `GEN`   | write generation, odd while a latch is in flight |
//! | 1      | `AVG`   | averaged ADC code                             |
//! | 2      | `TS_LO` | latch timestamp, ns, low word                 |
//! | 3      | `TS_HI` | latch timestamp, ns, high word                |
//! | 4      | `SEQ`   | update counter, 0 until the first latch       |
//!
//! Readers use a generation-validated double read: sample `GEN`, read the
//! payload words, re-read `GEN`, and retry if it changed or was odd. One
//! writer (the averaging FSM) may run concurrently with any number of readers.

use std::sync::atomic::{fence, AtomicU32, Ordering};

use thiserror::Error;

pub const WORDS_PER_CHANNEL: usize = 5;
pub const REG_GEN: usize = 0;
pub const REG_AVG: usize = 1;
pub const REG_TS_LO: usize = 2;
pub const REG_TS_HI: usize = 3;
pub const REG_SEQ: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BankError {
    #[error("unknown channel {0}")]
    UnknownChannel(u32),
}

/// Coherent view of one channel's registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegisterSnapshot {
    pub avg_code: u32,
    pub t_ns: u64,
    /// Zero means the channel has never latched.
    pub seq: u32,
}

impl RegisterSnapshot {
    pub fn has_data(&self) -> bool {
        self.seq != 0
    }
}

#[derive(Debug)]
pub struct RegisterBank {
    words: Box<[AtomicU32]>,
    channels: u32,
}

impl RegisterBank {
    pub fn new(channels: u32) -> RegisterBank {
        let words = (0..channels as usize * WORDS_PER_CHANNEL)
            .map(|_| AtomicU32::new(0))
            .collect();
        RegisterBank { words, channels }
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    fn base(&self, channel: u32) -> Result<usize, BankError> {
        if channel < self.channels {
            Ok(channel as usize * WORDS_PER_CHANNEL)
        } else {
            Err(BankError::UnknownChannel(channel))
        }
    }

    /// Raw word access, as a bus master would see it.
    pub fn read_word(&self, offset: usize) -> Option<u32> {
        self.words.get(offset).map(|w| w.load(Ordering::Acquire))
    }

    /// Latches a new average. Must only be called from the single writer.
    pub fn latch(&self, channel: u32, avg_code: u32, t_ns: u64) -> Result<u32, BankError> {
        let base = self.base(channel)?;
        let w = &self.words[base..base + WORDS_PER_CHANNEL];
        let gen = w[REG_GEN].load(Ordering::Relaxed);
        w[REG_GEN].store(gen.wrapping_add(1), Ordering::Relaxed);
        fence(Ordering::Release);
        let seq = w[REG_SEQ].load(Ordering::Relaxed).wrapping_add(1);
        w[REG_AVG].store(avg_code, Ordering::Relaxed);
        w[REG_TS_LO].store(t_ns as u32, Ordering::Relaxed);
        w[REG_TS_HI].store((t_ns >> 32) as u32, Ordering::Relaxed);
        w[REG_SEQ].store(seq, Ordering::Relaxed);
        w[REG_GEN].store(gen.wrapping_add(2), Ordering::Release);
        Ok(seq)
    }

    pub fn read(&self, channel: u32) -> Result<RegisterSnapshot, BankError> {
        let base = self.base(channel)?;
        let w = &self.words[base..base + WORDS_PER_CHANNEL];
        loop {
            let g1 = w[REG_GEN].load(Ordering::Acquire);
            if g1 & 1 == 1 {
                std::hint::spin_loop();
                continue;
            }
            let avg_code = w[REG_AVG].load(Ordering::Relaxed);
            let lo = w[REG_TS_LO].load(Ordering::Relaxed);
            let hi = w[REG_TS_HI].load(Ordering::Relaxed);
            let seq = w[REG_SEQ].load(Ordering::Relaxed);
            fence(Ordering::Acquire);
            let g2 = w[REG_GEN].load(Ordering::Relaxed);
            if g1 == g2 {
                return Ok(RegisterSnapshot {
                    avg_code,
                    t_ns: ((hi as u64) << 32) | lo as u64,
                    seq,
                });
            }
        }
    }

    /// Zeroes every register. Writer-side operation.
    pub fn clear(&self) {
        for ch in 0..self.channels {
            let base = ch as usize * WORDS_PER_CHANNEL;
            let w = &self.words[base..base + WORDS_PER_CHANNEL];
            let gen = w[REG_GEN].load(Ordering::Relaxed);
            w[REG_GEN].store(gen.wrapping_add(1), Ordering::Relaxed);
            fence(Ordering::Release);
            for word in &w[REG_AVG..] {
                word.store(0, Ordering::Relaxed);
            }
            w[REG_GEN].store(gen.wrapping_add(2), Ordering::Release);
        }
    }
}

/// Reads one channel's latched triple.
pub fn read_register(bank: &RegisterBank, channel: u32) -> Result<RegisterSnapshot, BankError> {
    bank.read(channel)
}
