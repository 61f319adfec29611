//! Deterministic access streams for contention engines and victims.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{OpType, VictimPreset};
use crate::genspace::ContentionConfig;

/// One memory access at a guest address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub addr: u64,
    pub write: bool,
}

/// Unbounded cyclic sweep over a buffer: start at the base, advance by the
/// stride, wrap at the buffer size.
#[derive(Debug, Clone)]
pub struct ContentionStream {
    base: u64,
    stride: u64,
    size: u64,
    offset: u64,
    op: OpType,
    issued: u64,
}

pub fn contention_stream(cfg: &ContentionConfig, base: u64) -> ContentionStream {
    ContentionStream {
        base,
        stride: cfg.stride_bytes.max(1),
        size: cfg.buffer_bytes.max(1),
        offset: 0,
        op: cfg.op,
        issued: 0,
    }
}

impl Iterator for ContentionStream {
    type Item = Access;

    fn next(&mut self) -> Option<Access> {
        let write = match self.op {
            OpType::Read => false,
            OpType::Write => true,
            OpType::ReadWrite => self.issued % 2 == 1,
        };
        let access = Access {
            addr: self.base + self.offset,
            write,
        };
        self.issued += 1;
        self.offset += self.stride;
        if self.offset >= self.size {
            self.offset = 0;
        }
        Some(access)
    }
}

/// FNV-1a, used to derive a stable per-benchmark seed from its name.
fn stable_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Finite victim stream: one sequential pass touching every line of the
/// working set, then uniformly random lines until `total_accesses` have
/// been issued. Writes occur with probability `write_fraction`.
#[derive(Debug, Clone)]
pub struct VictimStream {
    base: u64,
    line_bytes: u64,
    lines: u64,
    total: u64,
    issued: u64,
    write_fraction: f64,
    rng: ChaCha8Rng,
}

impl VictimStream {
    pub fn new(preset: &VictimPreset, base: u64, line_bytes: u64) -> Self {
        VictimStream {
            base,
            line_bytes,
            lines: preset.working_set_bytes.div_ceil(line_bytes).max(1),
            total: preset.total_accesses,
            issued: 0,
            write_fraction: preset.write_fraction.clamp(0.0, 1.0),
            rng: ChaCha8Rng::seed_from_u64(stable_seed(&preset.bench_name)),
        }
    }

    pub fn remaining(&self) -> u64 {
        self.total - self.issued
    }
}

impl Iterator for VictimStream {
    type Item = Access;

    fn next(&mut self) -> Option<Access> {
        if self.issued >= self.total {
            return None;
        }
        let line = if self.issued < self.lines {
            self.issued
        } else {
            self.rng.gen_range(0..self.lines)
        };
        let write = self.write_fraction > 0.0 && self.rng.gen_bool(self.write_fraction);
        self.issued += 1;
        Some(Access {
            addr: self.base + line * self.line_bytes,
            write,
        })
    }
}
