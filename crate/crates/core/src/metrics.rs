//! Metric values shared by the simulator, the line protocol and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// The closed set of per-benchmark counters a backend may report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TimeMs,
    LlcMiss,
    BusCycles,
    MemAccess,
    RetiredOps,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::TimeMs,
        Metric::LlcMiss,
        Metric::BusCycles,
        Metric::MemAccess,
        Metric::RetiredOps,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::TimeMs => "time_ms",
            Metric::LlcMiss => "llc_miss",
            Metric::BusCycles => "bus_cycles",
            Metric::MemAccess => "mem_access",
            Metric::RetiredOps => "retired_ops",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecimalError {
    #[error("non-numeric value")]
    NonNumeric,
    #[error("value out of range")]
    Overflow,
}

/// Non-negative decimal with exactly three fractional digits of precision,
/// stored as an integer count of thousandths.
///
/// Rendering drops trailing fractional zeros, so `4370` renders as `4.37`
/// and `1024000` as `1024`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Decimal3(u64);

impl Decimal3 {
    pub const ZERO: Decimal3 = Decimal3(0);

    pub const fn from_milli(milli: u64) -> Self {
        Decimal3(milli)
    }

    pub fn from_int(value: u64) -> Self {
        Decimal3(value.saturating_mul(1000))
    }

    /// Nearest representable value; `None` for negative or non-finite input.
    pub fn from_f64(value: f64) -> Option<Self> {
        if !value.is_finite() || value < 0.0 {
            return None;
        }
        let milli = (value * 1000.0).round();
        if milli > u64::MAX as f64 {
            return None;
        }
        Some(Decimal3(milli as u64))
    }

    pub const fn milli(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl fmt::Display for Decimal3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let int = self.0 / 1000;
        let mut frac = self.0 % 1000;
        if frac == 0 {
            return write!(f, "{int}");
        }
        let mut digits = 3;
        while frac.is_multiple_of(10) {
            frac /= 10;
            digits -= 1;
        }
        write!(f, "{int}.{frac:0digits$}")
    }
}

impl FromStr for Decimal3 {
    type Err = DecimalError;

    /// Accepts `digits[.digits]`; fractional digits past the third are
    /// rounded half-up.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (int, frac) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        let all_digits = |t: &str| t.bytes().all(|b| b.is_ascii_digit());
        if int.is_empty() || !all_digits(int) || !all_digits(frac) || s.ends_with('.') {
            return Err(DecimalError::NonNumeric);
        }
        let int: u64 = int.parse().map_err(|_| DecimalError::Overflow)?;
        let mut milli: u64 = 0;
        for (i, b) in frac.bytes().enumerate() {
            let d = u64::from(b - b'0');
            if i < 3 {
                milli = milli * 10 + d;
            } else {
                if d >= 5 {
                    milli += 1;
                }
                break;
            }
        }
        for _ in frac.len()..3 {
            milli *= 10;
        }
        int.checked_mul(1000)
            .and_then(|v| v.checked_add(milli))
            .map(Decimal3)
            .ok_or(DecimalError::Overflow)
    }
}

impl Serialize for Decimal3 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.0.is_multiple_of(1000) {
            serializer.serialize_u64(self.0 / 1000)
        } else {
            serializer.serialize_f64(self.as_f64())
        }
    }
}

impl<'de> Deserialize<'de> for Decimal3 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(deserializer)?;
        Decimal3::from_f64(v).ok_or_else(|| serde::de::Error::custom("expected a non-negative number"))
    }
}

/// Counters from one benchmark execution. Metrics a backend did not report
/// are absent from the map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub vm: String,
    pub bench: String,
    pub iteration: u32,
    pub metrics: BTreeMap<Metric, Decimal3>,
}

impl MetricsSample {
    pub fn new(vm: impl Into<String>, bench: impl Into<String>, iteration: u32) -> Self {
        MetricsSample {
            vm: vm.into(),
            bench: bench.into(),
            iteration,
            metrics: BTreeMap::new(),
        }
    }

    pub fn get(&self, metric: Metric) -> Option<Decimal3> {
        self.metrics.get(&metric).copied()
    }

    pub fn set(&mut self, metric: Metric, value: Decimal3) {
        self.metrics.insert(metric, value);
    }

    pub fn time_ms(&self) -> Option<f64> {
        self.get(Metric::TimeMs).map(Decimal3::as_f64)
    }
}
