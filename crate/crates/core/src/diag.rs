//! Diagnostics: arithmetic op tallies priced by a per-operation energy table,
//! similarity histograms, overflow traces and learning-curve export.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::train::RunMetrics;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("op profile has zero priced energy")]
    ZeroEnergy,
    #[error("cannot parse op kind {0:?}")]
    ParseOp(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumberType {
    Fixed,
    Float,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithOp {
    Add,
    Mult,
    Div,
    Exp,
    Xnor,
    Shift,
}

impl ArithOp {
    fn name(self) -> &'static str {
        match self {
            ArithOp::Add => "add",
            ArithOp::Mult => "mult",
            ArithOp::Div => "div",
            ArithOp::Exp => "exp",
            ArithOp::Xnor => "xnor",
            ArithOp::Shift => "shift",
        }
    }
}

/// One category of arithmetic operation, e.g. an 8-bit fixed-point add.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpKind {
    pub number: NumberType,
    pub op: ArithOp,
    pub bits: u32,
}

impl OpKind {
    pub fn fixed(op: ArithOp, bits: u32) -> Self {
        Self { number: NumberType::Fixed, op, bits }
    }

    pub fn float(op: ArithOp, bits: u32) -> Self {
        Self { number: NumberType::Float, op, bits }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let number = match self.number {
            NumberType::Fixed => "fixed",
            NumberType::Float => "float",
        };
        write!(f, "{number}-{}-{}", self.op.name(), self.bits)
    }
}

impl FromStr for OpKind {
    type Err = DiagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || DiagError::ParseOp(s.to_string());
        let mut parts = s.split('-');
        let number = match parts.next() {
            Some("fixed") => NumberType::Fixed,
            Some("float") => NumberType::Float,
            _ => return Err(err()),
        };
        let op = match parts.next() {
            Some("add") => ArithOp::Add,
            Some("mult") => ArithOp::Mult,
            Some("div") => ArithOp::Div,
            Some("exp") => ArithOp::Exp,
            Some("xnor") => ArithOp::Xnor,
            Some("shift") => ArithOp::Shift,
            _ => return Err(err()),
        };
        let bits = parts.next().and_then(|b| b.parse().ok()).ok_or_else(err)?;
        if parts.next().is_some() {
            return Err(err());
        }
        Ok(Self { number, op, bits })
    }
}

impl Serialize for OpKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OpKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Tally of executed operations per [`OpKind`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OpCounts(BTreeMap<OpKind, u64>);

impl OpCounts {
    pub fn add(&mut self, kind: OpKind, n: u64) {
        if n > 0 {
            *self.0.entry(kind).or_insert(0) += n;
        }
    }

    pub fn get(&self, kind: OpKind) -> u64 {
        self.0.get(&kind).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &OpCounts) {
        for (&k, &n) in &other.0 {
            self.add(k, n);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (OpKind, u64)> + '_ {
        self.0.iter().map(|(&k, &n)| (k, n))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub number: NumberType,
    pub op: ArithOp,
    pub bits: u32,
    /// Energy per operation in femtojoules (integers keep gain ratios exact).
    pub femtojoules: u32,
}

/// Per-operation energy table. Ops whose width is not in the table are
/// priced at the next wider entry of the same type; ops without any entry
/// (exp, xnor, shift, div) are reported as unpriced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub rows: Vec<EnergyRow>,
}

impl Default for EnergyModel {
    /// 45 nm arithmetic energies (pJ): fixed add 8/32 = 0.03/0.1, fixed mult
    /// 8/32 = 0.2/3.1, float add 16/32 = 0.4/0.9, float mult 16/32 = 1.1/3.7.
    fn default() -> Self {
        use ArithOp::*;
        use NumberType::*;
        let row = |number, op, bits, femtojoules| EnergyRow { number, op, bits, femtojoules };
        Self {
            rows: vec![
                row(Fixed, Add, 8, 30),
                row(Fixed, Add, 32, 100),
                row(Fixed, Mult, 8, 200),
                row(Fixed, Mult, 32, 3100),
                row(Float, Add, 16, 400),
                row(Float, Add, 32, 900),
                row(Float, Mult, 16, 1100),
                row(Float, Mult, 32, 3700),
            ],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTotal {
    pub picojoules: f64,
    pub per_kind_pj: BTreeMap<OpKind, f64>,
    pub unpriced: BTreeMap<OpKind, u64>,
}

impl EnergyModel {
    fn row_for(&self, kind: OpKind) -> Option<&EnergyRow> {
        self.rows
            .iter()
            .filter(|r| r.number == kind.number && r.op == kind.op && r.bits >= kind.bits)
            .min_by_key(|r| r.bits)
    }

    pub fn femtojoules(&self, kind: OpKind) -> Option<u32> {
        self.row_for(kind).map(|r| r.femtojoules)
    }

    pub fn picojoules(&self, kind: OpKind) -> Option<f64> {
        self.femtojoules(kind).map(|f| f as f64 / 1000.0)
    }

    /// Single-op gain relative to a 32-bit float multiply.
    pub fn gain_vs_float_mult(&self, kind: OpKind) -> Option<f64> {
        let reference = self.femtojoules(OpKind::float(ArithOp::Mult, 32))?;
        self.femtojoules(kind).map(|f| reference as f64 / f as f64)
    }

    pub fn total(&self, counts: &OpCounts) -> EnergyTotal {
        let mut out = EnergyTotal::default();
        let mut femto: u128 = 0;
        for (kind, n) in counts.iter() {
            match self.femtojoules(kind) {
                Some(f) => {
                    femto += f as u128 * n as u128;
                    out.per_kind_pj.insert(kind, f as f64 * n as f64 / 1000.0);
                }
                None => {
                    out.unpriced.insert(kind, n);
                }
            }
        }
        out.picojoules = femto as f64 / 1000.0;
        out
    }

    /// `energy(a) / energy(b)`: how many times more energy profile `a`
    /// spends than profile `b`.
    pub fn energy_gain(&self, a: &OpCounts, b: &OpCounts) -> Result<f64, DiagError> {
        let ea = self.total(a).picojoules;
        let eb = self.total(b).picojoules;
        if eb == 0.0 {
            return Err(DiagError::ZeroEnergy);
        }
        Ok(ea / eb)
    }
}

/// Rounds a gain to the single decimal the reference table prints.
pub fn round_gain(gain: f64) -> f64 {
    (gain * 10.0).round() / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub name: String,
    pub baseline: String,
    pub counts: OpCounts,
    pub total: EnergyTotal,
    pub baseline_total: EnergyTotal,
    pub gain_vs_baseline: f64,
}

impl EnergyReport {
    pub fn new(
        model: &EnergyModel,
        name: &str,
        counts: &OpCounts,
        baseline: &str,
        baseline_counts: &OpCounts,
    ) -> Result<Self, DiagError> {
        Ok(Self {
            name: name.to_string(),
            baseline: baseline.to_string(),
            counts: counts.clone(),
            total: model.total(counts),
            baseline_total: model.total(baseline_counts),
            gain_vs_baseline: model.energy_gain(baseline_counts, counts)?,
        })
    }
}

/// Fixed-bin histogram; values outside `[lo, hi)` land in the edge bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub const BINS: usize = 101;

    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(hi > lo && bins > 0);
        Self { lo, hi, counts: vec![0; bins] }
    }

    /// 101 bins over `[-2^(iwl+1), 2^(iwl+1)]`, twice the range of a format
    /// with `iwl` integer bits.
    pub fn for_iwl(iwl: u32) -> Self {
        let edge = crate::fxp::pow2(iwl as i32 + 1);
        Self::new(-edge, edge, Self::BINS)
    }

    pub fn record(&mut self, x: f64) {
        let bins = self.counts.len();
        let pos = (x - self.lo) / (self.hi - self.lo) * bins as f64;
        let idx = if pos.is_nan() { 0 } else { (pos.floor().max(0.0) as usize).min(bins - 1) };
        self.counts[idx] += 1;
    }

    pub fn extend<I: IntoIterator<Item = f64>>(&mut self, values: I) {
        for v in values {
            self.record(v);
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn bin_range(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }

    /// Smallest bin lower edge and largest bin upper edge with mass.
    pub fn support(&self) -> Option<(f64, f64)> {
        let first = self.counts.iter().position(|&c| c > 0)?;
        let last = self.counts.iter().rposition(|&c| c > 0)?;
        Some((self.bin_range(first).0, self.bin_range(last).1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSnapshot {
    pub step: usize,
    pub histogram: Histogram,
}

/// Bins a similarity record for one step.
pub fn record_histogram(
    record: &crate::similarity::SimilarityRecord,
    step: usize,
    iwl: u32,
) -> HistogramSnapshot {
    let mut histogram = Histogram::for_iwl(iwl);
    histogram.extend(record.values.iter().copied());
    HistogramSnapshot { step, histogram }
}

/// CSV with columns `step,bin_lo,bin_hi,count`.
pub fn export_histograms(snapshots: &[HistogramSnapshot]) -> String {
    let mut out = String::from("step,bin_lo,bin_hi,count\n");
    for s in snapshots {
        for (i, &c) in s.histogram.counts.iter().enumerate() {
            let (lo, hi) = s.histogram.bin_range(i);
            out.push_str(&format!("{},{},{},{}\n", s.step, lo, hi, c));
        }
    }
    out
}

/// CSV with columns `epoch,split,error` (error in percent).
pub fn export_curves(metrics: &RunMetrics) -> String {
    let mut out = String::from("epoch,split,error\n");
    for e in &metrics.epochs {
        for (split, err) in [("train", e.train_err), ("validation", e.val_err), ("test", e.test_err)] {
            out.push_str(&format!("{},{},{}\n", e.epoch, split, err));
        }
    }
    out
}

/// Per-epoch overflow counts by component.
pub fn overflow_trace(metrics: &RunMetrics) -> Vec<(usize, crate::model::OverflowCounts)> {
    metrics.epochs.iter().map(|e| (e.epoch, e.overflows)).collect()
}

/// `p90 - p10` of `values` (nearest-rank percentiles); `None` when empty.
pub fn inter_decile_range(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = |p: f64| {
        let idx = (p * sorted.len() as f64).ceil() as usize;
        sorted[idx.clamp(1, sorted.len()) - 1]
    };
    Some(rank(0.9) - rank(0.1))
}
