//! Byte accounting for stored activations.
//!
//! Every tensor a layer keeps for its backward pass is charged twice: once
//! as a 32-bit uncompressed baseline would store it (4 bytes per element)
//! and once as it is actually stored (1 byte per element plus the
//! quantization parameters when compressed, 4 bytes per element
//! otherwise). Only logical activation bytes are counted; weights,
//! optimizer state and allocator overhead are not.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const BASELINE_BYTES_PER_ELEMENT: u64 = 4;
pub const PARAM_BYTES: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    MatMul,
    Softmax,
    LayerNorm,
    Gelu,
}

impl OpKind {
    pub const ALL: [OpKind; 4] = [
        OpKind::MatMul,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::Gelu => "gelu",
        }
    }
}

/// What a single stored entry costs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EntryCost {
    /// Full-precision tensor.
    Exact { elements: usize },
    /// 8-bit payload plus `params` stored reals.
    Compressed { elements: usize, params: usize },
    /// Small full-precision side statistics.
    Aux { elements: usize },
}

impl EntryCost {
    pub fn elements(self) -> usize {
        match self {
            EntryCost::Exact { elements }
            | EntryCost::Compressed { elements, .. }
            | EntryCost::Aux { elements } => elements,
        }
    }

    pub fn baseline_bytes(self) -> u64 {
        self.elements() as u64 * BASELINE_BYTES_PER_ELEMENT
    }

    pub fn quant_param_bytes(self) -> u64 {
        match self {
            EntryCost::Compressed { params, .. } => params as u64 * PARAM_BYTES,
            _ => 0,
        }
    }

    pub fn actual_bytes(self) -> u64 {
        match self {
            EntryCost::Compressed { elements, .. } => elements as u64 + self.quant_param_bytes(),
            other => other.baseline_bytes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub layer: String,
    pub op: OpKind,
    pub cost: EntryCost,
    pub baseline_bytes: u64,
    pub actual_bytes: u64,
    pub quant_param_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryLedger {
    step: u64,
    records: Vec<StoreRecord>,
    live_baseline: u64,
    live_actual: u64,
    peak_baseline: u64,
    peak_actual: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpRow {
    pub op: OpKind,
    pub entries: usize,
    pub baseline_bytes: u64,
    pub actual_bytes: u64,
    pub quant_param_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: String,
    pub op: OpKind,
    pub baseline_bytes: u64,
    pub actual_bytes: u64,
    pub quant_param_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub step: u64,
    pub baseline_bytes: u64,
    pub actual_bytes: u64,
    pub quant_param_bytes: u64,
    pub reduction_ratio: f64,
    pub peak_baseline_bytes: u64,
    pub peak_actual_bytes: u64,
    pub per_op: Vec<OpRow>,
    pub per_layer: Vec<LayerRow>,
}

pub fn reduction_ratio(baseline: u64, actual: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - actual as f64 / baseline as f64
    }
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Starts a new step: per-entry records are cleared, peaks are kept.
    pub fn begin_step(&mut self, step: u64) {
        self.step = step;
        self.records.clear();
    }

    pub fn record_store(&mut self, layer: &str, op: OpKind, cost: EntryCost) {
        let record = StoreRecord {
            layer: layer.to_string(),
            op,
            cost,
            baseline_bytes: cost.baseline_bytes(),
            actual_bytes: cost.actual_bytes(),
            quant_param_bytes: cost.quant_param_bytes(),
        };
        self.live_baseline += record.baseline_bytes;
        self.live_actual += record.actual_bytes;
        self.peak_baseline = self.peak_baseline.max(self.live_baseline);
        self.peak_actual = self.peak_actual.max(self.live_actual);
        self.records.push(record);
    }

    /// A context was consumed by its backward pass and its entries freed.
    pub fn record_release(&mut self, costs: &[EntryCost]) {
        for c in costs {
            self.live_baseline = self.live_baseline.saturating_sub(c.baseline_bytes());
            self.live_actual = self.live_actual.saturating_sub(c.actual_bytes());
        }
    }

    pub fn live_bytes(&self) -> (u64, u64) {
        (self.live_baseline, self.live_actual)
    }

    pub fn peak_bytes(&self) -> (u64, u64) {
        (self.peak_baseline, self.peak_actual)
    }

    pub fn records(&self) -> &[StoreRecord] {
        &self.records
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn report(&self) -> LedgerReport {
        let mut per_op: BTreeMap<OpKind, OpRow> = BTreeMap::new();
        let mut per_layer: BTreeMap<(String, OpKind), LayerRow> = BTreeMap::new();
        for r in &self.records {
            let row = per_op.entry(r.op).or_insert(OpRow {
                op: r.op,
                entries: 0,
                baseline_bytes: 0,
                actual_bytes: 0,
                quant_param_bytes: 0,
            });
            row.entries += 1;
            row.baseline_bytes += r.baseline_bytes;
            row.actual_bytes += r.actual_bytes;
            row.quant_param_bytes += r.quant_param_bytes;

            let lrow = per_layer
                .entry((r.layer.clone(), r.op))
                .or_insert(LayerRow {
                    layer: r.layer.clone(),
                    op: r.op,
                    baseline_bytes: 0,
                    actual_bytes: 0,
                    quant_param_bytes: 0,
                });
            lrow.baseline_bytes += r.baseline_bytes;
            lrow.actual_bytes += r.actual_bytes;
            lrow.quant_param_bytes += r.quant_param_bytes;
        }
        let baseline: u64 = self.records.iter().map(|r| r.baseline_bytes).sum();
        let actual: u64 = self.records.iter().map(|r| r.actual_bytes).sum();
        LedgerReport {
            step: self.step,
            baseline_bytes: baseline,
            actual_bytes: actual,
            quant_param_bytes: self.records.iter().map(|r| r.quant_param_bytes).sum(),
            reduction_ratio: reduction_ratio(baseline, actual),
            peak_baseline_bytes: self.peak_baseline,
            peak_actual_bytes: self.peak_actual,
            per_op: per_op.into_values().collect(),
            per_layer: per_layer.into_values().collect(),
        }
    }
}

impl LedgerReport {
    /// Per-op rows add up to the totals.
    pub fn is_conserved(&self) -> bool {
        let b: u64 = self.per_op.iter().map(|r| r.baseline_bytes).sum();
        let a: u64 = self.per_op.iter().map(|r| r.actual_bytes).sum();
        let q: u64 = self.per_op.iter().map(|r| r.quant_param_bytes).sum();
        let lb: u64 = self.per_layer.iter().map(|r| r.baseline_bytes).sum();
        let la: u64 = self.per_layer.iter().map(|r| r.actual_bytes).sum();
        b == self.baseline_bytes
            && a == self.actual_bytes
            && q == self.quant_param_bytes
            && lb == self.baseline_bytes
            && la == self.actual_bytes
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>14} {:>14} {:>12} {:>10}",
            "op", "entries", "baseline_B", "actual_B", "qparams_B", "reduction"
        );
        for r in &self.per_op {
            let _ = writeln!(
                out,
                "{:<10} {:>8} {:>14} {:>14} {:>12} {:>9.1}%",
                r.op.name(),
                r.entries,
                r.baseline_bytes,
                r.actual_bytes,
                r.quant_param_bytes,
                100.0 * reduction_ratio(r.baseline_bytes, r.actual_bytes)
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>14} {:>14} {:>12} {:>9.1}%",
            "total",
            self.per_op.iter().map(|r| r.entries).sum::<usize>(),
            self.baseline_bytes,
            self.actual_bytes,
            self.quant_param_bytes,
            100.0 * self.reduction_ratio
        );
        let _ = writeln!(
            out,
            "peak live bytes: baseline {} / actual {}",
            self.peak_baseline_bytes, self.peak_actual_bytes
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_compressed_tensor() {
        let mut l = MemoryLedger::new();
        l.record_store(
            "x",
            OpKind::MatMul,
            EntryCost::Compressed {
                elements: 1024,
                params: 8,
            },
        );
        let r = l.report();
        assert_eq!(r.baseline_bytes, 4096);
        assert_eq!(r.actual_bytes, 1024 + 32);
        assert_eq!(r.quant_param_bytes, 32);
        assert!((r.reduction_ratio - (1.0 - 1056.0 / 4096.0)).abs() < 1e-12);
        assert!((r.reduction_ratio - 0.742).abs() < 1e-3);
    }

    #[test]
    fn nothing_compressed_is_zero() {
        let mut l = MemoryLedger::new();
        l.record_store("a", OpKind::Gelu, EntryCost::Exact { elements: 10 });
        l.record_store("b", OpKind::LayerNorm, EntryCost::Aux { elements: 4 });
        let r = l.report();
        assert_eq!(r.reduction_ratio, 0.0);
        assert_eq!(r.baseline_bytes, 56);
        assert_eq!(MemoryLedger::new().report().reduction_ratio, 0.0);
    }

    #[test]
    fn rows_conserve_and_peaks_track() {
        let mut l = MemoryLedger::new();
        let a = EntryCost::Compressed {
            elements: 100,
            params: 2,
        };
        let b = EntryCost::Exact { elements: 50 };
        l.record_store("l0", OpKind::Softmax, a);
        l.record_store("l1", OpKind::Gelu, b);
        assert_eq!(l.live_bytes(), (600, 108 + 200));
        l.record_release(&[b]);
        l.record_release(&[a]);
        assert_eq!(l.live_bytes(), (0, 0));
        let r = l.report();
        assert!(r.is_conserved());
        assert_eq!(r.peak_baseline_bytes, 600);
        assert_eq!(r.per_op.len(), 2);
        assert!(r.to_table().contains("softmax"));
        l.reset();
        assert_eq!(l.report().baseline_bytes, 0);
        assert_eq!(l.peak_bytes(), (0, 0));
    }
}
