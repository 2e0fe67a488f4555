//! Exact floating-point-operation accounting.
//!
//! All counts are integers under one pinned convention so ratios between runs
//! are meaningful:
//!
//! * multiply-accumulate = 2 FLOPs, bias add = 1 FLOP per output element
//! * interpolation = 2 FLOPs per in-bounds neighbor per channel plus 1
//!   division per skipped pixel per channel
//! * batchnorm 2, relu 1, softmax 5, entropy 3 FLOPs per element
//! * 2x2 average pooling 4, bilinear resize 8 FLOPs per output element
//! * residual add 1 FLOP per element
//! * comparisons, maxima, thresholding, rank selection and PRNG draws are
//!   integer/control work and count as 0 FLOPs
//!
//! Confidence resampling (the bilinear resize of a confidence map to a
//! layer's resolution) is charged once per exit and resolution, inside the
//! record of the layer that first needed it.

use crate::error::{Error, Result};

/// Cost and activity of one executed layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRecord {
    pub name: String,
    /// Output pixels actually convolved (all pixels for unmasked layers).
    pub active_pixels: u64,
    /// Output pixels skipped and filled by interpolation.
    pub skipped_pixels: u64,
    pub conv_flops: u64,
    pub interp_flops: u64,
    /// Normalization, activation, pooling, resizing, residual adds, softmax,
    /// confidence resampling.
    pub aux_flops: u64,
}

impl LayerRecord {
    pub fn total(&self) -> u64 {
        self.conv_flops + self.interp_flops + self.aux_flops
    }
}

/// Append-only per-layer ledger with cumulative totals at exit boundaries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopsLedger {
    records: Vec<LayerRecord>,
    /// Cumulative grand total at each completed exit.
    exit_totals: Vec<u64>,
    /// Record count at each completed exit.
    exit_boundaries: Vec<usize>,
    running_total: u64,
}

impl FlopsLedger {
    pub fn new() -> Self {
        FlopsLedger::default()
    }

    pub fn push(&mut self, record: LayerRecord) {
        self.running_total += record.total();
        self.records.push(record);
    }

    /// Close the current exit: everything recorded so far belongs to exits
    /// 1..=n where n is the number of boundaries marked.
    pub fn mark_exit(&mut self) {
        self.exit_totals.push(self.running_total);
        self.exit_boundaries.push(self.records.len());
    }

    pub fn records(&self) -> &[LayerRecord] {
        &self.records
    }

    pub fn exit_totals(&self) -> &[u64] {
        &self.exit_totals
    }

    pub fn exits_completed(&self) -> usize {
        self.exit_totals.len()
    }

    /// Total FLOPs over every executed layer, including layers after the last
    /// completed exit.
    pub fn grand_total(&self) -> u64 {
        self.running_total
    }

    pub fn gflops_at_exit(&self, exit_index: usize) -> Option<f64> {
        self.exit_totals.get(exit_index).map(|&t| t as f64 / 1e9)
    }

    /// Check internal consistency: per-layer sums reproduce the exit totals
    /// and the grand total exactly, and totals never decrease.
    pub fn audit(&self) -> Result<()> {
        let mut sum = 0u64;
        let mut next_exit = 0usize;
        for (i, rec) in self.records.iter().enumerate() {
            sum += rec.total();
            while next_exit < self.exit_boundaries.len() && self.exit_boundaries[next_exit] == i + 1
            {
                if self.exit_totals[next_exit] != sum {
                    return Err(Error::config(format!(
                        "ledger audit: exit {} total {} != record sum {}",
                        next_exit + 1,
                        self.exit_totals[next_exit],
                        sum
                    )));
                }
                next_exit += 1;
            }
        }
        if next_exit != self.exit_boundaries.len() {
            return Err(Error::config("ledger audit: exit boundary beyond record count"));
        }
        if sum != self.running_total {
            return Err(Error::config(format!(
                "ledger audit: grand total {} != record sum {}",
                self.running_total, sum
            )));
        }
        for pair in self.exit_totals.windows(2) {
            if pair[1] < pair[0] {
                return Err(Error::config("ledger audit: exit totals decrease"));
            }
        }
        Ok(())
    }
}

pub fn conv_flops(kh: u64, kw: u64, cin: u64, cout: u64, active_pixels: u64) -> u64 {
    2 * kh * kw * cin * cout * active_pixels + cout * active_pixels
}

pub fn batchnorm_flops(channels: u64, pixels: u64) -> u64 {
    2 * channels * pixels
}

pub fn relu_flops(channels: u64, pixels: u64) -> u64 {
    channels * pixels
}

pub fn softmax_flops(channels: u64, pixels: u64) -> u64 {
    5 * channels * pixels
}

pub fn entropy_flops(channels: u64, pixels: u64) -> u64 {
    3 * channels * pixels
}

pub fn avg_pool_flops(channels: u64, out_pixels: u64) -> u64 {
    4 * channels * out_pixels
}

pub fn resize_flops(channels: u64, out_pixels: u64) -> u64 {
    8 * channels * out_pixels
}

pub fn residual_add_flops(channels: u64, pixels: u64) -> u64 {
    channels * pixels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_flops_hand_counts() {
        // 3x3 kernel, 2 in, 4 out, 8x8 output: 2*3*3*2*4*64 + 4*64 = 9472.
        assert_eq!(conv_flops(3, 3, 2, 4, 64), 9472);
        // 1x1 conv: 2*cin*cout*px + cout*px.
        assert_eq!(conv_flops(1, 1, 8, 16, 100), 2 * 8 * 16 * 100 + 16 * 100);
    }

    #[test]
    fn ledger_audit_passes_and_detects_tamper() {
        let mut l = FlopsLedger::new();
        l.push(LayerRecord {
            name: "a".into(),
            active_pixels: 10,
            skipped_pixels: 0,
            conv_flops: 100,
            interp_flops: 0,
            aux_flops: 5,
        });
        l.mark_exit();
        l.push(LayerRecord {
            name: "b".into(),
            active_pixels: 4,
            skipped_pixels: 6,
            conv_flops: 40,
            interp_flops: 30,
            aux_flops: 2,
        });
        l.mark_exit();
        assert_eq!(l.exit_totals(), &[105, 177]);
        assert_eq!(l.grand_total(), 177);
        l.audit().unwrap();

        let mut tampered = l.clone();
        tampered.exit_totals[0] = 104;
        assert!(tampered.audit().is_err());
    }

    #[test]
    fn partial_ledger_grand_total_exceeds_last_exit() {
        let mut l = FlopsLedger::new();
        l.push(LayerRecord {
            name: "a".into(),
            active_pixels: 1,
            skipped_pixels: 0,
            conv_flops: 10,
            interp_flops: 0,
            aux_flops: 0,
        });
        l.mark_exit();
        l.push(LayerRecord {
            name: "half".into(),
            active_pixels: 1,
            skipped_pixels: 0,
            conv_flops: 7,
            interp_flops: 0,
            aux_flops: 0,
        });
        assert_eq!(l.exit_totals(), &[10]);
        assert_eq!(l.grand_total(), 17);
        l.audit().unwrap();
    }
}
