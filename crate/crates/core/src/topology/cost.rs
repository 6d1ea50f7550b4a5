//! MAC-bit cost and storage accounting.

use serde::{Deserialize, Serialize};

use super::model::{MultiQuantModel, WeightScheme};
use super::plan::{BranchId, SelectionMap};
use crate::error::Result;
use crate::quant::{BLOB_HEADER_BYTES, BRANCH_WEIGHT_BITS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub bits: u8,
    pub branches: usize,
    /// `Σ_{j ∈ P(b)} 2 · b · macs_j`.
    pub multiquant: u64,
    /// `b · b · macs` for a single model at `b` bits.
    pub reference: u64,
}

impl CostRow {
    pub fn parity(&self) -> bool {
        self.multiquant == self.reference
    }
}

/// Cost in MAC-bit units at width `b`. The half branch contributes
/// `macs_half` instead of `macs_per_body`.
pub fn compute_cost(map: &SelectionMap, b: u8, macs_per_body: u64, macs_half: u64) -> Result<CostRow> {
    let set = map.get(b)?;
    let w = BRANCH_WEIGHT_BITS as u64;
    let multiquant = set
        .iter()
        .map(|id| {
            let macs = match id {
                BranchId::Full(_) => macs_per_body,
                BranchId::Half => macs_half,
            };
            w * b as u64 * macs
        })
        .sum();
    Ok(CostRow {
        bits: b,
        branches: set.len(),
        multiquant,
        reference: (b as u64) * (b as u64) * macs_per_body,
    })
}

/// How body weights are stored on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BodyEncoding {
    Packed { bits: u8 },
    FullPrecision,
}

impl BodyEncoding {
    /// Default for a model: 2-bit codes for branches, 32-bit floats for a
    /// switchable body.
    pub fn of(model: &MultiQuantModel) -> Self {
        match model.scheme() {
            WeightScheme::FixedTwoBit => BodyEncoding::Packed {
                bits: BRANCH_WEIGHT_BITS,
            },
            WeightScheme::Switchable { .. } => BodyEncoding::FullPrecision,
        }
    }
}

/// Byte breakdown. Full-precision values are counted at 4 bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub encoding: BodyEncoding,
    pub body_params: usize,
    /// Packed codes (or 32-bit floats), without quantizer headers.
    pub body_payload_bytes: usize,
    /// `(l, u, b)` header per weight quantizer.
    pub quantizer_header_bytes: usize,
    /// `(l, u)` per activation quantizer.
    pub act_quantizer_bytes: usize,
    pub bn_bytes: usize,
    /// Stem conv, stem BN and classifier.
    pub stem_head_bytes: usize,
    /// The body stored as 32-bit floats, for comparison.
    pub fp_body_bytes: usize,
}

impl StorageReport {
    pub fn total_bytes(&self) -> usize {
        self.body_payload_bytes
            + self.quantizer_header_bytes
            + self.act_quantizer_bytes
            + self.bn_bytes
            + self.stem_head_bytes
    }

    pub fn size_mb(&self) -> f64 {
        self.total_bytes() as f64 / 1e6
    }

    /// Full-precision body bytes over payload bytes.
    pub fn body_compression_ratio(&self) -> f64 {
        self.fp_body_bytes as f64 / self.body_payload_bytes as f64
    }
}

pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

pub fn storage_report(model: &MultiQuantModel, encoding: BodyEncoding) -> StorageReport {
    let mut r = StorageReport {
        encoding,
        body_params: 0,
        body_payload_bytes: 0,
        quantizer_header_bytes: 0,
        act_quantizer_bytes: 0,
        bn_bytes: 0,
        stem_head_bytes: 0,
        fp_body_bytes: 0,
    };
    for branch in model.branches() {
        for block in &branch.blocks {
            let n = block.shape.weight_count();
            r.body_params += n;
            r.fp_body_bytes += 4 * n;
            r.body_payload_bytes += match encoding {
                BodyEncoding::Packed { bits } => packed_len(n, bits),
                BodyEncoding::FullPrecision => 4 * n,
            };
            r.quantizer_header_bytes += BLOB_HEADER_BYTES * block.weight_clip.len();
            r.act_quantizer_bytes += 16 * block.act_clip.len();
            r.bn_bytes += 4 * 4 * block.shape.out_channels * block.bn.len();
        }
    }
    let store = model.store();
    let (fw, fb) = model.head();
    let stem_bn = model.stem_bn();
    r.stem_head_bytes = 4
        * (store.value(model.stem_weight()).numel()
            + store.value(fw).numel()
            + store.value(fb).numel()
            + 4 * stem_bn.running_mean.len());
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_branch_plan, build_selection_map, Strategy};

    #[test]
    fn cost_rows() {
        let p = build_branch_plan(&[2, 4, 6, 8]).unwrap();
        let m = build_selection_map(&p, Strategy::Amortized).unwrap();
        for (b, units) in [(8u8, 64u64), (2, 4), (4, 16)] {
            let row = compute_cost(&m, b, 1, 0).unwrap();
            assert_eq!(row.multiquant, units);
            assert!(row.parity());
        }
        assert!(compute_cost(&m, 5, 1, 0).is_err());
    }

    #[test]
    fn packing_lengths() {
        assert_eq!(packed_len(1000, 2), 250);
        assert_eq!(packed_len(3, 2), 1);
        assert_eq!(packed_len(5, 8), 5);
    }
}
