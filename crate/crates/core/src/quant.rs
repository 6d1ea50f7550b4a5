//! Uniform quantizer with trainable clipping bounds.
//!
//! A value is normalized into `[0, 1]` by the clip interval `[l, u]`, scaled
//! to `2^b - 1` levels and rounded, then mapped back: weights land on a
//! symmetric grid in `[-1, 1]`, activations on `[0, 1]`.
//!
//! Rounding is half-away-from-zero (`f64::round`). The training graph treats
//! the rounding step as identity in the backward pass; everything else
//! (clip and affine maps) is differentiated exactly.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest allowed `u - l`.
pub const MIN_CLIP_GAP: f64 = 1e-4;

/// Bits per weight in every MultiQuant branch.
pub const BRANCH_WEIGHT_BITS: u8 = 2;

pub const MAX_BITS: u8 = 16;

/// Floor rounding treats values this close below an integer as that
/// integer, so reconstructed grid points requantize to themselves.
pub const FLOOR_TOLERANCE: f64 = 1e-9;

static CLIP_PROJECTIONS: AtomicU64 = AtomicU64::new(0);

/// Number of times a collapsed clip interval was widened to `MIN_CLIP_GAP`.
pub fn clip_projection_count() -> u64 {
    CLIP_PROJECTIONS.load(Ordering::Relaxed)
}

/// Returns `(l, u)` with `u - l >= MIN_CLIP_GAP`, counting a projection when
/// the input had to be widened.
pub fn project_clip_gap(l: f64, u: f64) -> (f64, f64) {
    if u - l >= MIN_CLIP_GAP {
        (l, u)
    } else {
        CLIP_PROJECTIONS.fetch_add(1, Ordering::Relaxed);
        (l, l + MIN_CLIP_GAP)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Weight,
    Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RoundMode {
    #[default]
    Nearest,
    Floor,
}

impl RoundMode {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            RoundMode::Nearest => v.round(),
            RoundMode::Floor => (v + FLOOR_TOLERANCE).floor(),
        }
    }
}

/// The static part of a quantizer: everything except the clip bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub role: Role,
    pub round: RoundMode,
}

impl QuantSpec {
    pub fn new(bits: u8, role: Role, round: RoundMode) -> Result<Self> {
        if !(2..=MAX_BITS).contains(&bits) {
            return Err(Error::Quantizer(format!("bit-width {bits} outside 2..={MAX_BITS}")));
        }
        Ok(QuantSpec { bits, role, round })
    }

    pub fn weight(bits: u8) -> Self {
        QuantSpec {
            bits,
            role: Role::Weight,
            round: RoundMode::Nearest,
        }
    }

    pub fn activation(bits: u8) -> Self {
        QuantSpec {
            bits,
            role: Role::Activation,
            round: RoundMode::Nearest,
        }
    }

    /// `2^b - 1`.
    #[inline]
    pub fn levels(&self) -> f64 {
        ((1u32 << self.bits) - 1) as f64
    }

    /// Slope of the dequantized value with respect to the normalized value.
    #[inline]
    pub fn output_slope(&self) -> f64 {
        match self.role {
            Role::Weight => 2.0,
            Role::Activation => 1.0,
        }
    }

    #[inline]
    pub fn code(&self, xn: f64) -> f64 {
        self.round.apply(self.levels() * xn)
    }

    #[inline]
    pub fn dequantize_code(&self, q: f64) -> f64 {
        let s = self.levels();
        match self.role {
            Role::Weight => 2.0 * (q / s - 0.5),
            Role::Activation => q / s,
        }
    }
}

#[inline]
pub fn normalize_value(x: f64, l: f64, u: f64) -> f64 {
    ((x - l) / (u - l)).clamp(0.0, 1.0)
}

/// Integer codes produced by [`QuantizerParams::quantize`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codes {
    pub shape: Vec<usize>,
    pub bits: u8,
    pub values: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerParams {
    pub l: f64,
    pub u: f64,
    pub spec: QuantSpec,
}

impl QuantizerParams {
    pub fn new(l: f64, u: f64, spec: QuantSpec) -> Result<Self> {
        if !l.is_finite() || !u.is_finite() {
            return Err(Error::Quantizer(format!("non-finite clip bounds ({l}, {u})")));
        }
        Ok(QuantizerParams { l, u, spec })
    }

    pub fn bits(&self) -> u8 {
        self.spec.bits
    }

    pub fn role(&self) -> Role {
        self.spec.role
    }

    /// Clip bounds after enforcing the minimum gap.
    pub fn effective_bounds(&self) -> (f64, f64) {
        project_clip_gap(self.l, self.u)
    }

    /// `clip((x - l) / (u - l), 0, 1)`.
    pub fn normalize(&self, x: &Tensor) -> Tensor {
        let (l, u) = self.effective_bounds();
        x.map(|v| normalize_value(v, l, u))
    }

    pub fn quantize(&self, xn: &Tensor) -> Codes {
        let top = self.spec.levels();
        Codes {
            shape: xn.shape().to_vec(),
            bits: self.spec.bits,
            values: xn
                .data()
                .iter()
                .map(|&v| self.spec.code(v).clamp(0.0, top) as u32)
                .collect(),
        }
    }

    pub fn dequantize(&self, codes: &Codes) -> Result<Tensor> {
        let top = (1u32 << self.spec.bits) - 1;
        if let Some(bad) = codes.values.iter().find(|&&q| q > top) {
            return Err(Error::Quantizer(format!(
                "code {bad} out of range for {} bits",
                self.spec.bits
            )));
        }
        let data = codes
            .values
            .iter()
            .map(|&q| self.spec.dequantize_code(q as f64))
            .collect();
        Tensor::new(codes.shape.clone(), data)
    }

    pub fn fake_quantize(&self, x: &Tensor) -> Result<Tensor> {
        if !x.all_finite() {
            return Err(Error::NonFinite {
                context: "fake-quantize input".into(),
            });
        }
        let codes = self.quantize(&self.normalize(x));
        self.dequantize(&codes)
    }

    /// Maps a dequantized value back into the clip interval, i.e. the
    /// representative the grid point stands for in the original domain.
    pub fn reconstruct(&self, x_bar: f64) -> f64 {
        let (l, u) = self.effective_bounds();
        match self.spec.role {
            Role::Weight => l + (u - l) * (x_bar + 1.0) / 2.0,
            Role::Activation => l + (u - l) * x_bar,
        }
    }
}

/// Initial clip bounds: `±3σ` for weights, `[0, p99.9]` for activations.
pub fn init_clip_params(x: &Tensor, spec: QuantSpec) -> Result<QuantizerParams> {
    if x.numel() == 0 {
        return Err(Error::Quantizer("cannot initialize from an empty tensor".into()));
    }
    let (l, u) = init_clip_bounds(x.data(), spec.role);
    QuantizerParams::new(l, u, spec)
}

pub(crate) fn init_clip_bounds(values: &[f64], role: Role) -> (f64, f64) {
    match role {
        Role::Weight => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if std > 0.0 && std.is_finite() {
                (-3.0 * std, 3.0 * std)
            } else {
                (-1.0, 1.0)
            }
        }
        Role::Activation => {
            let p = percentile(values, 99.9);
            if p > MIN_CLIP_GAP && p.is_finite() {
                (0.0, p)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

/// Linear-interpolated percentile, `pct` in `[0, 100]`.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Packs codes into a little-endian bitstream: code `i` occupies bits
/// `[i*b, (i+1)*b)`, least significant bit first.
pub fn pack_codes(codes: &[u32], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    for (i, &code) in codes.iter().enumerate() {
        let mut pos = i * bits;
        for k in 0..bits {
            if (code >> k) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u32>> {
    let bits = bits as usize;
    if bytes.len() * 8 < count * bits {
        return Err(Error::Checkpoint(format!(
            "packed payload of {} bytes too short for {count} codes",
            bytes.len()
        )));
    }
    Ok((0..count)
        .map(|i| {
            (0..bits).fold(0u32, |acc, k| {
                let pos = i * bits + k;
                acc | ((((bytes[pos / 8] >> (pos % 8)) & 1) as u32) << k)
            })
        })
        .collect())
}

/// Bytes of the `(l, u, b)` header preceding every packed payload.
pub const BLOB_HEADER_BYTES: usize = 8 + 8 + 1;

/// Serialized quantized tensor: `l`, `u` as little-endian f64, `b` as u8,
/// then the packed codes.
pub fn encode_blob(params: &QuantizerParams, codes: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(BLOB_HEADER_BYTES + (codes.len() * params.bits() as usize).div_ceil(8));
    out.extend_from_slice(&params.l.to_le_bytes());
    out.extend_from_slice(&params.u.to_le_bytes());
    out.push(params.bits());
    out.extend_from_slice(&pack_codes(codes, params.bits()));
    out
}

/// Inverse of [`encode_blob`]; returns `(l, u, b, codes)` and the number of
/// bytes consumed.
pub fn decode_blob(bytes: &[u8], count: usize) -> Result<((f64, f64, u8, Vec<u32>), usize)> {
    if bytes.len() < BLOB_HEADER_BYTES {
        return Err(Error::Checkpoint("truncated quantizer header".into()));
    }
    let l = f64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let u = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let b = bytes[16];
    if !(1..=MAX_BITS).contains(&b) {
        return Err(Error::Checkpoint(format!("bad bit-width {b} in blob")));
    }
    let payload = (count * b as usize).div_ceil(8);
    let body = bytes
        .get(BLOB_HEADER_BYTES..BLOB_HEADER_BYTES + payload)
        .ok_or_else(|| Error::Checkpoint("truncated packed payload".into()))?;
    let codes = unpack_codes(body, b, count)?;
    Ok(((l, u, b, codes), BLOB_HEADER_BYTES + payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn w2(l: f64, u: f64) -> QuantizerParams {
        QuantizerParams::new(l, u, QuantSpec::weight(2)).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let p = w2(-1.0, 1.0);
        let x = Tensor::from_vec(vec![0.4, -1.0, 1.7]);
        let xn = p.normalize(&x);
        assert_relative_eq!(xn.data()[0], 0.7, epsilon = 1e-15);
        assert_eq!(xn.data()[1], 0.0);
        assert_eq!(xn.data()[2], 1.0);
    }

    #[test]
    fn quantize_nearest_and_floor() {
        let near = QuantizerParams::new(0.0, 1.0, QuantSpec::weight(2)).unwrap();
        let floor = QuantizerParams::new(0.0, 1.0, QuantSpec::new(2, Role::Weight, RoundMode::Floor).unwrap()).unwrap();
        let xn = Tensor::from_vec(vec![0.7, 0.6, 1.0]);
        assert_eq!(near.quantize(&xn).values, vec![2, 2, 3]);
        assert_eq!(floor.quantize(&xn).values, vec![2, 1, 3]);
    }

    #[test]
    fn dequantize_examples() {
        let w = w2(-1.0, 1.0);
        let codes = Codes {
            shape: vec![2],
            bits: 2,
            values: vec![2, 0],
        };
        let d = w.dequantize(&codes).unwrap();
        assert_relative_eq!(d.data()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(d.data()[1], -1.0);

        let a = QuantizerParams::new(0.0, 1.0, QuantSpec::activation(8)).unwrap();
        let full = Codes {
            shape: vec![1],
            bits: 8,
            values: vec![255],
        };
        assert_eq!(a.dequantize(&full).unwrap().data(), &[1.0]);
        let bad = Codes {
            shape: vec![1],
            bits: 2,
            values: vec![4],
        };
        assert!(w.dequantize(&bad).is_err());
    }

    #[test]
    fn fake_quantize_chain_and_grid_fixed_point() {
        let p = w2(-1.0, 1.0);
        let out = p.fake_quantize(&Tensor::from_vec(vec![0.4])).unwrap();
        assert_relative_eq!(out.item(), 1.0 / 3.0, epsilon = 1e-15);
        let grid = p
            .dequantize(&Codes {
                shape: vec![4],
                bits: 2,
                values: vec![0, 1, 2, 3],
            })
            .unwrap();
        assert_eq!(p.fake_quantize(&grid).unwrap(), grid);
        assert!(p.fake_quantize(&Tensor::from_vec(vec![f64::NAN])).is_err());
    }

    #[test]
    fn tie_breaking_is_half_away_from_zero() {
        // b = 2, xn = 0.5 -> 1.5 rounds to 2.
        let p = QuantizerParams::new(0.0, 1.0, QuantSpec::activation(2)).unwrap();
        assert_eq!(p.quantize(&Tensor::from_vec(vec![0.5])).values, vec![2]);
    }

    #[test]
    fn collapsed_interval_is_projected() {
        let before = clip_projection_count();
        let p = w2(0.5, 0.5);
        let (l, u) = p.effective_bounds();
        assert_eq!(l, 0.5);
        assert_relative_eq!(u - l, MIN_CLIP_GAP, epsilon = 1e-12);
        assert!(clip_projection_count() > before);
        assert!(p.normalize(&Tensor::from_vec(vec![0.6])).all_finite());
    }

    #[test]
    fn init_examples() {
        let zeros = Tensor::zeros(&[16]);
        let p = init_clip_params(&zeros, QuantSpec::weight(2)).unwrap();
        assert_eq!((p.l, p.u), (-1.0, 1.0));

        let acts = Tensor::from_vec((0..=5000).map(|i| i as f64 / 1000.0).collect());
        let a = init_clip_params(&acts, QuantSpec::activation(4)).unwrap();
        assert_eq!(a.l, 0.0);
        assert_relative_eq!(a.u, 4.995, epsilon = 1e-9);
    }

    #[test]
    fn standard_normal_init_near_three() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let p = init_clip_params(&Tensor::from_vec(data), QuantSpec::weight(2)).unwrap();
        assert!((p.u - 3.0).abs() < 0.05, "u = {}", p.u);
        assert_eq!(p.l, -p.u);
    }

    #[test]
    fn packing_layout_and_blob() {
        // codes 1,2,3,0 -> bits 01 10 11 00 (LSB first) = 0b0011_1001
        assert_eq!(pack_codes(&[1, 2, 3, 0], 2), vec![0b0011_1001]);
        assert_eq!(pack_codes(&[0; 1000], 2).len(), 250);
        let p = w2(-0.75, 0.5);
        let codes = vec![3, 1, 0, 2, 2];
        let blob = encode_blob(&p, &codes);
        assert_eq!(blob.len(), BLOB_HEADER_BYTES + 2);
        let ((l, u, b, back), used) = decode_blob(&blob, codes.len()).unwrap();
        assert_eq!((l, u, b, used), (-0.75, 0.5, 2, blob.len()));
        assert_eq!(back, codes);
        assert!(decode_blob(&blob[..10], 5).is_err());
    }

    #[test]
    fn rejects_bad_bits() {
        assert!(QuantSpec::new(1, Role::Weight, RoundMode::Nearest).is_err());
        assert!(QuantSpec::new(17, Role::Weight, RoundMode::Nearest).is_err());
    }
}
