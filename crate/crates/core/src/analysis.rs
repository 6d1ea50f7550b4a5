//! Weight quantization error models.
//!
//! Weights are modelled as `N(0, 1)` and clipped symmetrically to `[-u, u]`.
//! The mean squared quantization error splits into a clipping term (mass
//! beyond `u`) and a resolution term (uniform error inside the bins).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::engine::kernels::{self, ConvGeom, MatRef};
use crate::error::{Error, Result};
use crate::quant::{init_clip_params, QuantSpec, QuantizerParams, Role, RoundMode};
use crate::tensor::Tensor;

pub const MIN_MC_SAMPLES: usize = 10_000;

/// Activations with magnitude below this are excluded from the relative
/// noise `ā/a - 1`.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

/// Below this fraction of supported activations the transplant fit is not
/// reported.
pub const MIN_SUPPORT_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightDistribution {
    #[default]
    StandardNormal,
}

/// Integrand of the clipping term: `(w - u)` literally, or its square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClippingVariant {
    AsWritten,
    #[default]
    Squared,
}

/// Denominator of the resolution term: `2^{2b}` or the exact bin count
/// `(2^b - 1)^2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BinModel {
    #[default]
    PowerOfTwo,
    Exact,
}

impl ClippingVariant {
    pub fn name(self) -> &'static str {
        match self {
            ClippingVariant::AsWritten => "as-written",
            ClippingVariant::Squared => "squared",
        }
    }
}

impl BinModel {
    pub fn name(self) -> &'static str {
        match self {
            BinModel::PowerOfTwo => "pow2-bin",
            BinModel::Exact => "exact-bin",
        }
    }
}

/// How the Monte-Carlo estimator draws weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Independent standard-normal draws.
    Plain,
    /// One uniform draw inside each of `n` equal-probability strata, mapped
    /// through the normal quantile function. Unbiased, with far less variance
    /// from the sparse tail beyond `u`.
    #[default]
    Stratified,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelConfig {
    pub distribution: WeightDistribution,
    pub u: f64,
    pub b: u8,
    pub clipping_variant: ClippingVariant,
    pub bin_model: BinModel,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
}

impl ErrorModelConfig {
    pub fn new(b: u8, u: f64) -> Self {
        ErrorModelConfig {
            distribution: WeightDistribution::StandardNormal,
            u,
            b,
            clipping_variant: ClippingVariant::Squared,
            bin_model: BinModel::PowerOfTwo,
            n_samples: 1_000_000,
            seed: 0,
            sampling: Sampling::Stratified,
        }
    }

    pub fn with_variant(mut self, clipping: ClippingVariant, bins: BinModel) -> Self {
        self.clipping_variant = clipping;
        self.bin_model = bins;
        self
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_samples(mut self, n: usize, seed: u64) -> Self {
        self.n_samples = n;
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.u > 0.0) || !self.u.is_finite() {
            return Err(Error::Analysis(format!(
                "clip bound u must be positive, got {}",
                self.u
            )));
        }
        if !(2..=crate::quant::MAX_BITS).contains(&self.b) {
            return Err(Error::Analysis(format!("bit-width {} outside 2..=16", self.b)));
        }
        if self.n_samples < MIN_MC_SAMPLES {
            return Err(Error::Analysis(format!(
                "n_samples {} below the minimum {MIN_MC_SAMPLES}",
                self.n_samples
            )));
        }
        Ok(())
    }

    pub fn variant_label(&self) -> String {
        format!("{}/{}", self.clipping_variant.name(), self.bin_model.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsqeReport {
    pub b: u8,
    pub u: f64,
    pub variant: String,
    pub clipping_noise: f64,
    pub quantization_noise: f64,
    pub total_analytic: f64,
    pub total_monte_carlo: Option<f64>,
    pub relative_gap: Option<f64>,
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal upper tail `P(W > x)`.
pub fn normal_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// `2 ∫_u^∞ φ(w) (w - u)^k dw` for `k = 1` (as written) or `k = 2`.
pub fn clipping_noise(u: f64, variant: ClippingVariant) -> f64 {
    let (pdf, tail) = (normal_pdf(u), normal_tail(u));
    let v = match variant {
        ClippingVariant::AsWritten => 2.0 * (pdf - u * tail),
        ClippingVariant::Squared => 2.0 * ((1.0 + u * u) * tail - u * pdf),
    };
    v.max(0.0)
}

pub fn quantization_noise(u: f64, b: u8, bins: BinModel) -> f64 {
    let denom = match bins {
        BinModel::PowerOfTwo => 2f64.powi(2 * b as i32),
        BinModel::Exact => (2f64.powi(b as i32) - 1.0).powi(2),
    };
    u * u / (3.0 * denom)
}

/// Closed-form clipping and resolution terms; Monte-Carlo fields left empty.
pub fn msqe_analytic(cfg: &ErrorModelConfig) -> Result<MsqeReport> {
    if !(cfg.u > 0.0) || !cfg.u.is_finite() {
        return Err(Error::Analysis(format!("clip bound u must be positive, got {}", cfg.u)));
    }
    if cfg.b < 2 {
        return Err(Error::Analysis(format!("bit-width {} below 2", cfg.b)));
    }
    let clip = clipping_noise(cfg.u, cfg.clipping_variant);
    let quant = quantization_noise(cfg.u, cfg.b, cfg.bin_model);
    Ok(MsqeReport {
        b: cfg.b,
        u: cfg.u,
        variant: cfg.variant_label(),
        clipping_noise: clip,
        quantization_noise: quant,
        total_analytic: clip + quant,
        total_monte_carlo: None,
        relative_gap: None,
    })
}

/// Mean of `(w - ŵ)^2` over `n_samples` standard-normal draws, where `ŵ` is
/// the fake-quantized weight mapped back into `[-u, u]`.
pub fn msqe_monte_carlo(cfg: &ErrorModelConfig) -> Result<f64> {
    cfg.validate()?;
    let q = QuantizerParams::new(-cfg.u, cfg.u, QuantSpec::weight(cfg.b))?;
    let spec = q.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = cfg.n_samples;
    let mut acc = 0.0;
    for i in 0..n {
        let w: f64 = match cfg.sampling {
            Sampling::Plain => StandardNormal.sample(&mut rng),
            Sampling::Stratified => {
                let p = (i as f64 + rng.gen::<f64>()) / n as f64;
                normal.inverse_cdf(p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
            }
        };
        let xn = crate::quant::normalize_value(w, -cfg.u, cfg.u);
        let bar = spec.dequantize_code(spec.code(xn));
        let e = w - q.reconstruct(bar);
        acc += e * e;
    }
    Ok(acc / n as f64)
}

/// Analytic report with the Monte-Carlo estimate and the relative gap
/// `|analytic - mc| / mc` filled in.
pub fn msqe_report(cfg: &ErrorModelConfig) -> Result<MsqeReport> {
    let mut r = msqe_analytic(cfg)?;
    let mc = msqe_monte_carlo(cfg)?;
    r.total_monte_carlo = Some(mc);
    r.relative_gap = Some((r.total_analytic - mc).abs() / mc);
    Ok(r)
}

/// Sum of analytic totals over a set of bit-widths at a shared `u`.
pub fn accumulated_msqe(bits: &[u8], u: f64, clipping: ClippingVariant, bins: BinModel) -> Result<f64> {
    if bits.is_empty() {
        return Err(Error::Analysis("empty bit set".into()));
    }
    bits.iter()
        .map(|&b| msqe_analytic(&ErrorModelConfig::new(b, u).with_variant(clipping, bins)).map(|r| r.total_analytic))
        .sum()
}

#[derive(Debug, Serialize)]
struct MsqeRow<'a> {
    b: u8,
    u: f64,
    variant: &'a str,
    clip: f64,
    quant: f64,
    analytic_total: f64,
    mc_total: String,
    rel_gap: String,
}

pub fn write_msqe_csv(path: &Path, rows: &[MsqeReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(MsqeRow {
            b: r.b,
            u: r.u,
            variant: &r.variant,
            clip: r.clipping_noise,
            quant: r.quantization_noise,
            analytic_total: r.total_analytic,
            mc_total: r.total_monte_carlo.map(|v| v.to_string()).unwrap_or_default(),
            rel_gap: r.relative_gap.map(|v| v.to_string()).unwrap_or_default(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Result of fitting weight noise that reproduces activation noise through
/// one convolution.
#[derive(Clone, Debug, PartialEq)]
pub enum Transplant {
    Fit(TransplantFit),
    /// Too few activations on the support to define the relative noise.
    Inconclusive {
        support: usize,
        total: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransplantFit {
    /// `‖w ⊛ ā - w(1 + n^w) ⊛ a‖ / ‖w ⊛ ā‖`.
    pub residual: f64,
    /// Fitted relative weight noise, zero where the weight is zero.
    pub weight_noise: Tensor,
    /// Mean of `ā/a - 1` over the support.
    pub mean_activation_noise: f64,
    pub support: usize,
}

/// Quantizes `a` at `b_a` bits (clip `[0, p99.9]`) and fits the weight noise
/// for a stride-1, unpadded convolution.
pub fn noise_transplant_residual(w: &Tensor, a: &Tensor, b_a: u8) -> Result<Transplant> {
    let q = init_clip_params(a, QuantSpec::new(b_a, Role::Activation, RoundMode::Nearest)?)?;
    let (lo, hi) = q.effective_bounds();
    // Map the dequantized grid back into the activation range.
    let a_bar = q.fake_quantize(a)?.map(|v| lo + (hi - lo) * v);
    noise_transplant_with(w, a, &a_bar)
}

/// As [`noise_transplant_residual`] with an explicit noisy activation `ā`.
pub fn noise_transplant_with(w: &Tensor, a: &Tensor, a_bar: &Tensor) -> Result<Transplant> {
    let (ws, xs) = (w.shape(), a.shape());
    if ws.len() != 4 || xs.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] > xs[2] || ws[3] > xs[3] {
        return Err(Error::Analysis(format!("weights {ws:?} do not convolve input {xs:?}")));
    }
    if a_bar.shape() != xs {
        return Err(Error::Analysis(format!(
            "ā shape {:?} differs from a {xs:?}",
            a_bar.shape()
        )));
    }
    let total = a.numel();
    let mut support = 0;
    let mut noise_sum = 0.0;
    for (&x, &xb) in a.data().iter().zip(a_bar.data()) {
        if x.abs() >= SUPPORT_THRESHOLD {
            support += 1;
            noise_sum += xb / x - 1.0;
        }
    }
    if support == 0 || (support as f64) < MIN_SUPPORT_FRACTION * total as f64 {
        return Ok(Transplant::Inconclusive { support, total });
    }

    let geom = ConvGeom {
        batch: xs[0],
        in_channels: xs[1],
        height: xs[2],
        width: xs[3],
        out_channels: ws[0],
        kernel: ws[2],
        stride: 1,
        padding: 0,
    };
    let (p, m, o) = (geom.patch_len(), geom.batch * geom.out_pixels(), geom.out_channels);
    let cols = kernels::im2col(a.data(), &geom);
    let diff: Vec<f64> = a_bar.data().iter().zip(a.data()).map(|(x, y)| x - y).collect();
    let diff_cols = kernels::im2col(&diff, &geom);
    let bar_cols = kernels::im2col(a_bar.data(), &geom);

    let conv = |weights: &[f64], c: &[f64]| {
        let mut out = vec![0.0; o * m];
        kernels::gemm(MatRef::new(weights, o, p), MatRef::new(c, p, m), &mut out, 0.0);
        out
    };
    let lhs = conv(w.data(), &bar_cols);
    let target = conv(w.data(), &diff_cols);

    let a_mat = DMatrix::from_row_slice(p, m, &cols);
    let gram = &a_mat * a_mat.transpose();
    let mut delta = vec![0.0; o * p];
    let mut noise = vec![0.0; o * p];
    for ch in 0..o {
        let w_row = &w.data()[ch * p..(ch + 1) * p];
        let active: Vec<usize> = (0..p).filter(|&k| w_row[k] != 0.0).collect();
        if active.is_empty() {
            continue;
        }
        let t = DVector::from_column_slice(&target[ch * m..(ch + 1) * m]);
        let rhs_full = &a_mat * t;
        let g = DMatrix::from_fn(active.len(), active.len(), |i, j| gram[(active[i], active[j])]);
        let r = DVector::from_fn(active.len(), |i, _| rhs_full[active[i]]);
        let sol = g
            .svd(true, true)
            .solve(&r, 1e-12 * gram.norm().max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Analysis(format!("least squares failed: {e}")))?;
        for (i, &k) in active.iter().enumerate() {
            delta[ch * p + k] = sol[i];
            noise[ch * p + k] = sol[i] / w_row[k];
        }
    }
    let w_new: Vec<f64> = w.data().iter().zip(&delta).map(|(x, d)| x + d).collect();
    let rhs = conv(&w_new, &cols);
    let num: f64 = lhs.iter().zip(&rhs).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = lhs.iter().map(|x| x * x).sum::<f64>().sqrt();
    if den == 0.0 {
        return Ok(Transplant::Inconclusive { support, total });
    }
    Ok(Transplant::Fit(TransplantFit {
        residual: num / den,
        weight_noise: Tensor::new(ws.to_vec(), noise)?,
        mean_activation_noise: noise_sum / support as f64,
        support,
    }))
}
