use serde::{Deserialize, Serialize};

use crate::engine::kernels::ConvGeom;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// 2x2 max pooling after BN and relu.
    pub pool: bool,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, padding: usize, pool: bool) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            padding,
            pool,
        }
    }
}

/// Full-precision stem conv, a stack of quantized conv blocks (the body),
/// and a full-precision linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub stem: ConvSpec,
    pub body: Vec<ConvSpec>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

/// Geometry of one body layer as instantiated in a particular branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub spec: ConvSpec,
}

impl LayerShape {
    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.spec.kernel * self.spec.kernel
    }

    pub fn geom(&self, batch: usize) -> ConvGeom {
        ConvGeom {
            batch,
            in_channels: self.in_channels,
            height: self.height,
            width: self.width,
            out_channels: self.out_channels,
            kernel: self.spec.kernel,
            stride: 1,
            padding: self.spec.padding,
        }
    }
}

impl ArchSpec {
    /// 28x28 grayscale, stem 1->16, body 16->32->32, each block pooled.
    pub fn desk() -> Self {
        ArchSpec {
            in_channels: 1,
            height: 28,
            width: 28,
            classes: 10,
            stem: ConvSpec::new(16, 3, 1, true),
            body: vec![ConvSpec::new(32, 3, 1, true), ConvSpec::new(32, 3, 1, true)],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Same layout as [`ArchSpec::desk`] at half the channels.
    pub fn tiny() -> Self {
        ArchSpec {
            stem: ConvSpec::new(8, 3, 1, true),
            body: vec![ConvSpec::new(16, 3, 1, true), ConvSpec::new(16, 3, 1, true)],
            ..Self::desk()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Arch(format!("unknown architecture preset {name:?}"))),
        }
    }

    fn conv_out(spec: &ConvSpec, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * spec.padding < spec.kernel || w + 2 * spec.padding < spec.kernel {
            return Err(Error::Arch(format!(
                "kernel {} does not fit a {h}x{w} input with padding {}",
                spec.kernel, spec.padding
            )));
        }
        let (mut h, mut w) = (
            h + 2 * spec.padding - spec.kernel + 1,
            w + 2 * spec.padding - spec.kernel + 1,
        );
        if spec.pool {
            if h < 2 || w < 2 {
                return Err(Error::Arch(format!("cannot pool a {h}x{w} map")));
            }
            h /= 2;
            w /= 2;
        }
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.body.is_empty() {
            return Err(Error::Arch("body has no conv layers".into()));
        }
        if self.in_channels == 0 || self.classes < 2 || self.height == 0 || self.width == 0 {
            return Err(Error::Arch(
                "input channels, size and at least two classes required".into(),
            ));
        }
        for s in std::iter::once(&self.stem).chain(&self.body) {
            if s.out_channels == 0 || s.kernel == 0 {
                return Err(Error::Arch("conv layers need channels and a kernel".into()));
            }
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Arch("bn-eps must be positive and bn-momentum in [0, 1]".into()));
        }
        self.stem_output()?;
        self.body_layers(1.0)?;
        Ok(())
    }

    /// `(channels, height, width)` after the stem.
    pub fn stem_output(&self) -> Result<(usize, usize, usize)> {
        let (h, w) = Self::conv_out(&self.stem, self.height, self.width)?;
        Ok((self.stem.out_channels, h, w))
    }

    pub fn stem_weight_count(&self) -> usize {
        self.stem.out_channels * self.in_channels * self.stem.kernel * self.stem.kernel
    }

    pub fn stem_macs(&self) -> Result<u64> {
        let unpooled = ConvSpec {
            pool: false,
            ..self.stem
        };
        let (h, w) = Self::conv_out(&unpooled, self.height, self.width)?;
        Ok((self.stem_weight_count() * h * w) as u64)
    }

    /// Channels and spatial sizes of every body layer for a branch of the
    /// given width factor (1.0 full, 0.5 half). Half branches read the
    /// first `ceil(C/2)` stem channels and halve every internal width
    /// (floor, at least 1) except the last layer's output.
    pub fn body_layers(&self, width: f64) -> Result<Vec<LayerShape>> {
        let (c0, mut h, mut w) = self.stem_output()?;
        let half = width < 1.0;
        let mut in_ch = if half { c0.div_ceil(2) } else { c0 };
        let last = self.body.len() - 1;
        let mut out = Vec::with_capacity(self.body.len());
        for (i, spec) in self.body.iter().enumerate() {
            let oc = if half && i != last {
                (spec.out_channels / 2).max(1)
            } else {
                spec.out_channels
            };
            out.push(LayerShape {
                in_channels: in_ch,
                out_channels: oc,
                height: h,
                width: w,
                spec: *spec,
            });
            (h, w) = Self::conv_out(spec, h, w)?;
            in_ch = oc;
        }
        Ok(out)
    }

    /// Flattened length of a branch output, identical for every branch.
    pub fn feature_len(&self) -> Result<usize> {
        let layers = self.body_layers(1.0)?;
        let last = layers.last().expect("validated nonempty");
        let (h, w) = Self::conv_out(&last.spec, last.height, last.width)?;
        Ok(last.out_channels * h * w)
    }

    /// Multiply-accumulates of one body copy for one sample.
    pub fn body_macs(&self, width: f64) -> Result<u64> {
        Ok(self.body_layers(width)?.iter().map(|l| l.geom(1).macs()).sum())
    }

    pub fn body_weight_count(&self, width: f64) -> Result<usize> {
        Ok(self.body_layers(width)?.iter().map(LayerShape::weight_count).sum())
    }

    /// FNV-1a over the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("arch spec serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_branch_channels() {
        let mut a = ArchSpec::desk();
        a.body = vec![ConvSpec::new(16, 3, 1, true), ConvSpec::new(32, 3, 1, true)];
        let full: Vec<_> = a.body_layers(1.0).unwrap().iter().map(|l| l.out_channels).collect();
        let half: Vec<_> = a.body_layers(0.5).unwrap().iter().map(|l| l.out_channels).collect();
        assert_eq!(full, vec![16, 32]);
        assert_eq!(half, vec![8, 32]);
        assert_eq!(a.body_layers(0.5).unwrap()[0].in_channels, 8);
    }

    #[test]
    fn desk_geometry() {
        let a = ArchSpec::desk();
        a.validate().unwrap();
        assert_eq!(a.stem_output().unwrap(), (16, 14, 14));
        assert_eq!(a.feature_len().unwrap(), 32 * 3 * 3);
        assert_eq!(
            a.body_macs(1.0).unwrap(),
            (14 * 14 * 32 * 16 * 9 + 7 * 7 * 32 * 32 * 9) as u64
        );
        assert_eq!(a.hash(), ArchSpec::desk().hash());
        assert_ne!(a.hash(), ArchSpec::tiny().hash());
    }

    #[test]
    fn empty_body_rejected() {
        let mut a = ArchSpec::desk();
        a.body.clear();
        assert!(matches!(a.validate(), Err(Error::Arch(_))));
    }
}
