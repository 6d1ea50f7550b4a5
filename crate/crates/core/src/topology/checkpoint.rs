//! Versioned little-endian checkpoint.
//!
//! Layout: magic `MQCK`, version (u16), architecture hash (u64), weight
//! scheme (u8), candidate bits, strategy and selection map, active width,
//! the architecture as JSON (u32 length + bytes). Then, per branch and
//! layer: the weight section, activation clip bounds and BN banks. Stem and
//! classifier follow as f64 arrays.
//!
//! Branch weights are written as a quantizer blob (`l`, `u`, `b`, packed
//! 2-bit codes). On load the latent weights are set to the centre of each
//! code's interval, which reproduces the stored codes exactly.

use std::collections::BTreeMap;
use std::path::Path;

use super::arch::ArchSpec;
use super::model::{BnBank, Layout, MultiQuantModel, WeightScheme};
use super::plan::{build_branch_plan, restore_selection_map, BranchId, Strategy};
use crate::engine::ParamStore;
use crate::error::{Error, Result};
use crate::quant::{decode_blob, encode_blob, QuantSpec, QuantizerParams, RoundMode};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MQCK";
pub const VERSION: u16 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(self.f64s(1)?[0])
    }
}

fn scheme_tag(s: WeightScheme) -> u8 {
    match s {
        WeightScheme::FixedTwoBit => 0,
        WeightScheme::Switchable {
            round: RoundMode::Nearest,
        } => 1,
        WeightScheme::Switchable {
            round: RoundMode::Floor,
        } => 2,
    }
}

fn strategy_tag(s: Option<Strategy>) -> u8 {
    match s {
        Some(Strategy::Serial) => 0,
        Some(Strategy::Amortized) => 1,
        Some(Strategy::Explicit) => 2,
        None => 255,
    }
}

fn branch_tag(id: BranchId) -> u8 {
    match id {
        BranchId::Half => 0,
        BranchId::Full(i) => i as u8,
    }
}

fn write_bank(w: &mut Writer, store: &ParamStore, bank: &BnBank) {
    w.f64s(store.value(bank.gamma).data());
    w.f64s(store.value(bank.beta).data());
    w.f64s(&bank.running_mean);
    w.f64s(&bank.running_var);
}

fn read_bank(r: &mut Reader<'_>, store: &mut ParamStore, bank: &mut BnBank) -> Result<()> {
    let c = bank.running_mean.len();
    let gamma = r.f64s(c)?;
    let beta = r.f64s(c)?;
    store.get_mut(bank.gamma).value = Tensor::new(vec![c], gamma)?;
    store.get_mut(bank.beta).value = Tensor::new(vec![c], beta)?;
    bank.running_mean = r.f64s(c)?;
    bank.running_var = r.f64s(c)?;
    Ok(())
}

fn set_values(store: &mut ParamStore, id: crate::engine::ParamId, data: Vec<f64>) -> Result<()> {
    let shape = store.value(id).shape().to_vec();
    store.get_mut(id).value = Tensor::new(shape, data)?;
    Ok(())
}

pub fn to_bytes(model: &MultiQuantModel) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u64(model.arch().hash());
    w.u8(scheme_tag(model.scheme()));
    let bits = model.candidates();
    w.u8(bits.len() as u8);
    w.bytes(bits);
    match model.layout() {
        Layout::Branches { map, .. } => {
            w.u8(strategy_tag(Some(map.strategy())));
            for (_, set) in map.iter() {
                w.u8(set.len() as u8);
                for &id in set {
                    w.u8(branch_tag(id));
                }
            }
        }
        Layout::Single { .. } => w.u8(strategy_tag(None)),
    }
    w.u8(model.active_bits());
    let arch = serde_json::to_vec(model.arch())?;
    w.u32(arch.len() as u32);
    w.bytes(&arch);

    let store = model.store();
    for branch in model.branches() {
        for block in &branch.blocks {
            let latent = store.value(block.weight);
            match model.scheme() {
                WeightScheme::FixedTwoBit => {
                    let (_, pair) = block.weight_clip.iter().next().expect("one weight quantizer");
                    let q = QuantizerParams::new(
                        store.scalar(pair.l),
                        store.scalar(pair.u),
                        QuantSpec::weight(crate::quant::BRANCH_WEIGHT_BITS),
                    )?;
                    let codes = q.quantize(&q.normalize(latent));
                    w.bytes(&encode_blob(&q, &codes.values));
                }
                WeightScheme::Switchable { .. } => {
                    w.f64s(latent.data());
                    for pair in block.weight_clip.values() {
                        w.f64s(&[store.scalar(pair.l), store.scalar(pair.u)]);
                    }
                }
            }
            for pair in block.act_clip.values() {
                w.f64s(&[store.scalar(pair.l), store.scalar(pair.u)]);
                w.u8(pair.initialized as u8);
            }
            for bank in block.bn.values() {
                write_bank(&mut w, store, bank);
            }
        }
    }
    w.f64s(store.value(model.stem_weight()).data());
    write_bank(&mut w, store, model.stem_bn());
    let (fw, fb) = model.head();
    w.f64s(store.value(fw).data());
    w.f64s(store.value(fb).data());
    Ok(w.0)
}

pub fn from_bytes(buf: &[u8]) -> Result<MultiQuantModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    let scheme = match r.u8()? {
        0 => WeightScheme::FixedTwoBit,
        1 => WeightScheme::Switchable {
            round: RoundMode::Nearest,
        },
        2 => WeightScheme::Switchable {
            round: RoundMode::Floor,
        },
        t => return Err(Error::Checkpoint(format!("unknown weight scheme {t}"))),
    };
    let n_bits = r.u8()? as usize;
    let bits = r.take(n_bits)?.to_vec();
    let strategy = match r.u8()? {
        0 => Some(Strategy::Serial),
        1 => Some(Strategy::Amortized),
        2 => Some(Strategy::Explicit),
        255 => None,
        t => return Err(Error::Checkpoint(format!("unknown strategy tag {t}"))),
    };
    let mut sets = BTreeMap::new();
    if strategy.is_some() {
        for &b in &bits {
            let n = r.u8()? as usize;
            let ids = r
                .take(n)?
                .iter()
                .map(|&t| {
                    if t == 0 {
                        BranchId::Half
                    } else {
                        BranchId::Full(t as usize)
                    }
                })
                .collect();
            sets.insert(b, ids);
        }
    }
    let active = r.u8()?;
    let arch_len = r.u32()? as usize;
    let arch: ArchSpec = serde_json::from_slice(r.take(arch_len)?)?;
    if arch.hash() != hash {
        return Err(Error::Checkpoint("architecture hash mismatch".into()));
    }

    let mut model = match (scheme, strategy) {
        (WeightScheme::FixedTwoBit, Some(st)) => {
            let plan = build_branch_plan(&bits)?;
            let map = restore_selection_map(&plan, st, sets)?;
            MultiQuantModel::build(&arch, &plan, &map, 0)?
        }
        (WeightScheme::Switchable { round }, None) => MultiQuantModel::single_body(&arch, &bits, round, 0)?,
        _ => return Err(Error::Checkpoint("weight scheme and layout disagree".into())),
    };
    model.set_bitwidth(active)?;

    let (store, _, branches) = model.parts_mut();
    for branch in branches.iter_mut() {
        for block in &mut branch.blocks {
            let n = block.shape.weight_count();
            match scheme {
                WeightScheme::FixedTwoBit => {
                    let ((l, u, b, codes), used) = decode_blob(&r.buf[r.pos..], n)?;
                    r.pos += used;
                    let q = QuantizerParams::new(l, u, QuantSpec::weight(b))?;
                    let latent = codes
                        .iter()
                        .map(|&c| q.reconstruct(q.spec.dequantize_code(c as f64)))
                        .collect();
                    set_values(store, block.weight, latent)?;
                    let pair = block.weight_clip.values().next().expect("one weight quantizer");
                    store.set_scalar(pair.l, l);
                    store.set_scalar(pair.u, u);
                }
                WeightScheme::Switchable { .. } => {
                    set_values(store, block.weight, r.f64s(n)?)?;
                    for pair in block.weight_clip.values() {
                        store.set_scalar(pair.l, r.f64()?);
                        store.set_scalar(pair.u, r.f64()?);
                    }
                }
            }
            for pair in block.act_clip.values_mut() {
                store.set_scalar(pair.l, r.f64()?);
                store.set_scalar(pair.u, r.f64()?);
                pair.initialized = r.u8()? != 0;
            }
            for bank in block.bn.values_mut() {
                read_bank(&mut r, store, bank)?;
            }
        }
    }
    let stem_w = model.stem_weight();
    let (fw, fb) = model.head();
    let (store, stem_bn, _) = model.parts_mut();
    let n = store.value(stem_w).numel();
    set_values(store, stem_w, r.f64s(n)?)?;
    read_bank(&mut r, store, stem_bn)?;
    let n = store.value(fw).numel();
    set_values(store, fw, r.f64s(n)?)?;
    let n = store.value(fb).numel();
    set_values(store, fb, r.f64s(n)?)?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &MultiQuantModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MultiQuantModel> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    from_bytes(&std::fs::read(path)?)
}
