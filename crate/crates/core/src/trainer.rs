//! Joint training over all candidate widths with in-place distillation,
//! plus the two single-body baselines.
//!
//! One step visits the candidates from the largest to the smallest. The
//! largest width is trained on cross entropy alone and its logits, detached,
//! are the soft targets for every smaller width. All per-width losses are
//! summed and back-propagated once. Weights (conv, linear, BN affine) are
//! updated by SGD with momentum, clipping bounds by Adam.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{AdamConfig, Graph, OptimizerState, ParamGroup, ParamId, SgdConfig, Var};
use crate::error::{Error, Result};
use crate::quant::{QuantSpec, QuantizerParams, Role, RoundMode};
use crate::tensor::Tensor;
use crate::topology::{
    build_branch_plan, build_selection_map, explicit_selection_map, parse_explicit_map, ArchSpec, ForwardRecord, Mode,
    MultiQuantModel, Strategy,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    #[serde(rename = "multiquant")]
    MultiQuant,
    AnyPrecision,
    #[serde(rename = "adabit")]
    AdaBit,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MultiQuant => "multiquant",
            Method::AnyPrecision => "any-precision",
            Method::AdaBit => "adabit",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiquant" => Ok(Method::MultiQuant),
            "any-precision" => Ok(Method::AnyPrecision),
            "adabit" => Ok(Method::AdaBit),
            _ => Err(Error::Config(vec![format!(
                "unknown method {s:?} (multiquant, any-precision, adabit)"
            )])),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// `lr * 0.5 * (1 + cos(pi * t / T))` per step.
    Cosine,
    /// `lr * 0.1` after half the epochs, `lr * 0.01` after three quarters.
    #[default]
    Step,
}

impl Schedule {
    /// Multiplier on the weight learning rate.
    pub fn scale(self, epoch: usize, step: usize, epochs: usize, total_steps: usize) -> f64 {
        match self {
            Schedule::Cosine => {
                if total_steps == 0 {
                    1.0
                } else {
                    0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
                }
            }
            Schedule::Step => {
                if 4 * epoch >= 3 * epochs {
                    0.01
                } else if 2 * epoch >= epochs {
                    0.1
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub bits: Vec<u8>,
    pub strategy: Strategy,
    /// Selection sets when `strategy` is explicit, e.g. `2:1;4:2,3`.
    #[serde(default)]
    pub explicit_map: Option<String>,
    pub distill: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::MultiQuant,
            bits: vec![2, 4, 8],
            strategy: Strategy::Amortized,
            explicit_map: None,
            distill: true,
            epochs: 10,
            batch_size: 64,
            sgd: SgdConfig {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            adam: AdamConfig::default(),
            schedule: Schedule::Step,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(e) = build_branch_plan(&self.bits) {
            p.push(e.to_string());
        }
        if self.batch_size == 0 {
            p.push("batch-size must be positive".into());
        }
        if !(self.sgd.lr >= 0.0) || !(0.0..1.0).contains(&self.sgd.momentum) || !(self.sgd.weight_decay >= 0.0) {
            p.push("sgd needs lr >= 0, momentum in [0, 1) and weight-decay >= 0".into());
        }
        if !(self.adam.lr >= 0.0) || !(self.adam.eps > 0.0) {
            p.push("adam needs lr >= 0 and eps > 0".into());
        }
        match (self.strategy, &self.explicit_map) {
            (Strategy::Explicit, None) => p.push("strategy explicit requires explicit-map".into()),
            (Strategy::Explicit, Some(_)) | (_, None) => {}
            (_, Some(_)) => p.push("explicit-map is only used with strategy explicit".into()),
        }
        if self.method != Method::MultiQuant && self.strategy == Strategy::Explicit {
            p.push(format!("{} has a single body and no selection map", self.method.name()));
        }
        if p.is_empty() && self.method == Method::MultiQuant {
            if let Err(e) = self.selection() {
                p.push(e.to_string());
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    fn selection(&self) -> Result<(crate::topology::BranchPlan, crate::topology::SelectionMap)> {
        let plan = build_branch_plan(&self.bits)?;
        let map = match (self.strategy, &self.explicit_map) {
            (Strategy::Explicit, Some(s)) => explicit_selection_map(&plan, parse_explicit_map(s)?)?,
            (s, _) => build_selection_map(&plan, s)?,
        };
        Ok((plan, map))
    }

    /// Distillation applies to MultiQuant only; the baselines sum plain
    /// cross entropy.
    pub fn effective_distill(&self) -> bool {
        self.distill && self.method == Method::MultiQuant
    }
}

/// Model for `cfg.method`, initialized from `cfg.seed`.
pub fn build_model(arch: &ArchSpec, cfg: &TrainConfig) -> Result<MultiQuantModel> {
    cfg.validate()?;
    match cfg.method {
        Method::MultiQuant => {
            let (plan, map) = cfg.selection()?;
            MultiQuantModel::build(arch, &plan, &map, cfg.seed)
        }
        Method::AnyPrecision => MultiQuantModel::single_body(arch, &cfg.bits, RoundMode::Nearest, cfg.seed),
        Method::AdaBit => MultiQuantModel::single_body(arch, &cfg.bits, RoundMode::Floor, cfg.seed),
    }
}

#[derive(Clone, Debug)]
pub struct BitLoss {
    pub bits: u8,
    pub ce: f64,
    /// `None` for the teacher width and when distillation is off.
    pub kd: Option<f64>,
    pub logits: Var,
    pub ce_var: Var,
    pub kd_var: Option<Var>,
}

/// Per-width losses of one step, in visiting order (largest first).
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub per_bit: Vec<BitLoss>,
    pub total: Var,
    /// Detached logits of the largest width.
    pub teacher: Option<Var>,
    pub records: Vec<ForwardRecord>,
}

/// Builds every per-width loss of one batch into `g`. The active width of
/// the model is left at the smallest candidate.
pub fn loss_bundle(
    model: &mut MultiQuantModel,
    g: &mut Graph,
    x: &Tensor,
    y: &[usize],
    distill: bool,
) -> Result<LossBundle> {
    let mut bits = model.candidates().to_vec();
    if bits.is_empty() {
        return Err(Error::Bits("no candidates".into()));
    }
    bits.sort_unstable();
    let mut per_bit = Vec::with_capacity(bits.len());
    let mut records = Vec::with_capacity(bits.len());
    let mut teacher = None;
    let mut total: Option<Var> = None;
    for &b in bits.iter().rev() {
        model.set_bitwidth(b)?;
        let out = model.forward_composed(g, x, Mode::Train)?;
        let ce_var = g.softmax_cross_entropy(out.logits, y)?;
        let mut term = ce_var;
        let mut kd_var = None;
        match teacher {
            None => {
                if distill {
                    teacher = Some(g.detach(out.logits));
                }
            }
            Some(t) => {
                let kd = g.soft_cross_entropy(out.logits, t)?;
                term = g.add(ce_var, kd)?;
                kd_var = Some(kd);
            }
        }
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
        per_bit.push(BitLoss {
            bits: b,
            ce: g.value(ce_var).item(),
            kd: kd_var.map(|v| g.value(v).item()),
            logits: out.logits,
            ce_var,
            kd_var,
        });
        records.push(out.record);
    }
    Ok(LossBundle {
        per_bit,
        total: total.expect("at least one candidate"),
        teacher,
        records,
    })
}

/// SGD for the weight group, Adam for the quantizer group.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub weights: OptimizerState,
    pub quantizers: OptimizerState,
}

impl Optimizers {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizers {
            weights: OptimizerState::sgd(cfg.sgd),
            quantizers: OptimizerState::adam(cfg.adam),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// `(bits, ce, kd)` in visiting order.
    pub per_bit: Vec<(u8, f64, Option<f64>)>,
    pub total: f64,
    /// Weight quantizer widths used by the forwards of this step.
    pub weight_bits: BTreeSet<u8>,
}

/// One step of joint training. Nothing in the model changes when the loss
/// or any gradient is non-finite.
pub fn train_step(
    model: &mut MultiQuantModel,
    opt: &mut Optimizers,
    x: &Tensor,
    y: &[usize],
    distill: bool,
    lr_scale: f64,
) -> Result<StepMetrics> {
    let mut g = Graph::new();
    let bundle = loss_bundle(model, &mut g, x, y, distill)?;
    let total = g.value(bundle.total).item();
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: "training loss".into(),
        });
    }
    let grads = g.backward(bundle.total)?;
    let store = model.store_mut();
    store.zero_grad();
    store.accumulate(&g, &grads);
    if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.all_finite()) {
        return Err(Error::NonFinite {
            context: format!("gradient of {}", p.name),
        });
    }
    for rec in &bundle.records {
        model.apply_updates(rec);
    }
    // Parameters outside this step's graph (BN of unselected branches,
    // unused clip bounds) are left alone, weight decay included.
    let bound = g.bound_params();
    let store = model.store_mut();
    let (w, q): (Vec<ParamId>, Vec<ParamId>) = bound
        .into_iter()
        .partition(|&id| store.get(id).group == ParamGroup::Weight);
    opt.weights.sgd_momentum_step(store, &w, lr_scale)?;
    opt.quantizers.adam_step(store, &q, 1.0)?;
    Ok(StepMetrics {
        per_bit: bundle.per_bit.iter().map(|l| (l.bits, l.ce, l.kd)).collect(),
        total,
        weight_bits: bundle
            .records
            .iter()
            .flat_map(|r| r.weight_bits.iter().copied())
            .collect(),
    })
}

/// One row per (epoch, width).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Steps completed so far.
    pub step: usize,
    pub bit: u8,
    pub loss_ce: f64,
    pub loss_kd: Option<f64>,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    pub steps: usize,
    pub weight_bits_seen: BTreeSet<u8>,
    /// Set when training stopped on a non-finite loss. The model is left at
    /// the end of the last completed epoch.
    pub aborted: Option<String>,
}

/// Mini-batch order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Runs `cfg.epochs` epochs over `train`, evaluating every candidate on
/// `eval` after each epoch.
pub fn train(
    model: &mut MultiQuantModel,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let distill = cfg.effective_distill();
    let mut opt = Optimizers::new(cfg);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut report = TrainReport {
        history: Vec::new(),
        steps: 0,
        weight_bits_seen: BTreeSet::new(),
        aborted: None,
    };
    let mut bits = model.candidates().to_vec();
    bits.sort_unstable();
    let mut last_good = model.clone();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut sums: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); bits.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let scale = cfg.schedule.scale(epoch, report.steps, cfg.epochs, total_steps);
            let m = match train_step(model, &mut opt, &x, &y, distill, scale) {
                Ok(m) => m,
                Err(Error::NonFinite { context }) => {
                    log::warn!("epoch {epoch}: non-finite {context}, keeping the last completed epoch");
                    *model = last_good;
                    report.aborted = Some(context);
                    return Ok(report);
                }
                Err(e) => return Err(e),
            };
            report.steps += 1;
            report.weight_bits_seen.extend(&m.weight_bits);
            for (b, ce, kd) in m.per_bit {
                let i = bits.binary_search(&b).expect("candidate");
                sums[i].0 += ce;
                sums[i].1 += kd.unwrap_or(0.0);
                sums[i].2 += 1;
            }
        }
        if model.store().iter().any(|(_, p)| !p.value.all_finite()) {
            *model = last_good;
            report.aborted = Some(format!("parameters after epoch {epoch}"));
            return Ok(report);
        }
        for (i, &b) in bits.iter().enumerate() {
            let (ce, kd, n) = sums[i];
            let has_kd = distill && b != *bits.last().expect("nonempty");
            report.history.push(HistoryRow {
                epoch,
                step: report.steps,
                bit: b,
                loss_ce: ce / n as f64,
                loss_kd: has_kd.then(|| kd / n as f64),
                eval_acc: eval.map(|d| evaluate(model, d, b)).transpose()?,
            });
        }
        log::info!(
            "epoch {epoch}: {}",
            report.history[report.history.len() - bits.len()..]
                .iter()
                .map(|r| match r.eval_acc {
                    Some(a) => format!("{}b ce {:.4} acc {a:.4}", r.bit, r.loss_ce),
                    None => format!("{}b ce {:.4}", r.bit, r.loss_ce),
                })
                .collect::<Vec<_>>()
                .join(", ")
        );
        last_good = model.clone();
    }
    Ok(report)
}

pub const EVAL_BATCH: usize = 500;

/// Top-1 accuracy at width `b` with BN in running-statistics mode.
pub fn evaluate(model: &MultiQuantModel, data: &Dataset, b: u8) -> Result<f64> {
    if !model.candidates().contains(&b) {
        return Err(Error::NotACandidate(b));
    }
    if data.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let logits = model.predict(&x, b)?;
        let c = logits.shape()[1];
        for (row, &label) in logits.data().chunks(c).zip(&y) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean dequantized value under floor minus under nearest rounding, with
/// the clip interval set symmetrically to `max |w|`.
pub fn rounding_bias(w: &Tensor, bits: u8) -> Result<f64> {
    let r = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mean = |round| -> Result<f64> {
        let spec = QuantSpec::new(bits, Role::Weight, round)?;
        Ok(QuantizerParams::new(-r, r, spec)?.fake_quantize(w)?.mean())
    };
    Ok(mean(RoundMode::Floor)? - mean(RoundMode::Nearest)?)
}
