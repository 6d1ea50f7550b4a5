//! The multi-branch network and its single-body sibling used by the
//! joint-training baselines.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, LayerShape};
use super::plan::{BranchId, BranchPlan, SelectionMap};
use crate::engine::{BatchStats, Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::quant::{init_clip_bounds, QuantSpec, Role, RoundMode, BRANCH_WEIGHT_BITS};
use crate::tensor::Tensor;

/// How body weights are quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// Every branch weight is a 2-bit code, whatever the active width.
    FixedTwoBit,
    /// A single body whose weights follow the active width.
    Switchable { round: RoundMode },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN; parameters are differentiable leaves.
    Train,
    /// Running statistics in BN; parameters enter as constants.
    Eval,
}

#[derive(Clone, Debug)]
pub struct BnBank {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ClipPair {
    pub l: ParamId,
    pub u: ParamId,
    /// Activation bounds are set from the first batch they see.
    pub initialized: bool,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub shape: LayerShape,
    pub weight: ParamId,
    /// Weight clip bounds, keyed by bit-width. A fixed 2-bit branch has a
    /// single entry under key 2.
    pub weight_clip: BTreeMap<u8, ClipPair>,
    pub act_clip: BTreeMap<u8, ClipPair>,
    pub bn: BTreeMap<u8, BnBank>,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub id: BranchId,
    /// Number of leading stem channels this branch reads.
    pub input_channels: usize,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub enum Layout {
    Branches { plan: BranchPlan, map: SelectionMap },
    Single { candidates: Vec<u8> },
}

/// Where a batch-norm update goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnSlot {
    Stem,
    Body { branch: usize, layer: usize, bits: u8 },
}

/// State changes produced by a forward pass, applied explicitly with
/// [`MultiQuantModel::apply_updates`]. Evaluation drops them.
#[derive(Clone, Debug, Default)]
pub struct ForwardRecord {
    pub bn: Vec<(BnSlot, BatchStats)>,
    /// `(branch, layer, bits, l, u)` for activation bounds set this pass.
    pub act_init: Vec<(usize, usize, u8, f64, f64)>,
    /// Weight bit-width of every quantized conv evaluated, in order.
    pub weight_bits: Vec<u8>,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Sum of the selected branch outputs, the classifier input.
    pub features: Var,
    pub record: ForwardRecord,
}

#[derive(Clone, Debug)]
pub struct MultiQuantModel {
    arch: ArchSpec,
    layout: Layout,
    scheme: WeightScheme,
    store: ParamStore,
    stem_weight: ParamId,
    stem_bn: BnBank,
    fc_weight: ParamId,
    fc_bias: ParamId,
    branches: Vec<Branch>,
    active: u8,
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("sized")
}

fn bn_bank(store: &mut ParamStore, name: &str, c: usize) -> BnBank {
    BnBank {
        gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0), ParamGroup::Weight),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamGroup::Weight),
        running_mean: vec![0.0; c],
        running_var: vec![1.0; c],
    }
}

fn clip_pair(store: &mut ParamStore, name: &str, l: f64, u: f64, initialized: bool) -> ClipPair {
    ClipPair {
        l: store.add(format!("{name}.l"), Tensor::scalar(l), ParamGroup::Quantizer),
        u: store.add(format!("{name}.u"), Tensor::scalar(u), ParamGroup::Quantizer),
        initialized,
    }
}

impl MultiQuantModel {
    /// One 2-bit body copy per branch of `plan`, a shared stem and head.
    pub fn build(arch: &ArchSpec, plan: &BranchPlan, map: &SelectionMap, seed: u64) -> Result<Self> {
        let branches: Vec<(BranchId, Vec<u8>)> = plan
            .branches()
            .into_iter()
            .map(|id| {
                let bits = map.iter().filter(|(_, s)| s.contains(&id)).map(|(b, _)| b).collect();
                (id, bits)
            })
            .collect();
        Self::assemble(
            arch,
            Layout::Branches {
                plan: plan.clone(),
                map: map.clone(),
            },
            WeightScheme::FixedTwoBit,
            branches,
            seed,
        )
    }

    /// Single full-width body whose weight and activation quantizers switch
    /// with the active width.
    pub fn single_body(arch: &ArchSpec, candidates: &[u8], round: RoundMode, seed: u64) -> Result<Self> {
        let candidates = super::plan::normalize_bits(candidates)?;
        Self::assemble(
            arch,
            Layout::Single {
                candidates: candidates.clone(),
            },
            WeightScheme::Switchable { round },
            vec![(BranchId::Full(1), candidates)],
            seed,
        )
    }

    fn assemble(
        arch: &ArchSpec,
        layout: Layout,
        scheme: WeightScheme,
        branches: Vec<(BranchId, Vec<u8>)>,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &arch.stem;
        let stem_weight = store.add(
            "stem.weight",
            kaiming(
                &mut rng,
                &[s.out_channels, arch.in_channels, s.kernel, s.kernel],
                arch.in_channels * s.kernel * s.kernel,
            ),
            ParamGroup::Weight,
        );
        let stem_bn = bn_bank(&mut store, "stem.bn", s.out_channels);
        let mut built = Vec::with_capacity(branches.len());
        for (id, bits) in branches {
            let width = if id == BranchId::Half { 0.5 } else { 1.0 };
            let layers = arch.body_layers(width)?;
            let mut blocks = Vec::with_capacity(layers.len());
            for (li, shape) in layers.iter().enumerate() {
                let name = format!("branch{id}.layer{li}");
                let k = shape.spec.kernel;
                let w = kaiming(
                    &mut rng,
                    &[shape.out_channels, shape.in_channels, k, k],
                    shape.in_channels * k * k,
                );
                let (wl, wu) = init_clip_bounds(w.data(), Role::Weight);
                let weight = store.add(format!("{name}.weight"), w, ParamGroup::Weight);
                let weight_bits: Vec<u8> = match scheme {
                    WeightScheme::FixedTwoBit => vec![BRANCH_WEIGHT_BITS],
                    WeightScheme::Switchable { .. } => bits.clone(),
                };
                let weight_clip = weight_bits
                    .iter()
                    .map(|&b| (b, clip_pair(&mut store, &format!("{name}.wq{b}"), wl, wu, true)))
                    .collect();
                let act_clip = bits
                    .iter()
                    .map(|&b| (b, clip_pair(&mut store, &format!("{name}.aq{b}"), 0.0, 1.0, false)))
                    .collect();
                let bn = bits
                    .iter()
                    .map(|&b| (b, bn_bank(&mut store, &format!("{name}.bn{b}"), shape.out_channels)))
                    .collect();
                blocks.push(Block {
                    shape: *shape,
                    weight,
                    weight_clip,
                    act_clip,
                    bn,
                });
            }
            built.push(Branch {
                id,
                input_channels: layers[0].in_channels,
                blocks,
            });
        }
        let feat = arch.feature_len()?;
        let fc_weight = store.add(
            "fc.weight",
            kaiming(&mut rng, &[arch.classes, feat], 2 * feat),
            ParamGroup::Weight,
        );
        let fc_bias = store.add("fc.bias", Tensor::zeros(&[arch.classes]), ParamGroup::Weight);
        let active = *Self::candidates_of(&layout).last().expect("nonempty");
        Ok(MultiQuantModel {
            arch: arch.clone(),
            layout,
            scheme,
            store,
            stem_weight,
            stem_bn,
            fc_weight,
            fc_bias,
            branches: built,
            active,
        })
    }

    fn candidates_of(layout: &Layout) -> &[u8] {
        match layout {
            Layout::Branches { plan, .. } => plan.candidates(),
            Layout::Single { candidates } => candidates,
        }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    pub fn candidates(&self) -> &[u8] {
        Self::candidates_of(&self.layout)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn stem_weight(&self) -> ParamId {
        self.stem_weight
    }

    pub fn stem_bn(&self) -> &BnBank {
        &self.stem_bn
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.fc_weight, self.fc_bias)
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut ParamStore, &mut BnBank, &mut Vec<Branch>) {
        (&mut self.store, &mut self.stem_bn, &mut self.branches)
    }

    pub fn active_bits(&self) -> u8 {
        self.active
    }

    /// Makes `b` the active width. Only the selection, activation widths,
    /// BN banks and activation clip bounds depend on it.
    pub fn set_bitwidth(&mut self, b: u8) -> Result<()> {
        if !self.candidates().contains(&b) {
            return Err(Error::NotACandidate(b));
        }
        self.active = b;
        Ok(())
    }

    /// Indices into [`branches`](Self::branches) selected for `b`, in order.
    pub fn selected(&self, b: u8) -> Result<Vec<usize>> {
        match &self.layout {
            Layout::Branches { map, .. } => {
                let set = map.get(b)?;
                Ok((0..self.branches.len())
                    .filter(|&i| set.contains(&self.branches[i].id))
                    .collect())
            }
            Layout::Single { candidates } => {
                if candidates.contains(&b) {
                    Ok(vec![0])
                } else {
                    Err(Error::NotACandidate(b))
                }
            }
        }
    }

    /// Weight quantizer of the body at active width `b`.
    pub fn weight_spec(&self, b: u8) -> QuantSpec {
        match self.scheme {
            WeightScheme::FixedTwoBit => QuantSpec::weight(BRANCH_WEIGHT_BITS),
            WeightScheme::Switchable { round } => QuantSpec {
                bits: b,
                role: Role::Weight,
                round,
            },
        }
    }

    fn bind(&self, g: &mut Graph, id: ParamId, mode: Mode) -> Var {
        match mode {
            Mode::Train => g.param(id, self.store.value(id)),
            Mode::Eval => g.input(self.store.value(id).clone()),
        }
    }

    fn batch_norm(
        &self,
        g: &mut Graph,
        x: Var,
        bank: &BnBank,
        mode: Mode,
        slot: BnSlot,
        rec: &mut ForwardRecord,
    ) -> Result<Var> {
        let gamma = self.bind(g, bank.gamma, mode);
        let beta = self.bind(g, bank.beta, mode);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.arch.bn_eps)?;
                rec.bn.push((slot, stats));
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(x, gamma, beta, &bank.running_mean, &bank.running_var, self.arch.bn_eps),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let a = &self.arch;
        if s.len() != 4 || s[1] != a.in_channels || s[2] != a.height || s[3] != a.width || s[0] == 0 {
            return Err(Error::Shape {
                node: 0,
                op: "input",
                detail: format!("expected [N, {}, {}, {}], got {s:?}", a.in_channels, a.height, a.width),
            });
        }
        Ok(())
    }

    /// Full-precision Conv₁ + BN + relu (+ pool).
    pub fn forward_stem(&self, g: &mut Graph, x: Var, mode: Mode, rec: &mut ForwardRecord) -> Result<Var> {
        let w = self.bind(g, self.stem_weight, mode);
        let y = g.conv2d(x, w, 1, self.arch.stem.padding)?;
        let y = self.batch_norm(g, y, &self.stem_bn, mode, BnSlot::Stem, rec)?;
        let y = g.relu(y);
        if self.arch.stem.pool {
            g.max_pool2(y)
        } else {
            Ok(y)
        }
    }

    /// One branch at width `b`, returning its flattened output `[N, F]`.
    pub fn forward_branch(
        &self,
        g: &mut Graph,
        stem: Var,
        branch: usize,
        b: u8,
        mode: Mode,
        rec: &mut ForwardRecord,
    ) -> Result<Var> {
        let br = &self.branches[branch];
        let stem_channels = g.shape(stem)[1];
        let mut h = if br.input_channels == stem_channels {
            stem
        } else {
            g.slice_channels(stem, 0, br.input_channels)?
        };
        let wspec = self.weight_spec(b);
        for (li, block) in br.blocks.iter().enumerate() {
            let label = format!("branch {} layer {li}", br.id);
            let aq = block.act_clip.get(&b).ok_or(Error::NotACandidate(b))?;
            let (la, ua) = if aq.initialized {
                (self.bind(g, aq.l, mode), self.bind(g, aq.u, mode))
            } else {
                let (l0, u0) = init_clip_bounds(g.value(h).data(), Role::Activation);
                rec.act_init.push((branch, li, b, l0, u0));
                let (lt, ut) = (Tensor::scalar(l0), Tensor::scalar(u0));
                match mode {
                    Mode::Train => (g.param(aq.l, &lt), g.param(aq.u, &ut)),
                    Mode::Eval => (g.input(lt), g.input(ut)),
                }
            };
            let a = g.fake_quantize(h, la, ua, QuantSpec::activation(b), &label)?;
            let wq = block
                .weight_clip
                .get(&wspec.bits)
                .ok_or(Error::NotACandidate(wspec.bits))?;
            let w = self.bind(g, block.weight, mode);
            let (lw, uw) = (self.bind(g, wq.l, mode), self.bind(g, wq.u, mode));
            let w = g.fake_quantize(w, lw, uw, wspec, &label)?;
            rec.weight_bits.push(wspec.bits);
            let y = g.conv2d(a, w, 1, block.shape.spec.padding)?;
            let bank = block.bn.get(&b).ok_or(Error::NotACandidate(b))?;
            let y = self.batch_norm(
                g,
                y,
                bank,
                mode,
                BnSlot::Body {
                    branch,
                    layer: li,
                    bits: b,
                },
                rec,
            )?;
            let y = g.relu(y);
            h = if block.shape.spec.pool { g.max_pool2(y)? } else { y };
        }
        g.flatten(h)
    }

    pub fn forward_head(&self, g: &mut Graph, features: Var, mode: Mode) -> Result<Var> {
        let w = self.bind(g, self.fc_weight, mode);
        let b = self.bind(g, self.fc_bias, mode);
        g.linear(features, w, Some(b))
    }

    /// `FC(Σ_{j ∈ P(b)} branch_j(Conv₁(x)))` at the active width. The sum
    /// runs in branch-index order.
    pub fn forward_composed(&self, g: &mut Graph, x: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        self.forward_at(g, x, self.active, mode)
    }

    /// [`forward_composed`](Self::forward_composed) at an explicit width.
    pub fn forward_at(&self, g: &mut Graph, x: &Tensor, b: u8, mode: Mode) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let mut rec = ForwardRecord::default();
        let xv = g.input(x.clone());
        let stem = self.forward_stem(g, xv, mode, &mut rec)?;
        let mut feat: Option<Var> = None;
        for j in self.selected(b)? {
            let f = self.forward_branch(g, stem, j, b, mode, &mut rec)?;
            feat = Some(match feat {
                None => f,
                Some(acc) => g.add(acc, f)?,
            });
        }
        let features = feat.ok_or(Error::NotACandidate(b))?;
        let logits = self.forward_head(g, features, mode)?;
        Ok(ForwardOutput {
            logits,
            features,
            record: rec,
        })
    }

    /// Eval-mode logits at width `b` without touching model state.
    pub fn predict(&self, x: &Tensor, b: u8) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward_at(&mut g, x, b, Mode::Eval)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn apply_updates(&mut self, rec: &ForwardRecord) {
        let m = self.arch.bn_momentum;
        for (slot, stats) in &rec.bn {
            let bank = match *slot {
                BnSlot::Stem => &mut self.stem_bn,
                BnSlot::Body { branch, layer, bits } => self.branches[branch].blocks[layer]
                    .bn
                    .get_mut(&bits)
                    .expect("slot recorded from an existing bank"),
            };
            let n = stats.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for c in 0..bank.running_mean.len() {
                bank.running_mean[c] = (1.0 - m) * bank.running_mean[c] + m * stats.mean[c];
                bank.running_var[c] = (1.0 - m) * bank.running_var[c] + m * stats.var[c] * unbias;
            }
        }
        for &(branch, layer, bits, l, u) in &rec.act_init {
            let pair = self.branches[branch].blocks[layer]
                .act_clip
                .get_mut(&bits)
                .expect("recorded from an existing quantizer");
            if !pair.initialized {
                self.store.set_scalar(pair.l, l);
                self.store.set_scalar(pair.u, u);
                pair.initialized = true;
            }
        }
    }

    pub fn bank_mut(&mut self, branch: usize, layer: usize, bits: u8) -> Option<&mut BnBank> {
        self.branches.get_mut(branch)?.blocks.get_mut(layer)?.bn.get_mut(&bits)
    }

    /// Body parameter count of one branch (weights only).
    pub fn branch_weight_count(&self, branch: usize) -> usize {
        self.branches[branch]
            .blocks
            .iter()
            .map(|b| b.shape.weight_count())
            .sum()
    }
}
