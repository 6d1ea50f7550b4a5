//! Eager reverse-mode tape.
//!
//! Every op computes its value when it is recorded, so the order in which
//! nodes are pushed is a topological order and `backward` is a single
//! reverse sweep. A graph is built per forward pass and dropped afterwards;
//! parameters live in a [`ParamStore`](super::ParamStore) and enter the
//! graph as leaves.

use std::collections::VecDeque;

use super::kernels::{self, ConvGeom, MatRef};
use super::param::ParamId;
use crate::error::{Error, Result};
use crate::quant::{normalize_value, QuantSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How fake-quantize nodes treat the rounding step in the forward pass.
#[derive(Clone, Debug, Default)]
pub enum RoundingPass {
    /// Real quantization.
    #[default]
    Exact,
    /// Rounding removed: the output is the clip-affine surrogate.
    Surrogate,
    /// Surrogate plus rounding residuals recorded at another point, one
    /// entry per fake-quantize node in recording order. At the recording
    /// point this reproduces the exact output; around it, the function is
    /// smooth and its derivative is what the straight-through estimator
    /// reports.
    Frozen(VecDeque<Vec<f64>>),
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    SoftCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        target: Vec<f64>,
    },
    FakeQuant {
        x: Var,
        l: Var,
        u: Var,
        spec: QuantSpec,
        gap: f64,
        lo: f64,
        hi: f64,
        /// Clip region per element: -1 below, 0 inside, 1 above.
        region: Vec<i8>,
        codes: Vec<u32>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Add { .. } => "elementwise-add",
            Op::Sum { .. } => "reduce-sum",
            Op::MaxPool2 { .. } => "max-pool2d",
            Op::SliceChannels { .. } => "slice-channels",
            Op::Reshape { .. } => "reshape",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Op::SoftCrossEntropy { .. } => "soft-cross-entropy",
            Op::FakeQuant { .. } => "fake-quantize",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics of a training-mode batch norm, for updating
/// running averages outside the graph.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    rounding: RoundingPass,
    residuals: Vec<Vec<f64>>,
}

/// Result of [`Graph::backward`]: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rounding(rounding: RoundingPass) -> Self {
        Graph {
            rounding,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Rounding residuals (`q - s*xn`) of every fake-quantize node, in
    /// recording order. Feed them to [`RoundingPass::Frozen`].
    pub fn rounding_residuals(&self) -> Vec<Vec<f64>> {
        self.residuals.clone()
    }

    /// Parameters bound into this graph, each once, in id order.
    pub fn bound_params(&self) -> Vec<ParamId> {
        let set: std::collections::BTreeSet<ParamId> = self.param_leaves().map(|(_, id)| id).collect();
        set.into_iter().collect()
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((Var(i), id)),
            _ => None,
        })
    }

    /// Discrete state of every piecewise op: relu masks, clip regions,
    /// quantization codes and pooling winners. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<i64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => sig.extend(self.nodes[x.0].value.data().iter().map(|&v| (v > 0.0) as i64)),
                Op::FakeQuant { region, codes, .. } => {
                    sig.extend(region.iter().map(|&r| r as i64));
                    sig.extend(codes.iter().map(|&c| c as i64));
                }
                Op::MaxPool2 { argmax, .. } => sig.extend(argmax.iter().map(|&a| a as i64)),
                _ => {}
            }
        }
        sig
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Binds a parameter value as a differentiable leaf.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(id), true)
    }

    /// Copy of `v` with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Input, false)
    }

    /// `x @ w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let id = self.next_id();
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(id, "linear", format!("x {xs:?} vs w {ws:?}")));
        }
        let (n, fan_in, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape(
                    id,
                    "linear",
                    format!("bias {:?} for {out} outputs", self.shape(b)),
                ));
            }
        }
        let mut y = vec![0.0; n * out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        gemm_into(
            MatRef::new(self.value(x).data(), n, fan_in),
            MatRef::new(self.value(w).data(), out, fan_in).t(),
            &mut y,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![n, out], y)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, k, k]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let id = self.next_id();
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape(id, "conv2d", format!("x {xs:?} vs w {ws:?}")));
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(Error::shape(
                id,
                "conv2d",
                format!("kernel {} larger than padded input {xs:?}", ws[2]),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let np = geom.batch * geom.out_pixels();
        let out = kernels::gemm_new(
            MatRef::new(self.value(w).data(), geom.out_channels, geom.patch_len()),
            MatRef::new(&cols, geom.patch_len(), np),
        );
        let y = kernels::channel_major_to_nchw(&out, geom.batch, geom.out_channels, geom.out_pixels());
        let shape = vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        let rg = self.rg(x) || self.rg(w);
        // Cached columns are only needed for the weight gradient.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv2d { x, w, geom, cols }, rg))
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(y, Op::Relu { x }, rg)
    }

    /// Training-mode batch norm over `[N, C, H, W]` (or `[N, C]`) using the
    /// batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, p) = self.bn_dims(x, gamma, beta)?;
        let xv = self.value(x).data();
        let count = n * p;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xv[(b * c + ch) * p..][..p].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut ss = 0.0;
            for b in 0..n {
                ss += xv[(b * c + ch) * p..][..p]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, c, p, true);
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch norm: a fixed affine map of running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, p) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(self.next_id(), "batchnorm2d", "running statistics length"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, &inv_std, n, c, p, false))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::shape(self.next_id(), "batchnorm2d", format!("input {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let p: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                self.next_id(),
                "batchnorm2d",
                format!("affine params must be [{c}]"),
            ));
        }
        Ok((n, c, p))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        n: usize,
        c: usize,
        p: usize,
        training: bool,
    ) -> Var {
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                for i in off..off + p {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(shape, y).expect("shape preserved"),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                training,
            },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                self.next_id(),
                "elementwise-add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// 2x2 max pooling with stride 2 (floor).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::shape(self.next_id(), "max-pool2d", format!("input {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, ho, wo], y)?, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Channels `start..start+len` of an `[N, C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || len == 0 || start + len > xs[1] {
            return Err(Error::shape(
                self.next_id(),
                "slice-channels",
                format!("channels {start}..{} of {xs:?}", start + len),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let p: usize = xs[2..].iter().product();
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(n * len * p);
        for b in 0..n {
            y.extend_from_slice(&xv[(b * c + start) * p..][..len * p]);
        }
        let mut shape = xs.clone();
        shape[1] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, y)?, Op::SliceChannels { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let id = self.next_id();
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|e| Error::shape(id, "reshape", e.to_string()))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = xs[0];
        let rest = xs[1..].iter().product();
        self.reshape(x, vec![n, rest])
    }

    /// Mean cross entropy of `logits: [N, C]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || labels.iter().any(|&y| y >= ls[1]) {
            return Err(Error::shape(
                self.next_id(),
                "softmax-cross-entropy",
                format!("logits {ls:?} with {} labels", labels.len()),
            ));
        }
        let (n, c) = (ls[0], ls[1]);
        let probs = softmax_rows(self.value(logits).data(), c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -log_softmax_at(self.value(logits).data(), c, i, y))
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean soft cross entropy `-sum_c softmax(teacher)_c log softmax(student)_c`.
    /// The teacher is always treated as a constant.
    pub fn soft_cross_entropy(&mut self, student: Var, teacher: Var) -> Result<Var> {
        let (ss, ts) = (self.shape(student).to_vec(), self.shape(teacher).to_vec());
        if ss.len() != 2 || ss != ts {
            return Err(Error::shape(
                self.next_id(),
                "soft-cross-entropy",
                format!("student {ss:?} vs teacher {ts:?}"),
            ));
        }
        let (n, c) = (ss[0], ss[1]);
        let target = softmax_rows(self.value(teacher).data(), c);
        let sv = self.value(student).data();
        let probs = softmax_rows(sv, c);
        let mut loss = 0.0;
        for i in 0..n {
            for j in 0..c {
                let t = target[i * c + j];
                if t > 0.0 {
                    loss -= t * log_softmax_at(sv, c, i, j);
                }
            }
        }
        let rg = self.rg(student);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftCrossEntropy {
                logits: student,
                probs,
                target,
            },
            rg,
        ))
    }

    /// Clip-normalize, round to `2^b - 1` levels, dequantize. `l` and `u`
    /// are scalar vars so the clip bounds can be trained.
    pub fn fake_quantize(&mut self, x: Var, l: Var, u: Var, spec: QuantSpec, label: &str) -> Result<Var> {
        let id = self.next_id();
        if self.value(l).numel() != 1 || self.value(u).numel() != 1 {
            return Err(Error::shape(id, "fake-quantize", "clip bounds must be scalars"));
        }
        if !self.value(x).all_finite() {
            return Err(Error::NonFinite {
                context: format!("fake-quantize input of {label} (node {id})"),
            });
        }
        let lo = self.value(l).item();
        let hi_raw = self.value(u).item();
        let (lo, hi) = crate::quant::project_clip_gap(lo, hi_raw);
        let gap = hi - lo;
        let s = spec.levels();
        let frozen = match &mut self.rounding {
            RoundingPass::Frozen(queue) => Some(
                queue
                    .pop_front()
                    .ok_or_else(|| Error::shape(id, "fake-quantize", "frozen rounding residuals exhausted"))?,
            ),
            _ => None,
        };
        let xv = self.value(x).data();
        if let Some(f) = &frozen {
            if f.len() != xv.len() {
                return Err(Error::shape(id, "fake-quantize", "frozen residual length"));
            }
        }
        let mut region = Vec::with_capacity(xv.len());
        let mut codes = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        let mut residual = Vec::with_capacity(xv.len());
        for (i, &v) in xv.iter().enumerate() {
            let t = (v - lo) / gap;
            region.push(if t < 0.0 {
                -1
            } else if t > 1.0 {
                1
            } else {
                0
            });
            let xn = normalize_value(v, lo, hi);
            let q = spec.code(xn).clamp(0.0, s);
            codes.push(q as u32);
            residual.push(q - s * xn);
            let level = match (&self.rounding, &frozen) {
                (RoundingPass::Exact, _) => q,
                (RoundingPass::Surrogate, _) => s * xn,
                (RoundingPass::Frozen(_), Some(f)) => s * xn + f[i],
                (RoundingPass::Frozen(_), None) => unreachable!(),
            };
            out.push(spec.dequantize_code(level));
        }
        self.residuals.push(residual);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(l) || self.rg(u);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::FakeQuant {
                x,
                l,
                u,
                spec,
                gap,
                lo,
                hi,
                region,
                codes,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward(format!(
                "node {} was never produced by a forward pass",
                loss.0
            )));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::BackwardBeforeForward(format!(
                "loss node {} is not scalar: {:?}",
                loss.0,
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Input | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (n, fan_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[0];
                self.acc(grads, *x, |dx| {
                    gemm_into(
                        MatRef::new(g, n, out),
                        MatRef::new(self.value(*w).data(), out, fan_in),
                        dx,
                        1.0,
                    )
                });
                self.acc(grads, *w, |dw| {
                    gemm_into(
                        MatRef::new(g, n, out).t(),
                        MatRef::new(self.value(*x).data(), n, fan_in),
                        dw,
                        1.0,
                    )
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |db| {
                        for row in g.chunks(out) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let np = geom.batch * geom.out_pixels();
                let gm = kernels::nchw_to_channel_major(g, geom.batch, geom.out_channels, geom.out_pixels());
                self.acc(grads, *w, |dw| {
                    gemm_into(
                        MatRef::new(&gm, geom.out_channels, np),
                        MatRef::new(cols, geom.patch_len(), np).t(),
                        dw,
                        1.0,
                    )
                });
                if self.rg(*x) {
                    let dcols = kernels::gemm_new(
                        MatRef::new(self.value(*w).data(), geom.out_channels, geom.patch_len()).t(),
                        MatRef::new(&gm, geom.out_channels, np),
                    );
                    self.acc(grads, *x, |dx| kernels::col2im(&dcols, geom, dx));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |dx| {
                    for ((d, &v), &gi) in dx.iter_mut().zip(xv).zip(g) {
                        if v > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let p: usize = xs[2..].iter().product();
                let m = (n * p) as f64;
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * p;
                        for i in off..off + p {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                self.acc(grads, *gamma, |d| d.iter_mut().zip(&sum_gx).for_each(|(a, v)| *a += v));
                self.acc(grads, *beta, |d| d.iter_mut().zip(&sum_g).for_each(|(a, v)| *a += v));
                self.acc(grads, *x, |dx| {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * p;
                            let k = gv[ch] * inv_std[ch];
                            for i in off..off + p {
                                dx[i] += if *training {
                                    k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, v)| *x += v));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, v)| *x += v));
            }
            Op::Sum { x } => {
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::MaxPool2 { x, argmax } => {
                self.acc(grads, *x, |d| {
                    for (&i, &gi) in argmax.iter().zip(g) {
                        d[i] += gi;
                    }
                });
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let p: usize = xs[2..].iter().product();
                let len = self.nodes[idx].value.shape()[1];
                self.acc(grads, *x, |d| {
                    for b in 0..n {
                        let dst = &mut d[(b * c + start) * p..][..len * p];
                        for (a, v) in dst.iter_mut().zip(&g[b * len * p..][..len * p]) {
                            *a += v;
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, v)| *a += v));
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                self.acc(grads, *logits, |d| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SoftCrossEntropy { logits, probs, target } => {
                let n = self.shape(*logits)[0];
                let scale = g[0] / n as f64;
                self.acc(grads, *logits, |d| {
                    for ((a, p), t) in d.iter_mut().zip(probs).zip(target) {
                        *a += scale * (p - t);
                    }
                });
            }
            Op::FakeQuant {
                x,
                l,
                u,
                spec,
                gap,
                lo,
                hi,
                region,
                ..
            } => {
                // Straight-through: d(level)/d(xn) = s, so the surrogate is
                // slope * xn (+ const) and only the clip-affine part remains.
                let k = spec.output_slope();
                let xv = self.value(*x).data();
                let gap2 = gap * gap;
                let mut dl = 0.0;
                let mut du = 0.0;
                let want_x = self.rg(*x);
                let mut dx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
                for (i, (&v, &gi)) in xv.iter().zip(g).enumerate() {
                    if region[i] != 0 {
                        continue;
                    }
                    let kg = k * gi;
                    if want_x {
                        dx[i] = kg / gap;
                    }
                    dl += kg * (v - hi) / gap2;
                    du -= kg * (v - lo) / gap2;
                }
                if want_x {
                    self.acc(grads, *x, |d| d.iter_mut().zip(&dx).for_each(|(a, v)| *a += v));
                }
                self.acc(grads, *l, |d| d[0] += dl);
                self.acc(grads, *u, |d| d[0] += du);
            }
        }
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn gemm_into(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    kernels::gemm(a, b, c, beta)
}

fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

fn log_softmax_at(logits: &[f64], c: usize, row: usize, col: usize) -> f64 {
    let r = &logits[row * c..(row + 1) * c];
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = r.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    r[col] - lse
}
