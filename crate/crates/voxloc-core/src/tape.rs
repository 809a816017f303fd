//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations execute eagerly and record themselves on the [`Tape`] in
//! execution order, which is already a topological order: every node is
//! created after all of its inputs. [`Tape::backward`] replays the record in
//! reverse, accumulating vector-Jacobian products into per-node gradient
//! buffers. Repeated backward calls accumulate additively.
//!
//! The op set is exactly what the two model heads need: `conv2d`, `relu`,
//! `maxpool2d`, `global_avg_pool`, `linear`, `concat_channels`, the two
//! fused losses, and a handful of elementwise helpers for tests.
//!
//! Execution of a single tape is single-threaded and deterministic; the only
//! internal parallelism (convolution planes) writes disjoint outputs whose
//! elements are each produced by a fixed-order scalar loop, so results are
//! bit-identical regardless of thread scheduling. Distinct tapes are
//! independent and may run on distinct threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    Relu {
        x: Var,
    },
    MaxPool2d {
        x: Var,
        /// Flat input index of the winning element, per output element.
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: Var,
        spatial: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        c_a: usize,
        c_b: usize,
        spatial: usize,
    },
    SoftmaxNll {
        logits: Var,
        labels: Vec<usize>,
        /// Softmax probabilities saved from the forward pass.
        probs: Vec<f32>,
    },
    MarginRanking {
        scores: Var,
        ranks: Vec<usize>,
        margin: f32,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f32,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Vec<f32>,
    /// True if a gradient is requested for this node or any ancestor leaf.
    needs: bool,
    op: Op,
}

/// Ordered record of executed operations with their values and gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            shape,
            data,
            grad,
            needs,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    /// Registers a tensor as a leaf, copying its data and `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Registers a raw buffer as a leaf.
    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Var {
        assert_eq!(numel(&shape), data.len(), "leaf shape/buffer mismatch");
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Accumulated gradient of `v` (zeros until a backward pass reaches it).
    pub fn grad(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].grad
    }

    pub fn scalar(&self, v: Var) -> Result<f32> {
        let node = &self.nodes[v.0];
        if node.data.len() != 1 {
            return Err(Error::NonScalarLoss {
                numel: node.data.len(),
            });
        }
        Ok(node.data[0])
    }

    fn expect_rank4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected rank-4 [N,C,H,W] input, got {s:?}"),
            });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// 2D convolution with zero padding.
    ///
    /// `x`: `[N,C,H,W]`, `w`: `[O,C,kH,kW]`, `b`: `[O]`. Output extents are
    /// `floor((H + 2·pad − kH)/stride) + 1` and analogously for width.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c_in, h, wid] = self.expect_rank4(x, "conv2d")?;
        let ws = self.shape(w);
        if ws.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected rank-4 [O,C,kH,kW] weight, got {ws:?}"),
            });
        }
        let (c_out, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight expects {wc} input channels, input has {c_in}"),
            });
        }
        if self.shape(b) != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "bias shape {:?} does not match {c_out} output channels",
                    self.shape(b)
                ),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArg("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > wid + 2 * pad {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} exceeds padded input {}x{}",
                    h + 2 * pad,
                    wid + 2 * pad
                ),
            });
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wid + 2 * pad - kw) / stride + 1;
        let dims = ConvDims {
            n,
            c_in,
            h,
            w: wid,
            c_out,
            kh,
            kw,
            h_out,
            w_out,
            stride,
            pad,
        };

        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0f32; n * c_out * h_out * w_out];
        // One output plane per (sample, out-channel); planes are disjoint and
        // each element is a fixed-order scalar reduction, so this stays
        // bit-reproducible under any thread scheduling.
        out.par_chunks_mut(h_out * w_out)
            .enumerate()
            .for_each(|(plane, out_plane)| {
                let ni = plane / c_out;
                let o = plane % c_out;
                conv_plane_forward(xd, wd, bd, &dims, ni, o, out_plane);
            });

        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            vec![n, c_out, h_out, w_out],
            out,
            needs,
            Op::Conv2d { x, w, b, dims },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, needs, Op::Relu { x })
    }

    /// Max pooling with a square window of side `k` and stride `k`.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.expect_rank4(x, "maxpool2d")?;
        if k == 0 || h < k || w < k {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("window {k} does not fit {h}x{w} input"),
            });
        }
        let h_out = h / k;
        let w_out = w / k;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; n * c * h_out * w_out];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let in_base = plane * h * w;
            let out_base = plane * h_out * w_out;
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = in_base + (oh * k + dy) * w + ow * k + dx;
                            let v = xd[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_base + oh * w_out + ow] = best;
                    argmax[out_base + oh * w_out + ow] = best_idx as u32;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![n, c, h_out, w_out],
            out,
            needs,
            Op::MaxPool2d { x, argmax },
        ))
    }

    /// Mean over the spatial extents: `[N,C,H,W]` → `[N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.expect_rank4(x, "global_avg_pool")?;
        let spatial = h * w;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; n * c];
        for (plane, slot) in out.iter_mut().enumerate() {
            let base = plane * spatial;
            let mut acc = 0.0f32;
            for v in &xd[base..base + spatial] {
                acc += v;
            }
            *slot = acc / spatial as f32;
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n, c], out, needs, Op::GlobalAvgPool { x, spatial }))
    }

    /// Affine layer: `x` `[N,F]`, `w` `[O,F]`, `b` `[O]` → `[N,O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("expected [N,F] input and [O,F] weight, got {xs:?} and {ws:?}"),
            });
        }
        let (n, f) = (xs[0], xs[1]);
        let (o, wf) = (ws[0], ws[1]);
        if wf != f {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("weight expects {wf} features, input has {f}"),
            });
        }
        if self.shape(b) != [o] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("bias shape {:?} does not match {o} outputs", self.shape(b)),
            });
        }
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0f32; n * o];
        for i in 0..n {
            for j in 0..o {
                let mut acc = bd[j];
                for k in 0..f {
                    acc += xd[i * f + k] * wd[j * f + k];
                }
                out[i * o + j] = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![n, o], out, needs, Op::Linear { x, w, b }))
    }

    /// Stacks two `[N,C,H,W]` inputs along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.expect_rank4(a, "concat_channels")?;
        let [nb, cb, hb, wb] = self.expect_rank4(b, "concat_channels")?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                detail: format!(
                    "inputs differ outside the channel axis: [{na},{ca},{ha},{wa}] vs [{nb},{cb},{hb},{wb}]"
                ),
            });
        }
        let spatial = ha * wa;
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity(na * (ca + cb) * spatial);
        for i in 0..na {
            out.extend_from_slice(&ad[i * ca * spatial..(i + 1) * ca * spatial]);
            out.extend_from_slice(&bd[i * cb * spatial..(i + 1) * cb * spatial]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            vec![na, ca + cb, ha, wa],
            out,
            needs,
            Op::ConcatChannels {
                a,
                b,
                c_a: ca,
                c_b: cb,
                spatial,
            },
        ))
    }

    /// Mean negative log-likelihood under a softmax over the last axis.
    ///
    /// `logits`: `[N,K]`, one label per row.
    pub fn softmax_nll(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_nll",
                detail: format!("expected [N,K] logits, got {s:?}"),
            });
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_nll",
                detail: format!("{} labels for {n} rows", labels.len()),
            });
        }
        for &label in labels {
            if label >= k {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: k,
                });
            }
        }
        let ld = &self.nodes[logits.0].data;
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f32;
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= denom;
            }
            loss += -(probs[i * k + labels[i]].max(f32::MIN_POSITIVE)).ln();
        }
        loss /= n as f32;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            needs,
            Op::SoftmaxNll {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Pairwise margin ranking loss over unordered pairs.
    ///
    /// `scores` holds one scalar per item (`[N]` or `[N,1]`); `ranks` is a
    /// permutation of `0..N`. For every pair `i < j` the item with the higher
    /// rank must outscore the other by at least `margin`:
    /// `L = Σ_{i<j} max(0, margin − sign(y_j − y_i)·(f_j − f_i))`.
    /// The subgradient at the hinge kink is zero.
    pub fn margin_ranking(&mut self, scores: Var, ranks: &[usize], margin: f32) -> Result<Var> {
        let s = self.shape(scores);
        let n = s[0];
        let flat_ok = s.len() == 1 || (s.len() == 2 && s[1] == 1);
        if !flat_ok {
            return Err(Error::ShapeMismatch {
                op: "margin_ranking",
                detail: format!("expected [N] or [N,1] scores, got {s:?}"),
            });
        }
        if ranks.len() != n {
            return Err(Error::ShapeMismatch {
                op: "margin_ranking",
                detail: format!("{} ranks for {n} scores", ranks.len()),
            });
        }
        validate_permutation(ranks)?;
        if margin < 0.0 {
            return Err(Error::InvalidArg("margin must be >= 0".into()));
        }
        let f = &self.nodes[scores.0].data;
        let mut loss = 0.0f32;
        for i in 0..n {
            for j in (i + 1)..n {
                let sign = if ranks[j] > ranks[i] { 1.0 } else { -1.0 };
                let term = margin - sign * (f[j] - f[i]);
                if term > 0.0 {
                    loss += term;
                }
            }
        }
        let needs = self.needs(scores);
        Ok(self.push(
            vec![1],
            vec![loss],
            needs,
            Op::MarginRanking {
                scores,
                ranks: ranks.to_vec(),
                margin,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "mul")
    }

    fn binary_elementwise(&mut self, a: Var, b: Var, which: &'static str) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: if which == "add" { "add" } else { "mul" },
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let data: Vec<f32> = if which == "add" {
            ad.iter().zip(bd).map(|(x, y)| x + y).collect()
        } else {
            ad.iter().zip(bd).map(|(x, y)| x * y).collect()
        };
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        let op = if which == "add" {
            Op::Add { a, b }
        } else {
            Op::Mul { a, b }
        };
        Ok(self.push(shape, data, needs, op))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, data, needs, Op::Scale { x, c })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = 0.0f32;
        for v in &self.nodes[x.0].data {
            acc += v;
        }
        let needs = self.needs(x);
        self.push(vec![1], vec![acc], needs, Op::Sum { x })
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively
    /// across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss {
                numel: self.nodes[loss.0].data.len(),
            });
        }
        // Per-pass upstream gradients, kept separate from `grad` (which holds
        // the running total across backward calls).
        let mut up: Vec<Vec<f32>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0f32; if n.needs { n.data.len() } else { 0 }])
            .collect();
        if self.nodes[loss.0].needs {
            up[loss.0][0] = 1.0;
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs || up[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad_out = std::mem::take(&mut up[idx]);
            self.propagate(idx, &grad_out, &mut up);
            for (total, g) in self.nodes[idx].grad.iter_mut().zip(&grad_out) {
                *total += g;
            }
            up[idx] = grad_out; // restore buffer (values already folded in)
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[f32], up: &mut [Vec<f32>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[w.0].data;
                if self.needs(*b) {
                    conv_bias_backward(gout, dims, &mut up[b.0]);
                }
                if self.needs(*w) {
                    conv_weight_backward(xd, gout, dims, &mut up[w.0]);
                }
                if self.needs(*x) {
                    conv_input_backward(wd, gout, dims, &mut up[x.0]);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xd = &self.nodes[x.0].data;
                    for (i, (&g, &v)) in gout.iter().zip(xd).enumerate() {
                        if v > 0.0 {
                            up[x.0][i] += g;
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.needs(*x) {
                    for (&g, &src) in gout.iter().zip(argmax) {
                        up[x.0][src as usize] += g;
                    }
                }
            }
            Op::GlobalAvgPool { x, spatial } => {
                if self.needs(*x) {
                    let inv = 1.0 / *spatial as f32;
                    for (plane, &g) in gout.iter().enumerate() {
                        let base = plane * spatial;
                        for slot in &mut up[x.0][base..base + spatial] {
                            *slot += g * inv;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[x.0].shape;
                let ws = &self.nodes[w.0].shape;
                let (n, f, o) = (xs[0], xs[1], ws[0]);
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[w.0].data;
                if self.needs(*b) {
                    for i in 0..n {
                        for j in 0..o {
                            up[b.0][j] += gout[i * o + j];
                        }
                    }
                }
                if self.needs(*w) {
                    for i in 0..n {
                        for j in 0..o {
                            let g = gout[i * o + j];
                            for k in 0..f {
                                up[w.0][j * f + k] += g * xd[i * f + k];
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    for i in 0..n {
                        for j in 0..o {
                            let g = gout[i * o + j];
                            for k in 0..f {
                                up[x.0][i * f + k] += g * wd[j * f + k];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels {
                a,
                b,
                c_a,
                c_b,
                spatial,
            } => {
                let n = node.shape[0];
                let (block_a, block_b) = (c_a * spatial, c_b * spatial);
                for i in 0..n {
                    let base = i * (block_a + block_b);
                    if self.needs(*a) {
                        for k in 0..block_a {
                            up[a.0][i * block_a + k] += gout[base + k];
                        }
                    }
                    if self.needs(*b) {
                        for k in 0..block_b {
                            up[b.0][i * block_b + k] += gout[base + block_a + k];
                        }
                    }
                }
            }
            Op::SoftmaxNll {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let g = gout[0] / n as f32;
                    for i in 0..n {
                        for j in 0..k {
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            up[logits.0][i * k + j] += g * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::MarginRanking {
                scores,
                ranks,
                margin,
            } => {
                if self.needs(*scores) {
                    let f = &self.nodes[scores.0].data;
                    let g = gout[0];
                    let n = ranks.len();
                    for i in 0..n {
                        for j in (i + 1)..n {
                            let sign = if ranks[j] > ranks[i] { 1.0 } else { -1.0 };
                            if *margin - sign * (f[j] - f[i]) > 0.0 {
                                up[scores.0][j] -= g * sign;
                                up[scores.0][i] += g * sign;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    for (slot, &g) in up[a.0].iter_mut().zip(gout) {
                        *slot += g;
                    }
                }
                if self.needs(*b) {
                    for (slot, &g) in up[b.0].iter_mut().zip(gout) {
                        *slot += g;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = &self.nodes[b.0].data;
                    for ((slot, &g), &v) in up[a.0].iter_mut().zip(gout).zip(bd) {
                        *slot += g * v;
                    }
                }
                if self.needs(*b) {
                    let ad = &self.nodes[a.0].data;
                    for ((slot, &g), &v) in up[b.0].iter_mut().zip(gout).zip(ad) {
                        *slot += g * v;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    for (slot, &g) in up[x.0].iter_mut().zip(gout) {
                        *slot += g * c;
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let g = gout[0];
                    for slot in up[x.0].iter_mut() {
                        *slot += g;
                    }
                }
            }
        }
    }
}

fn validate_permutation(ranks: &[usize]) -> Result<()> {
    let n = ranks.len();
    let mut seen = vec![false; n];
    for &r in ranks {
        if r >= n {
            return Err(Error::InvalidRanks {
                len: n,
                detail: format!("rank {r} out of range"),
            });
        }
        if seen[r] {
            return Err(Error::InvalidRanks {
                len: n,
                detail: format!("rank {r} appears twice (ties are not allowed)"),
            });
        }
        seen[r] = true;
    }
    Ok(())
}

/// Valid kernel-tap range along one axis for a given output position:
/// `k ∈ [lo, hi)` keeps `pos·stride + k − pad` inside `[0, extent)`.
#[inline]
fn tap_range(pos: usize, stride: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    let base = (pos * stride) as isize - pad as isize;
    let lo = (-base).max(0) as usize;
    let hi = ((extent as isize - base).max(0) as usize).min(k);
    (lo, hi.max(lo))
}

fn conv_plane_forward(
    xd: &[f32],
    wd: &[f32],
    bd: &[f32],
    d: &ConvDims,
    ni: usize,
    o: usize,
    out_plane: &mut [f32],
) {
    let x_base = ni * d.c_in * d.h * d.w;
    let w_base = o * d.c_in * d.kh * d.kw;
    out_plane.fill(bd[o]);
    for c in 0..d.c_in {
        let xc = x_base + c * d.h * d.w;
        let wc = w_base + c * d.kh * d.kw;
        for ky in 0..d.kh {
            for oh in 0..d.h_out {
                let iy = (oh * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let xrow = &xd[xc + iy as usize * d.w..xc + (iy as usize + 1) * d.w];
                let wrow = &wd[wc + ky * d.kw..wc + (ky + 1) * d.kw];
                let orow = &mut out_plane[oh * d.w_out..(oh + 1) * d.w_out];
                for (ow, slot) in orow.iter_mut().enumerate() {
                    let (lo, hi) = tap_range(ow, d.stride, d.pad, d.kw, d.w);
                    let base = (ow * d.stride) as isize - d.pad as isize;
                    let mut acc = 0.0f32;
                    for kx in lo..hi {
                        acc += xrow[(base + kx as isize) as usize] * wrow[kx];
                    }
                    *slot += acc;
                }
            }
        }
    }
}

fn conv_bias_backward(gout: &[f32], d: &ConvDims, db: &mut [f32]) {
    let plane = d.h_out * d.w_out;
    for ni in 0..d.n {
        for o in 0..d.c_out {
            let base = (ni * d.c_out + o) * plane;
            let mut acc = 0.0f32;
            for &g in &gout[base..base + plane] {
                acc += g;
            }
            db[o] += acc;
        }
    }
}

fn conv_weight_backward(xd: &[f32], gout: &[f32], d: &ConvDims, dw: &mut [f32]) {
    let kernel = d.c_in * d.kh * d.kw;
    // Disjoint per-out-channel slices; inner loops keep a fixed order.
    dw.par_chunks_mut(kernel).enumerate().for_each(|(o, dwo)| {
        for ni in 0..d.n {
            let g_base = (ni * d.c_out + o) * d.h_out * d.w_out;
            let x_base = ni * d.c_in * d.h * d.w;
            for c in 0..d.c_in {
                let xc = x_base + c * d.h * d.w;
                let wc = c * d.kh * d.kw;
                for ky in 0..d.kh {
                    for oh in 0..d.h_out {
                        let iy = (oh * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = &xd[xc + iy as usize * d.w..xc + (iy as usize + 1) * d.w];
                        let grow = &gout[g_base + oh * d.w_out..g_base + (oh + 1) * d.w_out];
                        for (ow, &g) in grow.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let (lo, hi) = tap_range(ow, d.stride, d.pad, d.kw, d.w);
                            let base = (ow * d.stride) as isize - d.pad as isize;
                            for kx in lo..hi {
                                dwo[wc + ky * d.kw + kx] +=
                                    g * xrow[(base + kx as isize) as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv_input_backward(wd: &[f32], gout: &[f32], d: &ConvDims, dx: &mut [f32]) {
    let sample = d.c_in * d.h * d.w;
    dx.par_chunks_mut(sample).enumerate().for_each(|(ni, dxn)| {
        for o in 0..d.c_out {
            let g_base = (ni * d.c_out + o) * d.h_out * d.w_out;
            let w_base = o * d.c_in * d.kh * d.kw;
            for c in 0..d.c_in {
                let xc = c * d.h * d.w;
                let wc = w_base + c * d.kh * d.kw;
                for ky in 0..d.kh {
                    let wrow = &wd[wc + ky * d.kw..wc + (ky + 1) * d.kw];
                    for oh in 0..d.h_out {
                        let iy = (oh * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let drow_start = xc + iy as usize * d.w;
                        let grow = &gout[g_base + oh * d.w_out..g_base + (oh + 1) * d.w_out];
                        for (ow, &g) in grow.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let (lo, hi) = tap_range(ow, d.stride, d.pad, d.kw, d.w);
                            let base = (ow * d.stride) as isize - d.pad as isize;
                            for kx in lo..hi {
                                dxn[drow_start + (base + kx as isize) as usize] += g * wrow[kx];
                            }
                        }
                    }
                }
            }
        }
    });
}
