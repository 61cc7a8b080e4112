//! Operation recording and reverse-mode gradient replay.

use std::collections::HashMap;

use super::{Tensor, PROB_FLOOR};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
    },
    Scale {
        input: TensorId,
        factor: f64,
    },
    Relu {
        input: TensorId,
    },
    Reshape {
        input: TensorId,
    },
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        stride: (usize, usize),
    },
    MaxPool2d {
        input: TensorId,
        /// Linear index into the input buffer of the winning element,
        /// one per output element.
        argmax: Vec<usize>,
    },
    Dense {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    Softmax {
        input: TensorId,
    },
    CrossEntropy {
        probs: TensorId,
        labels: Vec<usize>,
    },
    KlDivergence {
        p: TensorId,
        q: TensorId,
    },
    MeanStack {
        inputs: Vec<TensorId>,
    },
    Sum {
        input: TensorId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when a gradient must flow through this node (a marked leaf or
    /// any operation downstream of one).
    flow: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by tensor id.
#[derive(Debug)]
pub struct GradMap {
    grads: HashMap<TensorId, Vec<f64>>,
}

impl GradMap {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(&id).map(|g| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A record of primitive operations, in execution order.
///
/// Every operation's inputs precede it on the tape, so replaying the list
/// in reverse visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Extract (rows, row_len) from a 1-D or 2-D tensor viewed as a batch of rows.
fn as_rows(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [k] => Ok((1, *k)),
        [b, k] => Ok((*b, *k)),
        other => Err(Error::dimension(
            op,
            format!("expected 1-D or 2-D tensor, got shape {other:?}"),
        )),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Place a tensor on the tape as an input node.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        let flow = value.requires_grad();
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            flow,
        });
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn flow(&self, id: TensorId) -> bool {
        self.nodes[id.0].flow
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        flow: bool,
    ) -> Result<TensorId> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op_name,
                index: i,
            });
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad: false,
            },
            op,
            flow,
        });
        Ok(id)
    }

    // ── Element-wise primitives ─────────────────────────────────────────

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::dimension(
                "add",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let shape = a.shape().to_vec();
        let flow = self.flow(lhs) || self.flow(rhs);
        self.push("add", shape, data, Op::Add { lhs, rhs }, flow)
    }

    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::dimension(
                "mul",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let shape = a.shape().to_vec();
        let flow = self.flow(lhs) || self.flow(rhs);
        self.push("mul", shape, data, Op::Mul { lhs, rhs }, flow)
    }

    pub fn scale(&mut self, input: TensorId, factor: f64) -> Result<TensorId> {
        let a = self.value(input);
        let data = a.data().iter().map(|x| x * factor).collect();
        let shape = a.shape().to_vec();
        let flow = self.flow(input);
        self.push("scale", shape, data, Op::Scale { input, factor }, flow)
    }

    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        let a = self.value(input);
        let data = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = a.shape().to_vec();
        let flow = self.flow(input);
        self.push("relu", shape, data, Op::Relu { input }, flow)
    }

    pub fn reshape(&mut self, input: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let a = self.value(input);
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::dimension(
                "reshape",
                format!("cannot view {:?} as {shape:?}", a.shape()),
            ));
        }
        let data = a.data().to_vec();
        let flow = self.flow(input);
        self.push("reshape", shape, data, Op::Reshape { input }, flow)
    }

    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        let a = self.value(input);
        let total: f64 = a.data().iter().sum();
        let flow = self.flow(input);
        self.push("sum", vec![1], vec![total], Op::Sum { input }, flow)
    }

    // ── Network primitives ──────────────────────────────────────────────

    /// Valid (unpadded) 2-D convolution.
    ///
    /// `input` is `[C_in, H, W]` or `[B, C_in, H, W]`; `kernel` is
    /// `[C_out, C_in, kH, kW]`. The output keeps the input's rank.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: (usize, usize),
    ) -> Result<TensorId> {
        let x = self.value(input);
        let k = self.value(kernel);
        let (batched, b, ci, h, w) = match *x.shape() {
            [c, h, w] => (false, 1, c, h, w),
            [b, c, h, w] => (true, b, c, h, w),
            ref other => {
                return Err(Error::dimension(
                    "conv2d",
                    format!("input must be 3-D or 4-D, got {other:?}"),
                ))
            }
        };
        let (co, kci, kh, kw) = match *k.shape() {
            [co, kci, kh, kw] => (co, kci, kh, kw),
            ref other => {
                return Err(Error::dimension(
                    "conv2d",
                    format!("kernel must be 4-D, got {other:?}"),
                ))
            }
        };
        let (sh, sw) = stride;
        if kci != ci {
            return Err(Error::dimension(
                "conv2d",
                format!("input channels {ci} vs kernel channels {kci}"),
            ));
        }
        if kh > h || kw > w {
            return Err(Error::dimension(
                "conv2d",
                format!("kernel ({kh},{kw}) exceeds input ({h},{w})"),
            ));
        }
        if sh == 0 || sw == 0 {
            return Err(Error::dimension("conv2d", "stride components must be >= 1"));
        }
        let ho = (h - kh) / sh + 1;
        let wo = (w - kw) / sw + 1;

        let xd = x.data();
        let kd = k.data();
        let mut out = vec![0.0; b * co * ho * wo];
        for bi in 0..b {
            let x_base = bi * ci * h * w;
            for c_out in 0..co {
                let k_base = c_out * ci * kh * kw;
                let o_base = (bi * co + c_out) * ho * wo;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for c_in in 0..ci {
                            let xc = x_base + c_in * h * w;
                            let kc = k_base + c_in * kh * kw;
                            for dh in 0..kh {
                                let xr = xc + (oh * sh + dh) * w + ow * sw;
                                let kr = kc + dh * kw;
                                for dw in 0..kw {
                                    acc += xd[xr + dw] * kd[kr + dw];
                                }
                            }
                        }
                        out[o_base + oh * wo + ow] = acc;
                    }
                }
            }
        }

        let shape = if batched {
            vec![b, co, ho, wo]
        } else {
            vec![co, ho, wo]
        };
        let flow = self.flow(input) || self.flow(kernel);
        self.push(
            "conv2d",
            shape,
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
            },
            flow,
        )
    }

    /// Max pooling over `(wH, wW)` windows. The backward pass routes the
    /// gradient to the window maximum only; ties go to the lowest linear
    /// index.
    pub fn maxpool2d(
        &mut self,
        input: TensorId,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<TensorId> {
        let x = self.value(input);
        let (batched, b, c, h, w) = match *x.shape() {
            [c, h, w] => (false, 1, c, h, w),
            [b, c, h, w] => (true, b, c, h, w),
            ref other => {
                return Err(Error::dimension(
                    "maxpool2d",
                    format!("input must be 3-D or 4-D, got {other:?}"),
                ))
            }
        };
        let (wh, ww) = window;
        let (sh, sw) = stride;
        if wh > h || ww > w {
            return Err(Error::dimension(
                "maxpool2d",
                format!("window ({wh},{ww}) exceeds input ({h},{w})"),
            ));
        }
        if sh == 0 || sw == 0 {
            return Err(Error::dimension(
                "maxpool2d",
                "stride components must be >= 1",
            ));
        }
        let ho = (h - wh) / sh + 1;
        let wo = (w - ww) / sw + 1;

        let xd = x.data();
        let mut out = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..b * c {
            let base = bc * h * w;
            let o_base = bc * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dh in 0..wh {
                        let row = base + (oh * sh + dh) * w + ow * sw;
                        for dw in 0..ww {
                            let v = xd[row + dw];
                            if v > best {
                                best = v;
                                best_idx = row + dw;
                            }
                        }
                    }
                    out[o_base + oh * wo + ow] = best;
                    argmax[o_base + oh * wo + ow] = best_idx;
                }
            }
        }

        let shape = if batched {
            vec![b, c, ho, wo]
        } else {
            vec![c, ho, wo]
        };
        let flow = self.flow(input);
        self.push(
            "maxpool2d",
            shape,
            out,
            Op::MaxPool2d { input, argmax },
            flow,
        )
    }

    /// Fully-connected layer: `out = input · weightᵀ + bias`.
    ///
    /// `input` is `[D]` or `[B, D]`, `weight` is `[O, D]`, `bias` is `[O]`.
    pub fn dense(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let x = self.value(input);
        let wt = self.value(weight);
        let bs = self.value(bias);
        let (batched, b, d) = match *x.shape() {
            [d] => (false, 1, d),
            [b, d] => (true, b, d),
            ref other => {
                return Err(Error::dimension(
                    "dense",
                    format!("input must be 1-D or 2-D, got {other:?}"),
                ))
            }
        };
        let (o, wd) = match *wt.shape() {
            [o, wd] => (o, wd),
            ref other => {
                return Err(Error::dimension(
                    "dense",
                    format!("weight must be 2-D, got {other:?}"),
                ))
            }
        };
        if wd != d {
            return Err(Error::dimension(
                "dense",
                format!("input width {d} vs weight width {wd}"),
            ));
        }
        if bs.shape() != [o] {
            return Err(Error::dimension(
                "dense",
                format!("bias shape {:?} vs output width {o}", bs.shape()),
            ));
        }

        let xd = x.data();
        let wdta = wt.data();
        let bd = bs.data();
        let mut out = vec![0.0; b * o];
        for bi in 0..b {
            let x_row = &xd[bi * d..(bi + 1) * d];
            for oi in 0..o {
                let w_row = &wdta[oi * d..(oi + 1) * d];
                let mut acc = bd[oi];
                for di in 0..d {
                    acc += w_row[di] * x_row[di];
                }
                out[bi * o + oi] = acc;
            }
        }

        let shape = if batched { vec![b, o] } else { vec![o] };
        let flow = self.flow(input) || self.flow(weight) || self.flow(bias);
        self.push(
            "dense",
            shape,
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            flow,
        )
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax(&mut self, input: TensorId) -> Result<TensorId> {
        let x = self.value(input);
        let (rows, k) = as_rows(x, "softmax")?;
        if k == 0 {
            return Err(Error::dimension("softmax", "empty distribution"));
        }
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[r * k + i] = e;
                denom += e;
            }
            for v in &mut out[r * k..(r + 1) * k] {
                *v /= denom;
            }
        }
        let shape = x.shape().to_vec();
        let flow = self.flow(input);
        self.push("softmax", shape, out, Op::Softmax { input }, flow)
    }

    /// Mean negative log-likelihood of the true labels, probabilities
    /// floored at [`PROB_FLOOR`] before the log.
    pub fn cross_entropy(&mut self, probs: TensorId, labels: &[usize]) -> Result<TensorId> {
        let p = self.value(probs);
        let (rows, k) = as_rows(p, "cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::dimension(
                "cross_entropy",
                format!("{rows} probability rows vs {} labels", labels.len()),
            ));
        }
        for &y in labels {
            if y >= k {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: y,
                    extent: k,
                });
            }
        }
        let pd = p.data();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            total -= pd[r * k + y].max(PROB_FLOOR).ln();
        }
        let loss = total / rows as f64;
        let flow = self.flow(probs);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            flow,
        )
    }

    /// Row-mean KL divergence `Σ p log(p/q)`; terms with `p <= floor`
    /// contribute zero and `q` is floored before the log.
    pub fn kl_divergence(&mut self, p: TensorId, q: TensorId) -> Result<TensorId> {
        let pt = self.value(p);
        let qt = self.value(q);
        if pt.shape() != qt.shape() {
            return Err(Error::dimension(
                "kl_divergence",
                format!("{:?} vs {:?}", pt.shape(), qt.shape()),
            ));
        }
        let (rows, k) = as_rows(pt, "kl_divergence")?;
        let pd = pt.data();
        let qd = qt.data();
        let mut total = 0.0;
        for r in 0..rows {
            for i in 0..k {
                let pv = pd[r * k + i];
                if pv > PROB_FLOOR {
                    total += pv * (pv.ln() - qd[r * k + i].max(PROB_FLOOR).ln());
                }
            }
        }
        let value = total / rows as f64;
        let flow = self.flow(p) || self.flow(q);
        self.push(
            "kl_divergence",
            vec![1],
            vec![value],
            Op::KlDivergence { p, q },
            flow,
        )
    }

    /// Element-wise arithmetic mean of several same-shape tensors.
    pub fn mean_stack(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::contract("mean_stack", "no inputs"))?;
        let shape = self.value(first).shape().to_vec();
        for &id in &inputs[1..] {
            if self.value(id).shape() != shape {
                return Err(Error::dimension(
                    "mean_stack",
                    format!("{:?} vs {:?}", self.value(id).shape(), shape),
                ));
            }
        }
        let n = inputs.len() as f64;
        let numel = self.value(first).numel();
        let mut out = vec![0.0; numel];
        for &id in inputs {
            for (acc, v) in out.iter_mut().zip(self.value(id).data()) {
                *acc += v;
            }
        }
        for v in &mut out {
            *v /= n;
        }
        let flow = inputs.iter().any(|&id| self.flow(id));
        self.push(
            "mean_stack",
            shape,
            out,
            Op::MeanStack {
                inputs: inputs.to_vec(),
            },
            flow,
        )
    }

    // ── Reverse pass ────────────────────────────────────────────────────

    /// Replay the tape in reverse from a scalar loss node, returning
    /// `∂loss/∂t` for every tensor marked with `requires_grad`. Gradients
    /// accumulate additively when a tensor feeds multiple operations.
    pub fn backward(&self, loss: TensorId) -> Result<GradMap> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_node.value.shape()),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].flow {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut map = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.value.requires_grad() {
                if let Some(g) = grads[i].take() {
                    map.insert(TensorId(i), g);
                }
            }
        }
        Ok(GradMap { grads: map })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].flow {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { lhs, rhs } => {
                self.accumulate(grads, *lhs, g);
                self.accumulate(grads, *rhs, g);
            }
            Op::Mul { lhs, rhs } => {
                let a = self.value(*lhs).data();
                let b = self.value(*rhs).data();
                let ga: Vec<f64> = g.iter().zip(b).map(|(gi, bi)| gi * bi).collect();
                let gb: Vec<f64> = g.iter().zip(a).map(|(gi, ai)| gi * ai).collect();
                self.accumulate(grads, *lhs, &ga);
                self.accumulate(grads, *rhs, &gb);
            }
            Op::Scale { input, factor } => {
                let gi: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.accumulate(grads, *input, &gi);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let gi: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *input, &gi);
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, g);
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                let gi = vec![g[0]; n];
                self.accumulate(grads, *input, &gi);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
            } => {
                self.backprop_conv2d(*input, *kernel, *stride, id, g, grads);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0.0; self.value(*input).numel()];
                for (out_i, &src) in argmax.iter().enumerate() {
                    gi[src] += g[out_i];
                }
                self.accumulate(grads, *input, &gi);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (b, d) = match *x.shape() {
                    [d] => (1, d),
                    [b, d] => (b, d),
                    _ => unreachable!("validated at record time"),
                };
                let o = wt.shape()[0];
                let xd = x.data();
                let wd = wt.data();

                let mut gx = vec![0.0; b * d];
                let mut gw = vec![0.0; o * d];
                let mut gb = vec![0.0; o];
                for bi in 0..b {
                    for oi in 0..o {
                        let gv = g[bi * o + oi];
                        if gv == 0.0 {
                            continue;
                        }
                        gb[oi] += gv;
                        let w_row = &wd[oi * d..(oi + 1) * d];
                        let x_row = &xd[bi * d..(bi + 1) * d];
                        let gx_row = &mut gx[bi * d..(bi + 1) * d];
                        for di in 0..d {
                            gx_row[di] += gv * w_row[di];
                        }
                        let gw_row = &mut gw[oi * d..(oi + 1) * d];
                        for di in 0..d {
                            gw_row[di] += gv * x_row[di];
                        }
                    }
                }
                self.accumulate(grads, *input, &gx);
                self.accumulate(grads, *weight, &gw);
                self.accumulate(grads, *bias, &gb);
            }
            Op::Softmax { input } => {
                let p = self.value(TensorId(id)).data();
                let shape = self.value(*input).shape();
                let (rows, k) = match *shape {
                    [k] => (1, k),
                    [b, k] => (b, k),
                    _ => unreachable!("validated at record time"),
                };
                let mut gi = vec![0.0; p.len()];
                for r in 0..rows {
                    let pr = &p[r * k..(r + 1) * k];
                    let gr = &g[r * k..(r + 1) * k];
                    let dot: f64 = pr.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                    for i in 0..k {
                        gi[r * k + i] = pr[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, *input, &gi);
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.value(*probs);
                let (rows, k) = match *p.shape() {
                    [k] => (1, k),
                    [b, k] => (b, k),
                    _ => unreachable!("validated at record time"),
                };
                let pd = p.data();
                let mut gp = vec![0.0; pd.len()];
                let scale = g[0] / rows as f64;
                for (r, &y) in labels.iter().enumerate() {
                    let pv = pd[r * k + y];
                    if pv > PROB_FLOOR {
                        gp[r * k + y] = -scale / pv;
                    }
                }
                self.accumulate(grads, *probs, &gp);
            }
            Op::KlDivergence { p, q } => {
                let pt = self.value(*p);
                let qt = self.value(*q);
                let rows = match *pt.shape() {
                    [_k] => 1,
                    [b, _k] => b,
                    _ => unreachable!("validated at record time"),
                };
                let pd = pt.data();
                let qd = qt.data();
                let scale = g[0] / rows as f64;
                let mut gp = vec![0.0; pd.len()];
                let mut gq = vec![0.0; qd.len()];
                for i in 0..pd.len() {
                    let pv = pd[i];
                    if pv <= PROB_FLOOR {
                        continue;
                    }
                    let qf = qd[i].max(PROB_FLOOR);
                    gp[i] = scale * (pv.ln() - qf.ln() + 1.0);
                    if qd[i] > PROB_FLOOR {
                        gq[i] = -scale * pv / qd[i];
                    }
                }
                self.accumulate(grads, *p, &gp);
                self.accumulate(grads, *q, &gq);
            }
            Op::MeanStack { inputs } => {
                let n = inputs.len() as f64;
                let gi: Vec<f64> = g.iter().map(|v| v / n).collect();
                for &input in inputs {
                    self.accumulate(grads, input, &gi);
                }
            }
        }
    }

    fn backprop_conv2d(
        &self,
        input: TensorId,
        kernel: TensorId,
        stride: (usize, usize),
        out_id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let x = self.value(input);
        let k = self.value(kernel);
        let (b, ci, h, w) = match *x.shape() {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => unreachable!("validated at record time"),
        };
        let [co, _, kh, kw] = *k.shape() else {
            unreachable!("validated at record time")
        };
        let (sh, sw) = stride;
        let out_shape = self.value(TensorId(out_id)).shape();
        let (ho, wo) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);

        let xd = x.data();
        let kd = k.data();
        let mut gx = vec![0.0; xd.len()];
        let mut gk = vec![0.0; kd.len()];
        for bi in 0..b {
            let x_base = bi * ci * h * w;
            for c_out in 0..co {
                let k_base = c_out * ci * kh * kw;
                let o_base = (bi * co + c_out) * ho * wo;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let gv = g[o_base + oh * wo + ow];
                        if gv == 0.0 {
                            continue;
                        }
                        for c_in in 0..ci {
                            let xc = x_base + c_in * h * w;
                            let kc = k_base + c_in * kh * kw;
                            for dh in 0..kh {
                                let xr = xc + (oh * sh + dh) * w + ow * sw;
                                let kr = kc + dh * kw;
                                for dw in 0..kw {
                                    gx[xr + dw] += gv * kd[kr + dw];
                                    gk[kr + dw] += gv * xd[xr + dw];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.accumulate(grads, input, &gx);
        self.accumulate(grads, kernel, &gk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9]));
        let k = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, (1, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data(), &[1.0; 9]);
    }

    #[test]
    fn conv2d_hand_computed() {
        // [[1,2],[3,4]] against kernel [[1,0],[0,1]] -> 1*1 + 4*1 = 5
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, k, (1, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv2d_full_scale_extents() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 114, 500]));
        let k = tape.leaf(Tensor::zeros(&[32, 3, 15, 23]));
        let y = tape.conv2d(x, k, (9, 9)).unwrap();
        assert_eq!(tape.shape(y), &[32, 12, 54]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4, 4]));
        let k = tape.leaf(Tensor::zeros(&[1, 3, 2, 2]));
        let err = tape.conv2d(x, k, (1, 1)).unwrap_err();
        assert!(err.to_string().contains("input channels 2"));
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2]));
        let k = tape.leaf(Tensor::zeros(&[1, 1, 3, 1]));
        assert!(tape.conv2d(x, k, (1, 1)).is_err());
    }

    #[test]
    fn maxpool_pairs() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, (1, 2), (1, 2)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2]);
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2], &[-1.0, -1.0]).with_grad());
        let y = tape.maxpool2d(x, (1, 2), (1, 2)).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn maxpool_halves_pooled_extent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[32, 12, 54]));
        let y = tape.maxpool2d(x, (1, 2), (1, 2)).unwrap();
        assert_eq!(tape.shape(y), &[32, 12, 27]);
    }

    #[test]
    fn maxpool_rejects_narrow_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 1]));
        assert!(tape.maxpool2d(x, (1, 2), (1, 2)).is_err());
    }

    #[test]
    fn dense_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 1.0]));
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
    }

    #[test]
    fn dense_hand_computed() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2.0, 3.0]));
        let w = tape.leaf(t(&[1, 2], &[1.0, 1.0]));
        let b = tape.leaf(t(&[1], &[1.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn dense_rejects_width_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let w = tape.leaf(Tensor::zeros(&[2, 4]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.dense(x, w, b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        for c in [-100.0, 0.0, 7.5, 1e6] {
            let x = tape.leaf(Tensor::filled(&[4], c));
            let y = tape.softmax(x).unwrap();
            for &p in tape.value(y).data() {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_closed_form_ratio() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0f64.ln(), 3.0f64.ln()]));
        let y = tape.softmax(x).unwrap();
        let p = tape.value(y).data();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        // One-hot at the true label -> 0.
        let p = tape.leaf(t(&[2], &[0.0, 1.0]));
        let l = tape.cross_entropy(p, &[1]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);

        // Uniform over 6 classes -> ln 6.
        let p = tape.leaf(Tensor::filled(&[6], 1.0 / 6.0));
        let l = tape.cross_entropy(p, &[3]).unwrap();
        assert!((tape.value(l).data()[0] - 6.0f64.ln()).abs() < 1e-12);

        // [0.25, 0.75] with label 1 -> -ln 0.75.
        let p = tape.leaf(t(&[2], &[0.25, 0.75]));
        let l = tape.cross_entropy(p, &[1]).unwrap();
        assert!((tape.value(l).data()[0] + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2], &[0.5, 0.5]));
        let err = tape.cross_entropy(p, &[2]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 2, extent: 2, .. }));
    }

    #[test]
    fn kl_divergence_examples() {
        let mut tape = Tape::new();
        // KL(p || p) = 0.
        let p = tape.leaf(t(&[3], &[0.2, 0.3, 0.5]));
        let q = tape.leaf(t(&[3], &[0.2, 0.3, 0.5]));
        let d = tape.kl_divergence(p, q).unwrap();
        assert_eq!(tape.value(d).data()[0], 0.0);

        // KL([1,0] || [0.5,0.5]) = ln 2.
        let p = tape.leaf(t(&[2], &[1.0, 0.0]));
        let q = tape.leaf(t(&[2], &[0.5, 0.5]));
        let d = tape.kl_divergence(p, q).unwrap();
        assert!((tape.value(d).data()[0] - 2.0f64.ln()).abs() < 1e-12);

        // KL([0.5,0.5] || [0.75,0.25]) = 0.5 ln(2/3) + 0.5 ln 2.
        let p = tape.leaf(t(&[2], &[0.5, 0.5]));
        let q = tape.leaf(t(&[2], &[0.75, 0.25]));
        let d = tape.kl_divergence(p, q).unwrap();
        let expect = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2.0f64.ln();
        assert!((tape.value(d).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn backward_scalar_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(4.2).with_grad());
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_relu_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-1.0, 2.0]).with_grad());
        let r = tape.relu(x).unwrap();
        let loss = tape.sum(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
    }

    #[test]
    fn gradient_accumulates_on_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let once = tape.sum(x).unwrap();
        let g1 = tape.backward(once).unwrap();

        let doubled = tape.add(x, x).unwrap();
        let twice = tape.sum(doubled).unwrap();
        let g2 = tape.backward(twice).unwrap();

        for (a, b) in g1.get(x).unwrap().iter().zip(g2.get(x).unwrap()) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1e308]));
        let err = tape.add(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "add", .. }));
    }
}
