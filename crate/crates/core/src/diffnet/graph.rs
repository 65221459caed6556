//! Define-by-run reverse-mode tape.
//!
//! Every forward call builds a fresh [`Graph`]; nodes are recorded in
//! creation order and the backward pass replays them in exact reverse
//! order. Gradients accumulate into the `grad` buffer of any tensor
//! whose `requires_grad` flag was set when it entered the graph, so
//! repeated backward calls without zeroing add up.

use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Dense,
    Conv2d { stride: usize, padding: usize },
    Relu,
    Sigmoid,
    MaxPool2x2 { argmax: Vec<u32> },
    AvgPool2x2,
    Upsample2x,
    Flatten,
    Add,
    ConcatChannels,
    Affine { scale: f64 },
    Mul,
    Sum,
    Mse,
    MaskedMse { count: f64 },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    tensor: Tensor,
    /// True when some leaf below this node wants gradients; lets the
    /// backward pass skip weight gradients during input-only attacks
    /// and input gradients during training.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient buffer of a node; only populated for tensors that
    /// entered the graph with `requires_grad`.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, tensor: Tensor) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => tensor.requires_grad(),
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            tensor,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a tensor as-is; its `requires_grad` flag decides whether
    /// backward will fill its gradient buffer.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], tensor)
    }

    /// Leaf that never receives gradients (labels, masks, frozen params).
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Leaf that accumulates gradients on backward.
    pub fn variable(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(Error::ShapeMismatch {
                context: "dense",
                expected: vec![ws[0], xs[0]],
                actual: ws.to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[ws[0]]);
        ops::dense_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            out.data_mut(),
        );
        Ok(self.push(Op::Dense, vec![x, w, b], out))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        let bad = |_: &str| Error::ShapeMismatch {
            context: "conv2d",
            expected: ws.clone(),
            actual: xs.clone(),
        };
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 {
            return Err(bad("rank"));
        }
        let (c_in, h, w_in) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in || ws[3] != k || bs[0] != c_out || k % 2 == 0 {
            return Err(bad("dims"));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidSpec(format!("conv2d stride {stride}")));
        }
        let h_out = ops::conv2d_out_dim(h, k, stride, padding)
            .ok_or_else(|| Error::InvalidSpec(format!("conv2d output for input {h}x{w_in}")))?;
        let w_out = ops::conv2d_out_dim(w_in, k, stride, padding)
            .ok_or_else(|| Error::InvalidSpec(format!("conv2d output for input {h}x{w_in}")))?;
        let mut out = Tensor::zeros(&[c_out, h_out, w_out]);
        ops::conv2d_forward(
            self.value(x).data(),
            c_in,
            h,
            w_in,
            self.value(w).data(),
            c_out,
            k,
            self.value(b).data(),
            stride,
            padding,
            out.data_mut(),
            h_out,
            w_out,
        );
        Ok(self.push(Op::Conv2d { stride, padding }, vec![x, w, b], out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.set_requires_grad(false);
        out.zero_grad();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu, vec![x], out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.set_requires_grad(false);
        out.zero_grad();
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(Op::Sigmoid, vec![x], out)
    }

    fn pool_dims(&self, x: NodeId, context: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                context,
                expected: vec![0, 2, 2],
                actual: s.to_vec(),
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.pool_dims(x, "maxpool2x2")?;
        let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
        let mut argmax = Vec::new();
        ops::maxpool2x2_forward(self.value(x).data(), c, h, w, out.data_mut(), &mut argmax);
        Ok(self.push(Op::MaxPool2x2 { argmax }, vec![x], out))
    }

    pub fn avgpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.pool_dims(x, "avgpool2x2")?;
        let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
        ops::avgpool2x2_forward(self.value(x).data(), c, h, w, out.data_mut());
        Ok(self.push(Op::AvgPool2x2, vec![x], out))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                context: "upsample2x",
                expected: vec![3],
                actual: vec![s.len()],
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[c, h * 2, w * 2]);
        ops::upsample2x_forward(self.value(x).data(), c, h, w, out.data_mut());
        Ok(self.push(Op::Upsample2x, vec![x], out))
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let mut out = Tensor::zeros(&[n]);
        out.data_mut().copy_from_slice(self.value(x).data());
        self.push(Op::Flatten, vec![x], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut out = Tensor::zeros(self.shape(a));
        for ((o, x), y) in out
            .data_mut()
            .iter_mut()
            .zip(self.nodes[a.0].tensor.data())
            .zip(self.nodes[b.0].tensor.data())
        {
            *o = x + y;
        }
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let mut out = Tensor::zeros(self.shape(a));
        for ((o, x), y) in out
            .data_mut()
            .iter_mut()
            .zip(self.nodes[a.0].tensor.data())
            .zip(self.nodes[b.0].tensor.data())
        {
            *o = x * y;
        }
        Ok(self.push(Op::Mul, vec![a, b], out))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::ShapeMismatch {
                context: "concat_channels",
                expected: sa,
                actual: sb,
            });
        }
        let mut out = Tensor::zeros(&[sa[0] + sb[0], sa[1], sa[2]]);
        let split = self.value(a).len();
        out.data_mut()[..split].copy_from_slice(self.value(a).data());
        out.data_mut()[split..].copy_from_slice(self.value(b).data());
        Ok(self.push(Op::ConcatChannels, vec![a, b], out))
    }

    /// Elementwise `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let mut out = Tensor::zeros(self.shape(x));
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[x.0].tensor.data()) {
            *o = scale * v + shift;
        }
        self.push(Op::Affine { scale }, vec![x], out)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.affine(x, factor, 0.0)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(total))
    }

    /// Mean squared error over all elements; scalar output.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape(pred, target, "mse")?;
        let n = self.value(pred).len() as f64;
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(Op::Mse, vec![pred, target], Tensor::scalar(total / n)))
    }

    /// MSE restricted to elements where `mask` is nonzero, normalized by
    /// the mask sum. An all-zero mask yields loss 0 with zero gradient.
    pub fn masked_mse(&mut self, pred: NodeId, target: NodeId, mask: NodeId) -> Result<NodeId> {
        self.same_shape(pred, target, "masked_mse")?;
        self.same_shape(pred, mask, "masked_mse")?;
        let count: f64 = self.value(mask).data().iter().sum();
        let value = if count > 0.0 {
            let total: f64 = self
                .value(pred)
                .data()
                .iter()
                .zip(self.value(target).data())
                .zip(self.value(mask).data())
                .map(|((p, t), m)| m * (p - t) * (p - t))
                .sum();
            total / count
        } else {
            0.0
        };
        Ok(self.push(
            Op::MaskedMse { count },
            vec![pred, target, mask],
            Tensor::scalar(value),
        ))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    fn same_shape(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape(a).to_vec(),
                actual: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss. Adjoints are rebuilt from
    /// scratch on every call and then added into the grad buffers of
    /// `requires_grad` leaves, so consecutive calls accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::NonScalarLoss(
                self.nodes[loss.0].tensor.shape().to_vec(),
            ));
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .take(loss.0 + 1)
            .map(|n| vec![0.0; n.tensor.len()])
            .collect();
        adj[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let gout = std::mem::take(&mut adj[i]);
            self.propagate(i, &gout, &mut adj);
            adj[i] = gout;
        }

        for (node, a) in self.nodes.iter_mut().zip(&adj) {
            if node.tensor.requires_grad() {
                for (g, v) in node.tensor.grad_mut().iter_mut().zip(a) {
                    *g += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], adj: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Dense => {
                let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let (dx, rest) = split_two(adj, x.0, w.0);
                let db_slot = b.0;
                ops::dense_backward(
                    self.nodes[x.0].tensor.data(),
                    self.nodes[w.0].tensor.data(),
                    gout,
                    dx.filter(|_| wants(x)),
                    rest.filter(|_| wants(w)),
                    None,
                );
                if wants(b) {
                    for (d, g) in adj[db_slot].iter_mut().zip(gout) {
                        *d += g;
                    }
                }
            }
            Op::Conv2d { stride, padding } => {
                let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xs = self.nodes[x.0].tensor.shape().to_vec();
                let ws = self.nodes[w.0].tensor.shape().to_vec();
                let os = node.tensor.shape().to_vec();
                let (dx, dw) = split_two(adj, x.0, w.0);
                ops::conv2d_backward(
                    self.nodes[x.0].tensor.data(),
                    xs[0],
                    xs[1],
                    xs[2],
                    self.nodes[w.0].tensor.data(),
                    ws[0],
                    ws[2],
                    *stride,
                    *padding,
                    gout,
                    os[1],
                    os[2],
                    dx.filter(|_| wants(x)),
                    dw.filter(|_| wants(w)),
                    None,
                );
                if wants(b) {
                    let (c_out, area) = (os[0], os[1] * os[2]);
                    let db = &mut adj[b.0];
                    for oc in 0..c_out {
                        db[oc] += gout[oc * area..(oc + 1) * area].iter().sum::<f64>();
                    }
                }
            }
            Op::Relu => {
                let x = node.inputs[0];
                if wants(x) {
                    let xv = self.nodes[x.0].tensor.data();
                    for ((d, g), v) in adj[x.0].iter_mut().zip(gout).zip(xv) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sigmoid => {
                let x = node.inputs[0];
                if wants(x) {
                    let y = node.tensor.data();
                    for ((d, g), v) in adj[x.0].iter_mut().zip(gout).zip(y) {
                        *d += g * v * (1.0 - v);
                    }
                }
            }
            Op::MaxPool2x2 { argmax } => {
                let x = node.inputs[0];
                if wants(x) {
                    for (slot, g) in argmax.iter().zip(gout) {
                        adj[x.0][*slot as usize] += g;
                    }
                }
            }
            Op::AvgPool2x2 => {
                let x = node.inputs[0];
                if wants(x) {
                    let s = self.nodes[x.0].tensor.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (ho, wo) = (h / 2, w / 2);
                    let dx = &mut adj[x.0];
                    for ic in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = 0.25 * gout[(ic * ho + oy) * wo + ox];
                                let base = (ic * h + oy * 2) * w + ox * 2;
                                dx[base] += g;
                                dx[base + 1] += g;
                                dx[base + w] += g;
                                dx[base + w + 1] += g;
                            }
                        }
                    }
                }
            }
            Op::Upsample2x => {
                let x = node.inputs[0];
                if wants(x) {
                    let s = self.nodes[x.0].tensor.shape();
                    ops::upsample2x_backward(gout, s[0], s[1], s[2], &mut adj[x.0]);
                }
            }
            Op::Flatten => {
                let x = node.inputs[0];
                if wants(x) {
                    for (d, g) in adj[x.0].iter_mut().zip(gout) {
                        *d += g;
                    }
                }
            }
            Op::Add => {
                for &inp in &node.inputs {
                    if wants(inp) {
                        for (d, g) in adj[inp.0].iter_mut().zip(gout) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if wants(a) {
                    let bv = self.nodes[b.0].tensor.data();
                    for ((d, g), v) in adj[a.0].iter_mut().zip(gout).zip(bv) {
                        *d += g * v;
                    }
                }
                if wants(b) {
                    let av = self.nodes[a.0].tensor.data();
                    for ((d, g), v) in adj[b.0].iter_mut().zip(gout).zip(av) {
                        *d += g * v;
                    }
                }
            }
            Op::ConcatChannels => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let split = self.nodes[a.0].tensor.len();
                if wants(a) {
                    for (d, g) in adj[a.0].iter_mut().zip(&gout[..split]) {
                        *d += g;
                    }
                }
                if wants(b) {
                    for (d, g) in adj[b.0].iter_mut().zip(&gout[split..]) {
                        *d += g;
                    }
                }
            }
            Op::Affine { scale, .. } => {
                let x = node.inputs[0];
                if wants(x) {
                    for (d, g) in adj[x.0].iter_mut().zip(gout) {
                        *d += scale * g;
                    }
                }
            }
            Op::Sum => {
                let x = node.inputs[0];
                if wants(x) {
                    let g = gout[0];
                    for d in adj[x.0].iter_mut() {
                        *d += g;
                    }
                }
            }
            Op::Mse => {
                let (p, t) = (node.inputs[0], node.inputs[1]);
                let n = self.nodes[p.0].tensor.len() as f64;
                let g = gout[0];
                let pv = self.nodes[p.0].tensor.data();
                let tv = self.nodes[t.0].tensor.data();
                if wants(p) {
                    for ((d, pvi), tvi) in adj[p.0].iter_mut().zip(pv).zip(tv) {
                        *d += g * 2.0 * (pvi - tvi) / n;
                    }
                }
                if wants(t) {
                    for ((d, pvi), tvi) in adj[t.0].iter_mut().zip(pv).zip(tv) {
                        *d -= g * 2.0 * (pvi - tvi) / n;
                    }
                }
            }
            Op::MaskedMse { count } => {
                if *count == 0.0 {
                    return;
                }
                let (p, t, m) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let g = gout[0];
                let pv = self.nodes[p.0].tensor.data();
                let tv = self.nodes[t.0].tensor.data();
                let mv = self.nodes[m.0].tensor.data();
                if wants(p) {
                    for (i, d) in adj[p.0].iter_mut().enumerate() {
                        *d += g * 2.0 * mv[i] * (pv[i] - tv[i]) / count;
                    }
                }
                if wants(t) {
                    for (i, d) in adj[t.0].iter_mut().enumerate() {
                        *d -= g * 2.0 * mv[i] * (pv[i] - tv[i]) / count;
                    }
                }
            }
        }
    }
}

/// Mutable access to two distinct adjoint slots.
fn split_two(
    adj: &mut [Vec<f64>],
    a: usize,
    b: usize,
) -> (Option<&mut [f64]>, Option<&mut [f64]>) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = adj.split_at_mut(b);
        (Some(&mut lo[a]), Some(&mut hi[0]))
    } else {
        let (lo, hi) = adj.split_at_mut(a);
        (Some(&mut hi[0]), Some(&mut lo[b]))
    }
}
