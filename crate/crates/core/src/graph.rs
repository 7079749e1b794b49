//! Tape-based reverse-mode differentiation over a closed operator set.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and the backward pass is a single reverse sweep.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::params::{network_of, ParamSet};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    /// `x[B,in] · w[out,in]ᵀ + b[out]`
    Linear { x: NodeId, w: NodeId, b: NodeId },
    /// Valid (unpadded) 2-D convolution, `x[B,C,H,W]`, `w[O,C,K,K]`.
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Adaptive average pooling of `x[B,C,H,W]` to `[B,C,oh,ow]`.
    AdaptiveAvgPool { x: NodeId, out: (usize, usize) },
    /// Mean over the channel axis: `[B,C,H,W] -> [B,H*W]`.
    ChannelMean(NodeId),
    Reshape(NodeId),
    /// Column-wise concatenation of 2-D tensors.
    Concat(Vec<NodeId>),
    SelectCols { x: NodeId, cols: Vec<usize> },
    GatherRows { x: NodeId, rows: Vec<usize> },
    /// `y[i] = x[i, idx[i]]`
    PickPerRow { x: NodeId, idx: Vec<usize> },
    /// Row-wise Euclidean norm `[B,d] -> [B]`.
    RowNorm(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    SoftmaxXent { logits: NodeId, labels: Vec<usize> },
    Detach(NodeId),
    ReverseGrad(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            Op::ChannelMean(_) => "channel_mean",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::SelectCols { .. } => "select_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::PickPerRow { .. } => "pick_per_row",
            Op::RowNorm(_) => "row_norm",
            Op::Mean(_) => "mean",
            Op::Mse(..) => "mse",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Detach(_) => "detach",
            Op::ReverseGrad(_) => "reverse_grad",
        }
    }
}

struct Node<'p, S: Real> {
    op: Op,
    value: Cow<'p, Tensor<S>>,
    requires_grad: bool,
}

/// Trainability policy applied when parameters are bound into a graph.
#[derive(Debug, Clone, Default)]
pub struct Frozen {
    networks: Vec<String>,
    only_trainable: Option<Vec<String>>,
}

impl Frozen {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn networks(names: &[&str]) -> Self {
        Self { networks: names.iter().map(|s| String::from(*s)).collect(), only_trainable: None }
    }

    pub fn all() -> Self {
        Self { networks: vec![String::from("*")], only_trainable: None }
    }

    /// Freezes every network except `names`.
    pub fn all_except(names: &[&str]) -> Self {
        Self { networks: Vec::new(), only_trainable: Some(names.iter().map(|s| String::from(*s)).collect()) }
    }

    fn is_frozen(&self, param: &str) -> bool {
        let net = network_of(param);
        if let Some(keep) = &self.only_trainable {
            return !keep.iter().any(|n| n == net);
        }
        self.networks.iter().any(|n| n == "*" || n == net)
    }
}

/// A computation graph borrowing its parameters for lifetime `'p`.
pub struct Graph<'p, S: Real> {
    nodes: Vec<Node<'p, S>>,
    params: &'p ParamSet<S>,
    bound: BTreeMap<String, NodeId>,
    frozen: Frozen,
}

/// Gradients of a scalar loss with respect to every trainable parameter.
pub struct Gradients<S: Real> {
    pub params: ParamSet<S>,
    node_grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of the loss with respect to an arbitrary node, if any flowed.
    pub fn node(&self, id: NodeId) -> Option<&[S]> {
        self.node_grads.get(id.0).and_then(|g| g.as_deref())
    }
}

fn check_finite<S: Real>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<'p, S: Real> Graph<'p, S> {
    pub fn new(params: &'p ParamSet<S>, frozen: Frozen) -> Self {
        Self { nodes: Vec::new(), params, bound: BTreeMap::new(), frozen }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor<S>) -> Result<NodeId> {
        check_finite(op.name(), &value)?;
        let requires_grad = match &op {
            Op::Input | Op::Param | Op::Detach(_) => false,
            other => inputs_of(other).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, value: Cow::Owned(value), requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Binds a constant (non-differentiable) input tensor.
    pub fn input(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.push(Op::Input, value)
    }

    /// Binds a named parameter; repeated binds return the same node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(id) = self.bound.get(name) {
            return Ok(*id);
        }
        let params = self.params;
        let value = params.get(name)?;
        check_finite("param", value)?;
        let requires_grad = !self.frozen.is_frozen(name);
        self.nodes.push(Node { op: Op::Param, value: Cow::Borrowed(value), requires_grad });
        let id = NodeId(self.nodes.len() - 1);
        self.bound.insert(String::from(name), id);
        Ok(id)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs != [ws[0]] || xs[1] != ws[1] {
            return Err(shape_err("linear", format!("x {:?}, w {:?}, b {:?}", xs, ws, bs)));
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(batch * fan_out);
        let bias = self.value(b).data();
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        S::gemm(
            batch,
            fan_in,
            fan_out,
            self.value(x).data(),
            (fan_in, 1),
            self.value(w).data(),
            (1, fan_in),
            S::ONE,
            &mut out,
            (fan_out, 1),
        );
        self.push(Op::Linear { x, w, b }, Tensor::new(vec![batch, fan_out], out)?)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || bs != [ws[0]] {
            return Err(shape_err("conv2d", format!("x {:?}, w {:?}, b {:?}", xs, ws, bs)));
        }
        if stride == 0 || xs[2] < ws[2] || xs[3] < ws[3] {
            return Err(shape_err("conv2d", format!("kernel {:?} on {:?}", ws, xs)));
        }
        let geo = ConvGeometry::new(xs, ws, stride);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![S::ZERO; geo.batch * geo.out_ch * geo.positions()];
        let mut cols = vec![S::ZERO; geo.patch() * geo.positions()];
        for n in 0..geo.batch {
            geo.im2col(&xv[n * geo.sample_in()..(n + 1) * geo.sample_in()], &mut cols);
            let y = &mut out[n * geo.sample_out()..(n + 1) * geo.sample_out()];
            for (o, chunk) in y.chunks_mut(geo.positions()).enumerate() {
                chunk.fill(bv[o]);
            }
            S::gemm(
                geo.out_ch,
                geo.patch(),
                geo.positions(),
                wv,
                (geo.patch(), 1),
                &cols,
                (geo.positions(), 1),
                S::ONE,
                y,
                (geo.positions(), 1),
            );
        }
        let shape = vec![geo.batch, geo.out_ch, geo.out_h, geo.out_w];
        self.push(Op::Conv2d { x, w, b, stride }, Tensor::new(shape, out)?)
    }

    fn map_unary(&mut self, x: NodeId, op: Op, f: impl Fn(S) -> S) -> Result<NodeId> {
        let v = self.value(x);
        let out = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(op, t)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, Op::Relu(x), |a| if a > S::ZERO { a } else { S::ZERO })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, Op::Tanh(x), |a| a.tanh())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, Op::Exp(x), |a| a.exp())
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let f = S::from_f64(factor);
        self.map_unary(x, Op::Scale(x, factor), |a| a * f)
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(S, S) -> S) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        self.push(op, t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn adaptive_avg_pool(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || out_h == 0 || out_w == 0 || xs[2] < out_h || xs[3] < out_w {
            return Err(shape_err("adaptive_avg_pool", format!("{:?} -> {}x{}", xs, out_h, out_w)));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for i in 0..out_h {
                let (r0, r1) = pool_bin(i, h, out_h);
                for j in 0..out_w {
                    let (c0, c1) = pool_bin(j, w, out_w);
                    let mut acc = S::ZERO;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            acc += plane[r * w + c];
                        }
                    }
                    out.push(acc / S::from_f64(((r1 - r0) * (c1 - c0)) as f64));
                }
            }
        }
        let t = Tensor::new(vec![xs[0], xs[1], out_h, out_w], out)?;
        self.push(Op::AdaptiveAvgPool { x, out: (out_h, out_w) }, t)
    }

    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] == 0 {
            return Err(shape_err("channel_mean", format!("{:?}", xs)));
        }
        let (batch, ch, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let inv = S::ONE / S::from_f64(ch as f64);
        let mut out = vec![S::ZERO; batch * plane];
        for n in 0..batch {
            let dst = &mut out[n * plane..(n + 1) * plane];
            for c in 0..ch {
                let src = &xv[(n * ch + c) * plane..(n * ch + c + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        self.push(Op::ChannelMean(x), Tensor::new(vec![batch, plane], out)?)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), t)
    }

    /// Flattens `[B, ...]` into `[B, rest]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let b = xs[0];
        let rest = numel(&xs[1..]);
        self.reshape(x, &[b, rest])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(invalid("concat of zero tensors"));
        }
        let batch = self.shape(parts[0])[0];
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != batch {
                return Err(shape_err("concat", format!("part {:?}, batch {}", s, batch)));
            }
        }
        let width: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
        let mut out = Vec::with_capacity(batch * width);
        for r in 0..batch {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::new(vec![batch, width], out)?)
    }

    pub fn select_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 2 || cols.iter().any(|&c| c >= xs[1]) {
            return Err(shape_err("select_cols", format!("{:?} with cols {:?}", xs, cols)));
        }
        let batch = xs[0];
        let v = self.value(x);
        let mut out = Vec::with_capacity(batch * cols.len());
        for r in 0..batch {
            let row = v.row(r);
            out.extend(cols.iter().map(|&c| row[c]));
        }
        let t = Tensor::new(vec![batch, cols.len()], out)?;
        self.push(Op::SelectCols { x, cols: cols.to_vec() }, t)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.is_empty() || rows.iter().any(|&r| r >= xs[0]) {
            return Err(shape_err("gather_rows", format!("{:?} with rows {:?}", xs, rows)));
        }
        let row_len = numel(&xs[1..]);
        let mut shape = xs.to_vec();
        shape[0] = rows.len();
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            out.extend_from_slice(&v[r * row_len..(r + 1) * row_len]);
        }
        let t = Tensor::new(shape, out)?;
        self.push(Op::GatherRows { x, rows: rows.to_vec() }, t)
    }

    pub fn pick_per_row(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 2 || idx.len() != xs[0] || idx.iter().any(|&i| i >= xs[1]) {
            return Err(shape_err("pick_per_row", format!("{:?} with {} indices", xs, idx.len())));
        }
        let v = self.value(x);
        let out = idx.iter().enumerate().map(|(r, &c)| v.row(r)[c]).collect();
        let t = Tensor::new(vec![idx.len()], out)?;
        self.push(Op::PickPerRow { x, idx: idx.to_vec() }, t)
    }

    pub fn row_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(shape_err("row_norm", format!("{:?}", xs)));
        }
        let v = self.value(x);
        let out = (0..xs[0])
            .map(|r| {
                let mut acc = S::ZERO;
                for a in v.row(r) {
                    acc += *a * *a;
                }
                acc.sqrt()
            })
            .collect();
        let t = Tensor::new(vec![xs[0]], out)?;
        self.push(Op::RowNorm(x), t)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape_err("mean", format!("{:?}", v.shape())));
        }
        let mut acc = S::ZERO;
        for a in v.data() {
            acc += *a;
        }
        let m = acc / S::from_f64(v.len() as f64);
        self.push(Op::Mean(x), Tensor::scalar(m))
    }

    /// Mean squared error over every element; gradients flow into both operands.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) || self.value(a).is_empty() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut acc = S::ZERO;
        for (p, q) in va.iter().zip(vb) {
            let d = *p - *q;
            acc += d * d;
        }
        let m = acc / S::from_f64(va.len() as f64);
        self.push(Op::Mse(a, b), Tensor::scalar(m))
    }

    /// Mean softmax cross-entropy of `logits[B,A]` against integer labels.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.shape(logits);
        if ls.len() != 2 || labels.len() != ls[0] || labels.iter().any(|&l| l >= ls[1]) || ls[0] == 0 {
            return Err(shape_err("softmax_xent", format!("{:?} with {} labels", ls, labels.len())));
        }
        let v = self.value(logits);
        let mut acc = S::ZERO;
        for (r, &label) in labels.iter().enumerate() {
            let row = v.row(r);
            acc += log_sum_exp(row) - row[label];
        }
        let m = acc / S::from_f64(labels.len() as f64);
        self.push(Op::SoftmaxXent { logits, labels: labels.to_vec() }, Tensor::scalar(m))
    }

    /// Identity in the forward pass; blocks all upstream gradient.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x).clone();
        self.push(Op::Detach(x), t)
    }

    /// Identity in the forward pass; negates the upstream gradient.
    pub fn reverse_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x).clone();
        self.push(Op::ReverseGrad(x), t)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 || ls.len() > 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: node.op.name() });
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut params = ParamSet::new();
        for (name, id) in &self.bound {
            if !self.nodes[id.0].requires_grad {
                continue;
            }
            let shape = self.nodes[id.0].value.shape().to_vec();
            let data = grads[id.0].clone().unwrap_or_else(|| vec![S::ZERO; numel(&shape)]);
            params.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(Gradients { params, node_grads: grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor<S>,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) -> Result<()> {
        match op {
            Op::Input | Op::Param | Op::Detach(_) => {}
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, fan_in) = (xs[0], xs[1]);
                let fan_out = self.shape(*w)[0];
                if self.wants(*x) {
                    let dx = slot(grads, *x, batch * fan_in);
                    S::gemm(
                        batch,
                        fan_out,
                        fan_in,
                        g,
                        (fan_out, 1),
                        self.value(*w).data(),
                        (fan_in, 1),
                        S::ONE,
                        dx,
                        (fan_in, 1),
                    );
                }
                if self.wants(*w) {
                    let dw = slot(grads, *w, fan_out * fan_in);
                    S::gemm(
                        fan_out,
                        batch,
                        fan_in,
                        g,
                        (1, fan_out),
                        self.value(*x).data(),
                        (fan_in, 1),
                        S::ONE,
                        dw,
                        (fan_in, 1),
                    );
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, fan_out);
                    for r in 0..batch {
                        for (d, v) in db.iter_mut().zip(&g[r * fan_out..(r + 1) * fan_out]) {
                            *d += *v;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let geo = ConvGeometry::new(self.shape(*x), self.shape(*w), *stride);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let mut cols = vec![S::ZERO; geo.patch() * geo.positions()];
                if want_w {
                    let mut dw = vec![S::ZERO; geo.out_ch * geo.patch()];
                    for n in 0..geo.batch {
                        geo.im2col(&xv[n * geo.sample_in()..(n + 1) * geo.sample_in()], &mut cols);
                        let gy = &g[n * geo.sample_out()..(n + 1) * geo.sample_out()];
                        S::gemm(
                            geo.out_ch,
                            geo.positions(),
                            geo.patch(),
                            gy,
                            (geo.positions(), 1),
                            &cols,
                            (1, geo.positions()),
                            S::ONE,
                            &mut dw,
                            (geo.patch(), 1),
                        );
                    }
                    add_into(slot(grads, *w, dw.len()), &dw);
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, geo.out_ch);
                    for n in 0..geo.batch {
                        let gy = &g[n * geo.sample_out()..(n + 1) * geo.sample_out()];
                        for (o, chunk) in gy.chunks(geo.positions()).enumerate() {
                            let mut acc = S::ZERO;
                            for v in chunk {
                                acc += *v;
                            }
                            db[o] += acc;
                        }
                    }
                }
                if want_x {
                    let mut dx = vec![S::ZERO; geo.batch * geo.sample_in()];
                    for n in 0..geo.batch {
                        let gy = &g[n * geo.sample_out()..(n + 1) * geo.sample_out()];
                        S::gemm(
                            geo.patch(),
                            geo.out_ch,
                            geo.positions(),
                            wv,
                            (1, geo.patch()),
                            gy,
                            (geo.positions(), 1),
                            S::ZERO,
                            &mut cols,
                            (geo.positions(), 1),
                        );
                        geo.col2im_add(
                            &cols,
                            &mut dx[n * geo.sample_in()..(n + 1) * geo.sample_in()],
                        );
                    }
                    add_into(slot(grads, *x, dx.len()), &dx);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = slot(grads, *x, g.len());
                for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xv) {
                    if *xv > S::ZERO {
                        *d += *gv;
                    }
                }
            }
            Op::Tanh(x) => {
                let dx = slot(grads, *x, g.len());
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += *gv * (S::ONE - *y * *y);
                }
            }
            Op::Sigmoid(x) => {
                let dx = slot(grads, *x, g.len());
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += *gv * *y * (S::ONE - *y);
                }
            }
            Op::Exp(x) => {
                let dx = slot(grads, *x, g.len());
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += *gv * *y;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -S::ONE } else { S::ONE };
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, g.len());
                    for (d, v) in db.iter_mut().zip(g) {
                        *d += sign * *v;
                    }
                }
            }
            Op::Scale(x, factor) => {
                let f = S::from_f64(*factor);
                let dx = slot(grads, *x, g.len());
                for (d, v) in dx.iter_mut().zip(g) {
                    *d += f * *v;
                }
            }
            Op::AdaptiveAvgPool { x, out: (out_h, out_w) } => {
                let xs = self.shape(*x);
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let dx = slot(grads, *x, planes * h * w);
                for p in 0..planes {
                    let plane = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..*out_h {
                        let (r0, r1) = pool_bin(i, h, *out_h);
                        for j in 0..*out_w {
                            let (c0, c1) = pool_bin(j, w, *out_w);
                            let share = g[(p * out_h + i) * out_w + j]
                                / S::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                            for r in r0..r1 {
                                for c in c0..c1 {
                                    plane[r * w + c] += share;
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelMean(x) => {
                let xs = self.shape(*x);
                let (batch, ch, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let inv = S::ONE / S::from_f64(ch as f64);
                let dx = slot(grads, *x, batch * ch * plane);
                for n in 0..batch {
                    let gy = &g[n * plane..(n + 1) * plane];
                    for c in 0..ch {
                        let dst = &mut dx[(n * ch + c) * plane..(n * ch + c + 1) * plane];
                        for (d, v) in dst.iter_mut().zip(gy) {
                            *d += *v * inv;
                        }
                    }
                }
            }
            Op::Reshape(x) | Op::ReverseGrad(x) => {
                let dx = slot(grads, *x, g.len());
                if matches!(op, Op::ReverseGrad(_)) {
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d -= *v;
                    }
                } else {
                    add_into(dx, g);
                }
            }
            Op::Concat(parts) => {
                let batch = out.shape()[0];
                let width = out.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let pw = self.shape(*p)[1];
                    if self.wants(*p) {
                        let dp = slot(grads, *p, batch * pw);
                        for r in 0..batch {
                            let src = &g[r * width + offset..r * width + offset + pw];
                            add_into(&mut dp[r * pw..(r + 1) * pw], src);
                        }
                    }
                    offset += pw;
                }
            }
            Op::SelectCols { x, cols } => {
                let xs = self.shape(*x);
                let (batch, width) = (xs[0], xs[1]);
                let dx = slot(grads, *x, batch * width);
                for r in 0..batch {
                    for (k, &c) in cols.iter().enumerate() {
                        dx[r * width + c] += g[r * cols.len() + k];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let xs = self.shape(*x);
                let row_len = numel(&xs[1..]);
                let dx = slot(grads, *x, xs[0] * row_len);
                for (k, &r) in rows.iter().enumerate() {
                    add_into(
                        &mut dx[r * row_len..(r + 1) * row_len],
                        &g[k * row_len..(k + 1) * row_len],
                    );
                }
            }
            Op::PickPerRow { x, idx } => {
                let width = self.shape(*x)[1];
                let dx = slot(grads, *x, idx.len() * width);
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * width + c] += g[r];
                }
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let width = xv.shape()[1];
                let dx = slot(grads, *x, xv.len());
                for (r, n) in out.data().iter().enumerate() {
                    // subgradient 0 at the origin
                    if *n > S::ZERO {
                        let f = g[r] / *n;
                        for (d, a) in dx[r * width..(r + 1) * width].iter_mut().zip(xv.row(r)) {
                            *d += f * *a;
                        }
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let share = g[0] / S::from_f64(n as f64);
                for d in slot(grads, *x, n).iter_mut() {
                    *d += share;
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let f = S::from_f64(2.0) * g[0] / S::from_f64(va.len() as f64);
                if self.wants(*a) {
                    let da = slot(grads, *a, va.len());
                    for ((d, p), q) in da.iter_mut().zip(va).zip(vb) {
                        *d += f * (*p - *q);
                    }
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, vb.len());
                    for ((d, p), q) in db.iter_mut().zip(va).zip(vb) {
                        *d -= f * (*p - *q);
                    }
                }
            }
            Op::SoftmaxXent { logits, labels } => {
                let v = self.value(*logits);
                let width = v.shape()[1];
                let f = g[0] / S::from_f64(labels.len() as f64);
                let dl = slot(grads, *logits, v.len());
                for (r, &label) in labels.iter().enumerate() {
                    let row = v.row(r);
                    let lse = log_sum_exp(row);
                    for (c, a) in row.iter().enumerate() {
                        let mut p = (*a - lse).exp();
                        if c == label {
                            p -= S::ONE;
                        }
                        dl[r * width + c] += f * p;
                    }
                }
            }
        }
        Ok(())
    }
}

fn inputs_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Input | Op::Param => Vec::new(),
        Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
        Op::Relu(x)
        | Op::Tanh(x)
        | Op::Sigmoid(x)
        | Op::Exp(x)
        | Op::Scale(x, _)
        | Op::ChannelMean(x)
        | Op::Reshape(x)
        | Op::RowNorm(x)
        | Op::Mean(x)
        | Op::Detach(x)
        | Op::ReverseGrad(x) => vec![*x],
        Op::AdaptiveAvgPool { x, .. }
        | Op::SelectCols { x, .. }
        | Op::GatherRows { x, .. }
        | Op::PickPerRow { x, .. } => vec![*x],
        Op::SoftmaxXent { logits, .. } => vec![*logits],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mse(a, b) => vec![*a, *b],
        Op::Concat(parts) => parts.clone(),
    }
}

fn slot<S: Real>(grads: &mut [Option<Vec<S>>], id: NodeId, len: usize) -> &mut [S] {
    grads[id.0].get_or_insert_with(|| vec![S::ZERO; len])
}

fn add_into<S: Real>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub(crate) fn sigmoid<S: Real>(a: S) -> S {
    if a >= S::ZERO {
        S::ONE / (S::ONE + (-a).exp())
    } else {
        let e = a.exp();
        e / (S::ONE + e)
    }
}

pub(crate) fn log_sum_exp<S: Real>(row: &[S]) -> S {
    let m = row.iter().copied().fold(row[0], S::max);
    let mut acc = S::ZERO;
    for a in row {
        acc += (*a - m).exp();
    }
    m + acc.ln()
}

/// Bin `[start, end)` of adaptive pooling output cell `i`.
pub(crate) fn pool_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize) -> Self {
        let kernel = ws[2];
        Self {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ws[0],
            kernel,
            stride,
            out_h: conv_out_len(xs[2], kernel, stride),
            out_w: conv_out_len(xs[3], kernel, stride),
        }
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn sample_in(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn sample_out(&self) -> usize {
        self.out_ch * self.positions()
    }

    /// `cols[(c,ki,kj), (oi,oj)] = x[c, oi*s+ki, oj*s+kj]`
    fn im2col<S: Real>(&self, x: &[S], cols: &mut [S]) {
        let p = self.positions();
        let k = self.kernel;
        for c in 0..self.in_ch {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * p;
                    let dst = &mut cols[row..row + p];
                    for oi in 0..self.out_h {
                        let src_row = (oi * self.stride + ki) * self.in_w + kj;
                        let d = &mut dst[oi * self.out_w..(oi + 1) * self.out_w];
                        if self.stride == 1 {
                            d.copy_from_slice(&plane[src_row..src_row + self.out_w]);
                        } else {
                            for (oj, v) in d.iter_mut().enumerate() {
                                *v = plane[src_row + oj * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<S: Real>(&self, cols: &[S], dx: &mut [S]) {
        let p = self.positions();
        let k = self.kernel;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * p;
                    let src = &cols[row..row + p];
                    for oi in 0..self.out_h {
                        let dst_row = (oi * self.stride + ki) * self.in_w + kj;
                        let s = &src[oi * self.out_w..(oi + 1) * self.out_w];
                        if self.stride == 1 {
                            add_into(&mut plane[dst_row..dst_row + self.out_w], s);
                        } else {
                            for (oj, v) in s.iter().enumerate() {
                                plane[dst_row + oj * self.stride] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output length of a valid convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}
