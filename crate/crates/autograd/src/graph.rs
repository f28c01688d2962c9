use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Rc<Tensor>),
    MulChannel(Var, Var),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    UpsampleNearest(Var, usize),
    Bilinear(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    LogClamped(Var, f64),
    LogSigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    MeanAll(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    PickLabels(Var, Rc<Vec<u8>>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape. Build a fresh graph for every forward pass.
///
/// Ops take `&self` so calls nest (`g.relu(g.conv2d(..))`). Shape errors
/// are programming errors and panic with the offending shapes.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bindings: RefCell<HashMap<(u64, ParamId), Var>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    bindings: HashMap<(u64, ParamId), Var>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for one parameter of `store`, if it was bound trainable and
    /// reached by the backward pass.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.bindings.get(&(store.uid(), id)).and_then(|v| self.get(*v))
    }

    /// Dense gradient list for `store`, zeros where nothing flowed.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.param(store, id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.val(v)
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes: Ref<'_, Vec<Node>> = self.nodes.borrow();
        f(&nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable free input (gradient retrievable via [`Grads::get`]).
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Same value as `v`, cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.val(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(nodes.len() - 1)
    }

    /// Binds a parameter of `store` as a leaf. Repeated binds return the
    /// same node. Frozen bindings still propagate gradients to their
    /// inputs but accumulate nothing for the parameter itself.
    pub fn param(&self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let key = (store.uid(), id);
        if let Some(v) = self.bindings.borrow().get(&key) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.bindings.borrow_mut().insert(key, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> (Rc<Tensor>, Rc<Tensor>) {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.shape(), tb.shape(), "{what}: shape mismatch");
        (ta, tb)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = self.same_shape(a, b, "add");
        let out = ta.zip_map(&tb, |x, y| x + y);
        self.push(out, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = self.same_shape(a, b, "sub");
        let out = ta.zip_map(&tb, |x, y| x - y);
        self.push(out, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (ta, tb) = self.same_shape(a, b, "mul");
        let out = ta.zip_map(&tb, |x, y| x * y);
        self.push(out, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.val(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), self.needs(a))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.val(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), self.needs(a))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, a: Var, c: Tensor) -> Var {
        let ta = self.val(a);
        assert_eq!(ta.shape(), c.shape(), "mul_const: shape mismatch");
        let out = ta.zip_map(&c, |x, y| x * y);
        self.push(out, Op::MulConst(a, Rc::new(c)), self.needs(a))
    }

    /// `x[B,C,H,W] * w[B,1,H,W]`, broadcasting `w` over channels.
    pub fn mul_channel(&self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.val(x), self.val(w));
        let (n, c, h, wd) = tx.dims4();
        assert_eq!(tw.shape(), &[n, 1, h, wd], "mul_channel: weight shape");
        let hw = h * wd;
        let mut out = vec![0.0; tx.numel()];
        for b in 0..n {
            let ws = &tw.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for p in 0..hw {
                    out[off + p] = tx.data()[off + p] * ws[p];
                }
            }
        }
        let t = Tensor::from_vec(tx.shape(), out);
        self.push(t, Op::MulChannel(x, w), self.needs(x) || self.needs(w))
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn concat(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|v| self.val(*v)).collect();
        let (n, _, h, w) = vals[0].dims4();
        let mut total_c = 0;
        for v in &vals {
            let (vn, vc, vh, vw) = v.dims4();
            assert_eq!((vn, vh, vw), (n, h, w), "concat: shape mismatch");
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for v in &vals {
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let needs = xs.iter().any(|v| self.needs(*v));
        self.push(Tensor::from_vec(&[n, total_c, h, w], out), Op::Concat(xs.to_vec()), needs)
    }

    /// Channels `start..start+len` of a rank-4 tensor.
    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.val(x);
        let (n, c, h, w) = tx.dims4();
        assert!(start + len <= c, "slice_channels: {start}+{len} > {c}");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&tx.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        self.push(Tensor::from_vec(&[n, len, h, w], out), Op::SliceChannels(x, start), self.needs(x))
    }

    /// 2-D convolution. `w` is `[out, in, k, k]`, `b` is `[out]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (self.val(x), self.val(w));
        let (n, c, h, wd) = tx.dims4();
        let ws = tw.shape();
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        assert_eq!(ws[1], c, "conv2d: input has {c} channels, weight expects {}", ws[1]);
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        assert!(h + 2 * pad >= ws[2] && wd + 2 * pad >= ws[2], "conv2d: kernel larger than input");
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            in_h: h,
            in_w: wd,
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let tb = b.map(|b| self.val(b));
        if let Some(tb) = &tb {
            assert_eq!(tb.shape(), &[ws[0]], "conv2d: bias shape");
        }
        let (out, cols) = kernels::conv2d_forward(tx.data(), tw.data(), tb.as_ref().map(|t| t.data()), &geom);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        // Columns are only needed to form the weight gradient.
        let cols = if self.needs(w) { cols } else { Vec::new() };
        let t = Tensor::from_vec(&[n, geom.out_ch, geom.out_h(), geom.out_w()], out);
        self.push(t, Op::Conv2d { x, w, b, geom, cols }, needs)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Var {
        let tx = self.val(x);
        let (n, c, h, w) = tx.dims4();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &tx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        self.push(Tensor::from_vec(&[n, c, oh, ow], out), Op::UpsampleNearest(x, factor), self.needs(x))
    }

    /// Bilinear resize (half-pixel centres) to `[oh, ow]`.
    pub fn resize_bilinear(&self, x: Var, oh: usize, ow: usize) -> Var {
        let tx = self.val(x);
        let (n, c, h, w) = tx.dims4();
        if (h, w) == (oh, ow) {
            return x;
        }
        let out = kernels::bilinear_forward(tx.data(), n * c, h, w, oh, ow);
        self.push(Tensor::from_vec(&[n, c, oh, ow], out), Op::Bilinear(x), self.needs(x))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.val(x).map(f);
        self.push(out, op, self.needs(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&self, x: Var, eps: f64) -> Var {
        self.unary(x, |v| v.max(eps).ln(), Op::LogClamped(x, eps))
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    /// Softmax over the channel axis of a rank-4 tensor.
    pub fn softmax_channels(&self, x: Var) -> Var {
        let tx = self.val(x);
        let (n, c, h, w) = tx.dims4();
        let out = kernels::channel_softmax(tx.data(), n, c, h * w, false);
        self.push(Tensor::from_vec(tx.shape(), out), Op::Softmax(x), self.needs(x))
    }

    pub fn log_softmax_channels(&self, x: Var) -> Var {
        let tx = self.val(x);
        let (n, c, h, w) = tx.dims4();
        let out = kernels::channel_softmax(tx.data(), n, c, h * w, true);
        self.push(Tensor::from_vec(tx.shape(), out), Op::LogSoftmax(x), self.needs(x))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.val(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), self.needs(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = self.val(x).mean();
        self.push(Tensor::scalar(s), Op::MeanAll(x), self.needs(x))
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let tx = self.val(x);
        let (n, c, h, w) = tx.dims4();
        let hw = h * w;
        let out: Vec<f64> = tx.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.push(Tensor::from_vec(&[n, c], out), Op::GlobalAvgPool(x), self.needs(x))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let t = (*self.val(x)).clone().reshape(shape);
        self.push(t, Op::Reshape(x), self.needs(x))
    }

    /// For `x[B,L,H,W]` and labels `[B,H,W]` in `0..=L`, returns `[B,H,W]`
    /// holding `x[b, label-1, h, w]`, or 0 where the label is 0.
    pub fn pick_labels(&self, x: Var, labels: &[u8]) -> Var {
        let tx = self.val(x);
        let (n, c, h, w) = tx.dims4();
        let hw = h * w;
        assert_eq!(labels.len(), n * hw, "pick_labels: label count");
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let l = labels[b * hw + p] as usize;
                if l > 0 {
                    assert!(l <= c, "label {l} exceeds class count {c}");
                    out[b * hw + p] = tx.data()[(b * c + l - 1) * hw + p];
                }
            }
        }
        let t = Tensor::from_vec(&[n, h, w], out);
        self.push(t, Op::PickLabels(x, Rc::new(labels.to_vec())), self.needs(x))
    }

    /// Reverse pass from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(nodes[loss.0].value.shape(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(&nodes, node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads {
            grads,
            bindings: self.bindings.borrow().clone(),
        }
    }

    fn backward_node(&self, nodes: &[Node], node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |v: Var| nodes[v.0].needs_grad;
        let value = |v: Var| -> &Tensor { &nodes[v.0].value };
        let mut acc = |v: Var, g: Tensor| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, gout.zip_map(value(*b), |g, y| g * y));
                }
                if needs(*b) {
                    acc(*b, gout.zip_map(value(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => acc(*a, gout.map(|g| g * s)),
            Op::AddScalar(a) => acc(*a, gout.clone()),
            Op::MulConst(a, c) => acc(*a, gout.zip_map(c, |g, y| g * y)),
            Op::MulChannel(x, w) => {
                let tx = value(*x);
                let tw = value(*w);
                let (n, c, h, wd) = tx.dims4();
                let hw = h * wd;
                if needs(*x) {
                    let mut dx = vec![0.0; tx.numel()];
                    for b in 0..n {
                        let ws = &tw.data()[b * hw..(b + 1) * hw];
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for p in 0..hw {
                                dx[off + p] = gout.data()[off + p] * ws[p];
                            }
                        }
                    }
                    acc(*x, Tensor::from_vec(tx.shape(), dx));
                }
                if needs(*w) {
                    let mut dw = vec![0.0; tw.numel()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for p in 0..hw {
                                dw[b * hw + p] += gout.data()[off + p] * tx.data()[off + p];
                            }
                        }
                    }
                    acc(*w, Tensor::from_vec(tw.shape(), dw));
                }
            }
            Op::Concat(xs) => {
                let (n, total_c, h, w) = out.dims4();
                let hw = h * w;
                let mut start = 0;
                for v in xs {
                    let c = value(*v).shape()[1];
                    if needs(*v) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let off = (b * total_c + start) * hw;
                            d.extend_from_slice(&gout.data()[off..off + c * hw]);
                        }
                        acc(*v, Tensor::from_vec(value(*v).shape(), d));
                    }
                    start += c;
                }
            }
            Op::SliceChannels(x, start) => {
                let tx = value(*x);
                let (n, c, h, w) = tx.dims4();
                let len = out.shape()[1];
                let hw = h * w;
                let mut d = vec![0.0; tx.numel()];
                for b in 0..n {
                    let dst = (b * c + start) * hw;
                    d[dst..dst + len * hw].copy_from_slice(&gout.data()[b * len * hw..(b + 1) * len * hw]);
                }
                acc(*x, Tensor::from_vec(tx.shape(), d));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                if needs(*w) {
                    let dw = kernels::conv2d_grad_weight(gout.data(), cols, geom);
                    acc(*w, Tensor::from_vec(value(*w).shape(), dw));
                }
                if let Some(b) = b {
                    if needs(*b) {
                        acc(*b, Tensor::from_vec(&[geom.out_ch], kernels::conv2d_grad_bias(gout.data(), geom)));
                    }
                }
                if needs(*x) {
                    let dx = kernels::conv2d_grad_input(gout.data(), value(*w).data(), geom);
                    acc(*x, Tensor::from_vec(value(*x).shape(), dx));
                }
            }
            Op::UpsampleNearest(x, f) => {
                let tx = value(*x);
                let (n, c, h, w) = tx.dims4();
                let (oh, ow) = (h * f, w * f);
                let mut d = vec![0.0; tx.numel()];
                for p in 0..n * c {
                    let src = &gout.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / f) * w + xx / f] += src[y * ow + xx];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(tx.shape(), d));
            }
            Op::Bilinear(x) => {
                let tx = value(*x);
                let (n, c, h, w) = tx.dims4();
                let (_, _, oh, ow) = out.dims4();
                let d = kernels::bilinear_backward(gout.data(), n * c, h, w, oh, ow);
                acc(*x, Tensor::from_vec(tx.shape(), d));
            }
            Op::Relu(x) => acc(*x, gout.zip_map(value(*x), |g, v| if v > 0.0 { g } else { 0.0 })),
            Op::LeakyRelu(x, s) => acc(*x, gout.zip_map(value(*x), |g, v| if v > 0.0 { g } else { g * s })),
            Op::Sigmoid(x) => acc(*x, gout.zip_map(out, |g, y| g * y * (1.0 - y))),
            Op::Tanh(x) => acc(*x, gout.zip_map(out, |g, y| g * (1.0 - y * y))),
            Op::Exp(x) => acc(*x, gout.zip_map(out, |g, y| g * y)),
            Op::LogClamped(x, eps) => {
                let eps = *eps;
                acc(*x, gout.zip_map(value(*x), |g, v| if v > eps { g / v } else { 0.0 }))
            }
            Op::LogSigmoid(x) => acc(*x, gout.zip_map(value(*x), |g, v| g * sigmoid(-v))),
            Op::Softmax(x) => {
                let (n, c, h, w) = out.dims4();
                let hw = h * w;
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let i = (b * c + ch) * hw + p;
                            dot += gout.data()[i] * y[i];
                        }
                        for ch in 0..c {
                            let i = (b * c + ch) * hw + p;
                            d[i] = y[i] * (gout.data()[i] - dot);
                        }
                    }
                }
                acc(*x, Tensor::from_vec(out.shape(), d));
            }
            Op::LogSoftmax(x) => {
                let (n, c, h, w) = out.dims4();
                let hw = h * w;
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let mut gs = 0.0;
                        for ch in 0..c {
                            gs += gout.data()[(b * c + ch) * hw + p];
                        }
                        for ch in 0..c {
                            let i = (b * c + ch) * hw + p;
                            d[i] = gout.data()[i] - y[i].exp() * gs;
                        }
                    }
                }
                acc(*x, Tensor::from_vec(out.shape(), d));
            }
            Op::SumAll(x) => acc(*x, Tensor::full(value(*x).shape(), gout.item())),
            Op::MeanAll(x) => {
                let tx = value(*x);
                acc(*x, Tensor::full(tx.shape(), gout.item() / tx.numel() as f64))
            }
            Op::GlobalAvgPool(x) => {
                let tx = value(*x);
                let (_, _, h, w) = tx.dims4();
                let hw = h * w;
                let mut d = vec![0.0; tx.numel()];
                for (p, g) in gout.data().iter().enumerate() {
                    d[p * hw..(p + 1) * hw].fill(g / hw as f64);
                }
                acc(*x, Tensor::from_vec(tx.shape(), d));
            }
            Op::Reshape(x) => acc(*x, gout.clone().reshape(value(*x).shape())),
            Op::PickLabels(x, labels) => {
                let tx = value(*x);
                let (n, c, h, w) = tx.dims4();
                let hw = h * w;
                let mut d = vec![0.0; tx.numel()];
                for b in 0..n {
                    for p in 0..hw {
                        let l = labels[b * hw + p] as usize;
                        if l > 0 {
                            d[(b * c + l - 1) * hw + p] = gout.data()[b * hw + p];
                        }
                    }
                }
                acc(*x, Tensor::from_vec(tx.shape(), d));
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        -(-v).exp().ln_1p()
    } else {
        v - v.exp().ln_1p()
    }
}
