//! Tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! Every backward rule is written in terms of graph ops, so calling
//! [`Graph::grad`] with `create_graph = true` records the backward pass and
//! the resulting gradients can themselves be differentiated (needed for the
//! WGAN-GP penalty). With recording disabled the same ops run eagerly and
//! keep no history, which is what inference uses.

use crate::kernels::{self, SharedResampler};
use crate::tensor::{Shape, Tensor};
use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

/// A value flowing through a [`Graph`]; `id` is set only on recorded nodes.
#[derive(Clone, Debug)]
pub struct Var {
    value: Arc<Tensor>,
    id: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor> {
        self.value.clone()
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    BroadcastTo(Var),
    SumTo(Var),
    LeakyRelu(Var, f32),
    Abs(Var),
    Tanh(Var),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    Sigmoid(Var),
    Softplus(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    ConvWeightGrad {
        x: Var,
        gy: Var,
        k: usize,
        pad: usize,
    },
    FlipTranspose(Var),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    PadChannels(Var, usize),
    Upsample(Var, usize),
    SumPool(Var, usize),
    Resample(Var, SharedResampler, SharedResampler),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    params: RefCell<HashMap<usize, Var>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            params: RefCell::new(HashMap::new()),
        }
    }

    /// A graph that never records; ops evaluate eagerly.
    pub fn inference() -> Self {
        let g = Self::new();
        g.recording.set(false);
        g
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            value: Arc::new(t),
            id: None,
        }
    }

    pub fn constant_shared(&self, t: Arc<Tensor>) -> Var {
        Var { value: t, id: None }
    }

    /// A differentiable leaf (an input we want gradients for).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.leaf_shared(Arc::new(t))
    }

    pub fn leaf_shared(&self, t: Arc<Tensor>) -> Var {
        if !self.recording.get() {
            return Var { value: t, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
        });
        Var {
            value: t,
            id: Some(id),
        }
    }

    /// Leaf for a model parameter; repeated calls with the same tensor
    /// return the same node.
    pub fn param(&self, t: &Arc<Tensor>) -> Var {
        let key = Arc::as_ptr(t) as usize;
        if let Some(v) = self.params.borrow().get(&key) {
            return v.clone();
        }
        let v = self.leaf_shared(t.clone());
        self.params.borrow_mut().insert(key, v.clone());
        v
    }

    /// The node previously created by [`Graph::param`] for `t`, if any.
    pub fn param_var(&self, t: &Arc<Tensor>) -> Option<Var> {
        self.params
            .borrow()
            .get(&(Arc::as_ptr(t) as usize))
            .cloned()
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[&Var]) -> Var {
        let value = Arc::new(value);
        if !self.recording.get() || !inputs.iter().any(|v| v.id.is_some()) {
            return Var { value, id: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: value.clone(),
            op,
        });
        Var {
            value,
            id: Some(id),
        }
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        let v = a.value.zip_map(&b.value, |x, y| x + y);
        self.push(v, Op::Add(a.clone(), b.clone()), &[a, b])
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        let v = a.value.zip_map(&b.value, |x, y| x - y);
        self.push(v, Op::Sub(a.clone(), b.clone()), &[a, b])
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        let v = a.value.zip_map(&b.value, |x, y| x * y);
        self.push(v, Op::Mul(a.clone(), b.clone()), &[a, b])
    }

    pub fn scale(&self, a: &Var, s: f32) -> Var {
        let v = a.value.map(|x| x * s);
        self.push(v, Op::Scale(a.clone(), s), &[a])
    }

    pub fn add_scalar(&self, a: &Var, s: f32) -> Var {
        let v = a.value.map(|x| x + s);
        self.push(v, Op::Offset(a.clone()), &[a])
    }

    pub fn neg(&self, a: &Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&self, a: &Var) -> Var {
        self.mul(a, a)
    }

    pub fn leaky_relu(&self, a: &Var, slope: f32) -> Var {
        let v = a.value.map(|x| if x > 0.0 { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a.clone(), slope), &[a])
    }

    pub fn abs(&self, a: &Var) -> Var {
        let v = a.value.map(f32::abs);
        self.push(v, Op::Abs(a.clone()), &[a])
    }

    pub fn tanh(&self, a: &Var) -> Var {
        let v = a.value.map(f32::tanh);
        self.push(v, Op::Tanh(a.clone()), &[a])
    }

    pub fn exp(&self, a: &Var) -> Var {
        let v = a.value.map(f32::exp);
        self.push(v, Op::Exp(a.clone()), &[a])
    }

    pub fn sqrt(&self, a: &Var) -> Var {
        let v = a.value.map(f32::sqrt);
        self.push(v, Op::Sqrt(a.clone()), &[a])
    }

    pub fn recip(&self, a: &Var) -> Var {
        let v = a.value.map(|x| 1.0 / x);
        self.push(v, Op::Recip(a.clone()), &[a])
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let v = a.value.map(sigmoid);
        self.push(v, Op::Sigmoid(a.clone()), &[a])
    }

    /// `log(1 + exp(x))`, computed stably.
    pub fn softplus(&self, a: &Var) -> Var {
        let v = a.value.map(softplus);
        self.push(v, Op::Softplus(a.clone()), &[a])
    }

    // ---- shape -------------------------------------------------------

    pub fn broadcast_to(&self, a: &Var, target: Shape) -> Var {
        if a.shape() == target {
            return a.clone();
        }
        let v = kernels::broadcast_to(&a.value, target);
        self.push(v, Op::BroadcastTo(a.clone()), &[a])
    }

    pub fn sum_to(&self, a: &Var, target: Shape) -> Var {
        if a.shape() == target {
            return a.clone();
        }
        let v = kernels::sum_to(&a.value, target);
        self.push(v, Op::SumTo(a.clone()), &[a])
    }

    pub fn sum(&self, a: &Var) -> Var {
        self.sum_to(a, Shape::scalar())
    }

    pub fn mean(&self, a: &Var) -> Var {
        let n = a.value.numel() as f32;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }

    /// Per-sample sum, `[n, 1, 1, 1]`.
    pub fn sum_per_sample(&self, a: &Var) -> Var {
        let n = a.shape().n;
        self.sum_to(a, Shape::new(n, 1, 1, 1))
    }

    pub fn concat(&self, parts: &[&Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let v = kernels::concat_channels(&ts);
        let owned: Vec<Var> = parts.iter().map(|&p| p.clone()).collect();
        self.push(v, Op::Concat(owned), parts)
    }

    pub fn slice_channels(&self, a: &Var, start: usize, len: usize) -> Var {
        let v = kernels::slice_channels(&a.value, start, len);
        self.push(v, Op::SliceChannels(a.clone(), start), &[a])
    }

    pub fn pad_channels(&self, a: &Var, start: usize, total: usize) -> Var {
        let v = kernels::pad_channels(&a.value, start, total);
        self.push(v, Op::PadChannels(a.clone(), start), &[a])
    }

    pub fn upsample_nearest(&self, a: &Var, f: usize) -> Var {
        if f == 1 {
            return a.clone();
        }
        let v = kernels::upsample_nearest(&a.value, f);
        self.push(v, Op::Upsample(a.clone(), f), &[a])
    }

    pub fn sum_pool(&self, a: &Var, f: usize) -> Var {
        if f == 1 {
            return a.clone();
        }
        let v = kernels::sum_pool(&a.value, f);
        self.push(v, Op::SumPool(a.clone(), f), &[a])
    }

    pub fn avg_pool(&self, a: &Var, f: usize) -> Var {
        let s = self.sum_pool(a, f);
        self.scale(&s, 1.0 / (f * f) as f32)
    }

    pub fn resample(&self, a: &Var, ry: SharedResampler, rx: SharedResampler) -> Var {
        let v = kernels::resample(&a.value, &ry, &rx);
        self.push(v, Op::Resample(a.clone(), ry, rx), &[a])
    }

    /// Differentiable bicubic resize.
    pub fn resize_bicubic(&self, a: &Var, height: usize, width: usize) -> Var {
        let s = a.shape();
        if (s.h, s.w) == (height, width) {
            return a.clone();
        }
        let ry = crate::resample::bicubic_axis_shared(s.h, height);
        let rx = crate::resample::bicubic_axis_shared(s.w, width);
        self.resample(a, ry, rx)
    }

    // ---- convolution -------------------------------------------------

    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, pad: usize) -> Var {
        let v = kernels::conv2d(&x.value, &w.value, b.map(|b| b.value()), pad);
        let op = Op::Conv2d {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            pad,
        };
        match b {
            Some(b) => self.push(v, op, &[x, w, b]),
            None => self.push(v, op, &[x, w]),
        }
    }

    fn conv_weight_grad(&self, x: &Var, gy: &Var, k: usize, pad: usize) -> Var {
        let v = kernels::conv2d_weight_grad(&x.value, &gy.value, k, pad);
        self.push(
            v,
            Op::ConvWeightGrad {
                x: x.clone(),
                gy: gy.clone(),
                k,
                pad,
            },
            &[x, gy],
        )
    }

    fn flip_transpose(&self, w: &Var) -> Var {
        let v = kernels::flip_transpose(&w.value);
        self.push(v, Op::FlipTranspose(w.clone()), &[w])
    }

    /// Input-gradient of a stride-1 convolution, as a convolution.
    fn conv_input_grad(&self, gy: &Var, w: &Var, pad: usize) -> Var {
        let k = w.shape().h;
        assert!(pad < k, "padding {pad} must be smaller than kernel {k}");
        let wt = self.flip_transpose(w);
        self.conv2d(gy, &wt, None, k - 1 - pad)
    }

    // ---- losses ------------------------------------------------------

    pub fn mse(&self, a: &Var, b: &Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(&d);
        self.mean(&sq)
    }

    pub fn l1(&self, a: &Var, b: &Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(&d);
        self.mean(&ad)
    }

    // ---- backward ----------------------------------------------------

    /// Gradients of the scalar `output` with respect to `wrt`.
    pub fn grad(&self, output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
        assert_eq!(
            output.value.numel(),
            1,
            "grad() needs a scalar output; use grad_with_seed"
        );
        self.grad_with_seed(output, Tensor::full(output.shape(), 1.0), wrt, create_graph)
    }

    /// Vector-Jacobian product: gradients of `<seed, output>`.
    pub fn grad_with_seed(
        &self,
        output: &Var,
        seed: Tensor,
        wrt: &[&Var],
        create_graph: bool,
    ) -> Vec<Var> {
        assert_eq!(seed.shape(), output.shape(), "seed shape mismatch");
        let zeros = |v: &Var| self.constant(Tensor::zeros(v.shape()));
        let Some(out_id) = output.id else {
            return wrt.iter().map(|v| zeros(v)).collect();
        };
        let needed = self.needed_mask(out_id, wrt);
        let mut grads: Vec<Option<Var>> = vec![None; out_id + 1];
        grads[out_id] = Some(self.constant(seed));

        let was_recording = self.recording.replace(create_graph);
        for id in (0..=out_id).rev() {
            if !needed[id] {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            let (op, value) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].value.clone())
            };
            let this = Var {
                value,
                id: Some(id),
            };
            // wrt leaves keep their gradient
            let keep = wrt.iter().any(|v| v.id == Some(id));
            for (input, g) in self.backward_op(&op, &this, &gy, &needed) {
                let Some(iid) = input.id else { continue };
                if !needed[iid] {
                    continue;
                }
                grads[iid] = Some(match grads[iid].take() {
                    Some(acc) => self.add(&acc, &g),
                    None => g,
                });
            }
            if keep {
                grads[id] = Some(gy);
            }
        }
        self.recording.set(was_recording);

        wrt.iter()
            .map(|v| match v.id {
                Some(i) if i <= out_id => grads[i].clone().unwrap_or_else(|| zeros(v)),
                _ => zeros(v),
            })
            .collect()
    }

    fn needed_mask(&self, out_id: usize, wrt: &[&Var]) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut needed = vec![false; out_id + 1];
        for v in wrt {
            if let Some(i) = v.id {
                if i <= out_id {
                    needed[i] = true;
                }
            }
        }
        let dep = |v: &Var, needed: &[bool]| v.id.is_some_and(|i| needed[i]);
        for id in 0..=out_id {
            if needed[id] {
                continue;
            }
            needed[id] = match &nodes[id].op {
                Op::Leaf => false,
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    dep(a, &needed) || dep(b, &needed)
                }
                Op::Scale(a, _)
                | Op::Offset(a)
                | Op::BroadcastTo(a)
                | Op::SumTo(a)
                | Op::LeakyRelu(a, _)
                | Op::Abs(a)
                | Op::Tanh(a)
                | Op::Exp(a)
                | Op::Sqrt(a)
                | Op::Recip(a)
                | Op::Sigmoid(a)
                | Op::Softplus(a)
                | Op::FlipTranspose(a)
                | Op::SliceChannels(a, _)
                | Op::PadChannels(a, _)
                | Op::Upsample(a, _)
                | Op::SumPool(a, _)
                | Op::Resample(a, _, _) => dep(a, &needed),
                Op::Conv2d { x, w, b, .. } => {
                    dep(x, &needed) || dep(w, &needed) || b.as_ref().is_some_and(|b| dep(b, &needed))
                }
                Op::ConvWeightGrad { x, gy, .. } => dep(x, &needed) || dep(gy, &needed),
                Op::Concat(parts) => parts.iter().any(|p| dep(p, &needed)),
            };
        }
        needed
    }

    fn backward_op(&self, op: &Op, this: &Var, gy: &Var, needed: &[bool]) -> Vec<(Var, Var)> {
        let want = |v: &Var| v.id.is_some_and(|i| needed[i]);
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((a.clone(), gy.clone()));
                }
                if want(b) {
                    out.push((b.clone(), gy.clone()));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a.clone(), gy.clone()));
                }
                if want(b) {
                    out.push((b.clone(), self.neg(gy)));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((a.clone(), self.mul(gy, b)));
                }
                if want(b) {
                    out.push((b.clone(), self.mul(gy, a)));
                }
            }
            Op::Scale(a, s) => out.push((a.clone(), self.scale(gy, *s))),
            Op::Offset(a) => out.push((a.clone(), gy.clone())),
            Op::BroadcastTo(a) => out.push((a.clone(), self.sum_to(gy, a.shape()))),
            Op::SumTo(a) => out.push((a.clone(), self.broadcast_to(gy, a.shape()))),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let mask = self.constant(a.value.map(|x| if x > 0.0 { 1.0 } else { s }));
                out.push((a.clone(), self.mul(gy, &mask)));
            }
            Op::Abs(a) => {
                let sign = self.constant(a.value.map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }));
                out.push((a.clone(), self.mul(gy, &sign)));
            }
            Op::Tanh(a) => {
                // gy * (1 - y^2)
                let y2 = self.square(this);
                let d = self.add_scalar(&self.neg(&y2), 1.0);
                out.push((a.clone(), self.mul(gy, &d)));
            }
            Op::Exp(a) => out.push((a.clone(), self.mul(gy, this))),
            Op::Sqrt(a) => {
                let r = self.recip(this);
                out.push((a.clone(), self.scale(&self.mul(gy, &r), 0.5)));
            }
            Op::Recip(a) => {
                let y2 = self.square(this);
                out.push((a.clone(), self.neg(&self.mul(gy, &y2))));
            }
            Op::Sigmoid(a) => {
                // gy * s * (1 - s)
                let one_minus = self.add_scalar(&self.neg(this), 1.0);
                let d = self.mul(this, &one_minus);
                out.push((a.clone(), self.mul(gy, &d)));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                out.push((a.clone(), self.mul(gy, &s)));
            }
            Op::Conv2d { x, w, b, pad } => {
                if want(x) {
                    out.push((x.clone(), self.conv_input_grad(gy, w, *pad)));
                }
                if want(w) {
                    out.push((w.clone(), self.conv_weight_grad(x, gy, w.shape().h, *pad)));
                }
                if let Some(b) = b {
                    if want(b) {
                        out.push((b.clone(), self.sum_to(gy, b.shape())));
                    }
                }
            }
            Op::ConvWeightGrad { x, gy: g_out, k, pad } => {
                // gy here is the cotangent of a weight-shaped tensor
                if want(x) {
                    out.push((x.clone(), self.conv_input_grad(g_out, gy, *pad)));
                }
                if want(g_out) {
                    out.push((g_out.clone(), self.conv2d(x, gy, None, *pad)));
                }
                debug_assert_eq!(gy.shape().h, *k);
            }
            Op::FlipTranspose(a) => out.push((a.clone(), self.flip_transpose(gy))),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = p.shape().c;
                    if want(p) {
                        out.push((p.clone(), self.slice_channels(gy, off, c)));
                    }
                    off += c;
                }
            }
            Op::SliceChannels(a, start) => {
                out.push((a.clone(), self.pad_channels(gy, *start, a.shape().c)))
            }
            Op::PadChannels(a, start) => {
                out.push((a.clone(), self.slice_channels(gy, *start, a.shape().c)))
            }
            Op::Upsample(a, f) => out.push((a.clone(), self.sum_pool(gy, *f))),
            Op::SumPool(a, f) => out.push((a.clone(), self.upsample_nearest(gy, *f))),
            Op::Resample(a, ry, rx) => {
                let ryt = Arc::new(ry.transpose());
                let rxt = Arc::new(rx.transpose());
                out.push((a.clone(), self.resample(gy, ryt, rxt)));
            }
        }
        out
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}
