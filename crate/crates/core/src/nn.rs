//! Layers, parameter plumbing and optimisers.

use crate::autograd::{Graph, Var};
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Anything holding trainable tensors.
///
/// Visiting order must be stable: optimiser state and checkpoints are keyed
/// by it.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn param_arcs(m: &dyn Module) -> Vec<Arc<Tensor>> {
    let mut out = Vec::new();
    m.visit("", &mut |_, t| out.push(t.clone()));
    out
}

pub fn num_params(m: &dyn Module) -> usize {
    param_arcs(m).iter().map(|t| t.numel()).sum()
}

pub fn state_dict(m: &dyn Module) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    m.visit("", &mut |name, t| {
        out.insert(name, (**t).clone());
    });
    out
}

/// Loads tensors by name; every parameter must be present with its shape.
pub fn load_state_dict(m: &mut dyn Module, state: &BTreeMap<String, Tensor>) -> Result<(), String> {
    let mut err = None;
    m.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match state.get(&name) {
            Some(v) if v.shape() == t.shape() => *t = Arc::new(v.clone()),
            Some(v) => {
                err = Some(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    v.shape(),
                    t.shape()
                ))
            }
            None => err = Some(format!("parameter {name} missing from checkpoint")),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Bitwise fingerprint of all parameters, for freeze checks.
pub fn param_bits(m: &dyn Module) -> Vec<u32> {
    let mut out = Vec::new();
    m.visit("", &mut |_, t| out.extend(t.to_bits()));
    out
}

/// Gradients of `loss` for each module's parameters, in visiting order.
/// Parameters that never entered the graph get `None`.
pub fn module_grads(g: &Graph, loss: &Var, modules: &[&dyn Module]) -> Vec<Vec<Option<Tensor>>> {
    let mut slots: Vec<Vec<Option<usize>>> = Vec::new();
    let mut wrt: Vec<Var> = Vec::new();
    for m in modules {
        let mut s = Vec::new();
        for arc in param_arcs(*m) {
            match g.param_var(&arc) {
                Some(v) if v.requires_grad() => {
                    s.push(Some(wrt.len()));
                    wrt.push(v);
                }
                _ => s.push(None),
            }
        }
        slots.push(s);
    }
    let refs: Vec<&Var> = wrt.iter().collect();
    let mut grads: Vec<Option<Tensor>> = g
        .grad(loss, &refs, false)
        .into_iter()
        .map(|v| Some(v.into_tensor()))
        .collect();
    slots
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|i| i.and_then(|i| grads[i].take()))
                .collect()
        })
        .collect()
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .map(|t| t.sum_sq())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && total > max_norm {
        let s = (max_norm / (total + 1e-6)) as f32;
        grads.iter_mut().flatten().for_each(|t| t.scale_in_place(s));
    }
    total
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads` follows the module's visiting order; `None`
    /// entries leave the parameter and its moments untouched.
    pub fn step(&mut self, module: &mut dyn Module, grads: &[Option<Tensor>], lr: f32) {
        if self.m.is_empty() {
            module.visit("", &mut |_, p| {
                self.m.push(Tensor::zeros(p.shape()));
                self.v.push(Tensor::zeros(p.shape()));
            });
        }
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = lr / bc1;
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |_, p| {
            if let Some(g) = &grads[i] {
                let m = ms[i].data_mut();
                let v = vs[i].data_mut();
                let pd = Arc::make_mut(p).data_mut();
                for k in 0..pd.len() {
                    let gk = g.data()[k];
                    m[k] = b1 * m[k] + (1.0 - b1) * gk;
                    v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                    pd[k] -= step * m[k] / ((v[k] / bc2).sqrt() + eps);
                }
            }
            i += 1;
        });
    }
}

/// Piecewise-constant decay at fixed step milestones.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStepLr {
    pub base: f32,
    pub milestones: Vec<usize>,
    pub gamma: f32,
}

impl MultiStepLr {
    pub fn constant(base: f32) -> Self {
        Self {
            base,
            milestones: Vec::new(),
            gamma: 1.0,
        }
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal weights for a following leaky ReLU of `slope`,
    /// multiplied by `scale`; zero bias. "Same" padding.
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        slope: f32,
        scale: f32,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * k * k) as f32;
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let std = gain / fan_in.sqrt() * scale;
        Self {
            weight: Arc::new(Tensor::randn(Shape::new(cout, cin, k, k), std, rng)),
            bias: Arc::new(Tensor::zeros(Shape::new(1, cout, 1, 1))),
            pad: k / 2,
        }
    }

    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            weight: Arc::new(Tensor::zeros(Shape::new(cout, cin, k, k))),
            bias: Arc::new(Tensor::zeros(Shape::new(1, cout, 1, 1))),
            pad: k / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv2d(x, &w, Some(&b), self.pad)
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Module> Module for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Per-layer shape record used by the memory estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub has_bias: bool,
    /// Spatial size of this layer's input relative to the model input,
    /// as a rational `num / den` per axis.
    pub scale_num: usize,
    pub scale_den: usize,
}

impl LayerDesc {
    pub fn conv(c: &Conv2d, scale_num: usize, scale_den: usize) -> Self {
        Self {
            in_channels: c.in_channels(),
            out_channels: c.out_channels(),
            kernel: c.kernel(),
            has_bias: true,
            scale_num,
            scale_den,
        }
    }

    pub fn params(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
            + if self.has_bias { self.out_channels } else { 0 }
    }
}
