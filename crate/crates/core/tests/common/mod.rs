//! Independent f64 reference implementations used as test oracles.
#![allow(dead_code)]

use ourgan_core::erf_probe::ConvStack;
use ourgan_core::nn::Conv2d;

/// `[c][h][w]` feature map in f64.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, v: vec![0.0; c * h * w] }
    }

    pub fn from_f32(c: usize, h: usize, w: usize, data: &[f32]) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, v: data.iter().map(|&x| x as f64).collect() }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }
}

/// Plain conv weights in f64: `w[co][ci][dy][dx]`, bias per output.
#[derive(Clone, Debug)]
pub struct ConvW {
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ConvW {
    pub fn of(c: &Conv2d) -> Self {
        let s = c.weight.shape();
        Self {
            cout: s.n,
            cin: s.c,
            k: s.h,
            w: c.weight.data().iter().map(|&x| x as f64).collect(),
            b: c.bias.data().iter().map(|&x| x as f64).collect(),
        }
    }

    fn wt(&self, co: usize, ci: usize, dy: usize, dx: usize) -> f64 {
        self.w[((co * self.cin + ci) * self.k + dy) * self.k + dx]
    }

    /// Zero-padded "same" cross-correlation.
    pub fn forward(&self, x: &Map) -> Map {
        assert_eq!(x.c, self.cin);
        let p = (self.k / 2) as isize;
        let mut out = Map::zeros(self.cout, x.h, x.w);
        for co in 0..self.cout {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut s = self.b[co];
                    for ci in 0..self.cin {
                        for dy in 0..self.k {
                            let iy = y as isize + dy as isize - p;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for dx in 0..self.k {
                                let ix = xx as isize + dx as isize - p;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                s += self.wt(co, ci, dy, dx) * x.at(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let i = out.idx(co, y, xx);
                    out.v[i] = s;
                }
            }
        }
        out
    }

    /// Gradient with respect to the input, given the output gradient.
    pub fn backward_input(&self, g: &Map) -> Map {
        let p = (self.k / 2) as isize;
        let mut gin = Map::zeros(self.cin, g.h, g.w);
        for co in 0..self.cout {
            for y in 0..g.h {
                for xx in 0..g.w {
                    let gv = g.at(co, y, xx);
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..self.cin {
                        for dy in 0..self.k {
                            let iy = y as isize + dy as isize - p;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for dx in 0..self.k {
                                let ix = xx as isize + dx as isize - p;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let i = gin.idx(ci, iy as usize, ix as usize);
                                gin.v[i] += self.wt(co, ci, dy, dx) * gv;
                            }
                        }
                    }
                }
            }
        }
        gin
    }
}

fn lrelu(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

pub fn stack_forward(net: &ConvStack, x: &Map) -> Map {
    let n = net.convs.len();
    let mut h = x.clone();
    for (i, c) in net.convs.iter().enumerate() {
        h = ConvW::of(c).forward(&h);
        if i + 1 < n {
            h.v.iter_mut().for_each(|v| *v = lrelu(*v, net.slope as f64));
        }
    }
    h
}

/// Full map of ∂ out[0, oy, ox] / ∂ x by explicit backpropagation.
pub fn stack_input_grad(net: &ConvStack, x: &Map, probe: (usize, usize)) -> Map {
    let convs: Vec<ConvW> = net.convs.iter().map(ConvW::of).collect();
    let slope = net.slope as f64;
    let mut pre = Vec::new();
    let mut h = x.clone();
    for (i, c) in convs.iter().enumerate() {
        let z = c.forward(&h);
        h = z.clone();
        if i + 1 < convs.len() {
            h.v.iter_mut().for_each(|v| *v = lrelu(*v, slope));
        }
        pre.push(z);
    }
    let last = pre.last().unwrap();
    let mut g = Map::zeros(last.c, last.h, last.w);
    let i = g.idx(0, probe.0, probe.1);
    g.v[i] = 1.0;
    for l in (0..convs.len()).rev() {
        if l + 1 < convs.len() {
            for (gv, zv) in g.v.iter_mut().zip(&pre[l].v) {
                if *zv <= 0.0 {
                    *gv *= slope;
                }
            }
        }
        g = convs[l].backward_input(&g);
    }
    g
}

/// Sum over channels of |grad|, divided by the channel count.
pub fn channel_mean_abs(g: &Map) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut m = vec![0.0; plane];
    for c in 0..g.c {
        for (i, v) in m.iter_mut().enumerate() {
            *v += g.v[c * plane + i].abs();
        }
    }
    m.iter_mut().for_each(|v| *v /= g.c as f64);
    m
}

/// Eigenvalues of a symmetric `n × n` matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).collect()
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                assert!(d > 0.0, "matrix is not positive definite");
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    l
}

/// Fréchet distance via Tr (AB)^½ = Σ sqrt eig(Lᵀ B L) with A = L Lᵀ.
pub fn frechet_oracle(ma: &[f64], ca: &[f64], mb: &[f64], cb: &[f64]) -> f64 {
    let n = ma.len();
    let l = cholesky(ca, n);
    let mut bl = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            bl[i * n + j] = (0..n).map(|k| cb[i * n + k] * l[k * n + j]).sum();
        }
    }
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = (0..n).map(|k| l[k * n + i] * bl[k * n + j]).sum();
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    let cross: f64 = jacobi_eigenvalues(&m, n).iter().map(|&v| v.max(0.0).sqrt()).sum();
    let mean: f64 = ma.iter().zip(mb).map(|(a, b)| (a - b).powi(2)).sum();
    let tr = |c: &[f64]| (0..n).map(|i| c[i * n + i]).sum::<f64>();
    mean + tr(ca) + tr(cb) - 2.0 * cross
}
