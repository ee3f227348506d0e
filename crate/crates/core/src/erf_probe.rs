//! Effective receptive field by gradient probing.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module};
use crate::par;
use crate::srnet::SrNetwork;
use crate::tensor::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const DEFAULT_ENERGY: f64 = 0.98;
pub const DEFAULT_PROBES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfProfile {
    /// Row-major `height × width` mean |∂y/∂x|; omitted from manifests.
    #[serde(skip)]
    pub grad_map: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub center: (usize, usize),
    pub energy_fraction: f64,
    pub radius_px: usize,
    pub trf_radius_px: usize,
    /// `coverage[R]` = share of gradient mass inside the disk of radius R.
    pub coverage: Vec<f64>,
    pub num_probes: usize,
    pub seed: u64,
}

impl ErfProfile {
    pub fn total(&self) -> f64 {
        self.grad_map.iter().sum()
    }

    /// Smallest disk radius covering `fraction` of the mass.
    pub fn radius_at(&self, fraction: f64) -> usize {
        radius_for(&self.coverage, fraction)
    }

    pub fn coverage_csv(&self) -> String {
        let mut s = String::from("radius,coverage\n");
        for (r, c) in self.coverage.iter().enumerate() {
            s.push_str(&format!("{r},{c:.8}\n"));
        }
        s
    }
}

fn radius_for(coverage: &[f64], fraction: f64) -> usize {
    coverage
        .iter()
        .position(|&c| c >= fraction - 1e-12)
        .unwrap_or(coverage.len().saturating_sub(1))
}

/// Disk coverage curve of a non-negative map around `center`, for radii
/// 0 up to the farthest pixel. A pixel lies in the disk of radius R when its
/// centre is within R + 1/2 of `center`.
pub fn disk_coverage(map: &[f64], height: usize, width: usize, center: (usize, usize)) -> Vec<f64> {
    let (cy, cx) = (center.0 as i64, center.1 as i64);
    let far = [(0, 0), (0, width - 1), (height - 1, 0), (height - 1, width - 1)]
        .iter()
        .map(|&(y, x)| (y as i64 - cy).pow(2) + (x as i64 - cx).pow(2))
        .max()
        .unwrap_or(0);
    let max_r = ring(far);
    let mut by_r = vec![0.0; max_r + 1];
    for y in 0..height {
        for x in 0..width {
            let d2 = (y as i64 - cy).pow(2) + (x as i64 - cx).pow(2);
            by_r[ring(d2)] += map[y * width + x];
        }
    }
    let total: f64 = by_r.iter().sum();
    let mut acc = 0.0;
    by_r.iter()
        .map(|v| {
            acc += v;
            if total > 0.0 {
                acc / total
            } else {
                0.0
            }
        })
        .collect()
}

/// Smallest R with (2R + 1)^2 >= 4 d2.
fn ring(d2: i64) -> usize {
    let mut r = ((d2 as f64).sqrt() - 0.5).max(0.0).floor() as i64;
    while (2 * r + 1).pow(2) < 4 * d2 {
        r += 1;
    }
    r as usize
}

/// Averages |∂ output[channel 0, probe pixel] / ∂ input| over input channels
/// and `num_probes` uniform-noise inputs.
pub fn measure_erf<M: SrNetwork + ?Sized>(
    model: &M,
    input_size: (usize, usize),
    probe_output_pixel: (usize, usize),
    num_probes: usize,
    energy_fraction: f64,
    seed: u64,
) -> Result<ErfProfile> {
    let r = model.ratio().max(1);
    let trf = model.trf_radius();
    let (h, w) = input_size;
    let (oy, ox) = probe_output_pixel;
    if num_probes == 0 {
        return Err(Error::invalid("erf_probe", "need at least one probe"));
    }
    if !(energy_fraction > 0.0 && energy_fraction <= 1.0) {
        return Err(Error::invalid("erf_probe", "energy fraction must lie in (0, 1]"));
    }
    if oy >= h * r || ox >= w * r {
        return Err(Error::invalid("erf_probe", "probe pixel lies outside the output"));
    }
    let center = (oy / r, ox / r);
    if center.0 < trf || center.1 < trf || center.0 + trf >= h || center.1 + trf >= w {
        return Err(Error::invalid(
            "erf_probe",
            format!(
                "probe pre-image {center:?} is closer than the receptive-field radius {trf} to a border of the {h}x{w} input"
            ),
        ));
    }
    let c = model.in_channels();
    let maps = par::map_range_bounded(num_probes, probe_jobs(), |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(p as u64));
        let x = Tensor::uniform(Shape::new(1, c, h, w), -1.0, 1.0, &mut rng);
        let g = Graph::new();
        let xv = g.leaf(x);
        let y = model.forward_graph(&g, &xv);
        let mut seed_t = Tensor::zeros(y.shape());
        seed_t.set(0, 0, oy, ox, 1.0);
        let gx = g.grad_with_seed(&y, seed_t, &[&xv], false).remove(0);
        let gt = gx.value();
        let mut m = vec![0.0f64; h * w];
        for ch in 0..c {
            for (i, v) in m.iter_mut().enumerate() {
                *v += gt.data()[ch * h * w + i].abs() as f64;
            }
        }
        m
    });
    let mut grad_map = vec![0.0f64; h * w];
    for m in &maps {
        for (a, b) in grad_map.iter_mut().zip(m) {
            *a += b;
        }
    }
    let norm = (c * num_probes) as f64;
    grad_map.iter_mut().for_each(|v| *v /= norm);
    let total: f64 = grad_map.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NonFinite {
            module: "erf_probe",
            what: "gradient map has no positive finite mass".into(),
        });
    }
    let coverage = disk_coverage(&grad_map, h, w, center);
    let radius_px = radius_for(&coverage, energy_fraction);
    Ok(ErfProfile {
        grad_map,
        height: h,
        width: w,
        center,
        energy_fraction,
        radius_px,
        trf_radius_px: trf,
        coverage,
        num_probes,
        seed,
    })
}

/// Probes with graphs of large models are memory heavy; cap concurrency.
fn probe_jobs() -> usize {
    par::threads().clamp(1, 4)
}

/// Smallest square input that keeps the centre probe a full receptive
/// field away from every border.
pub fn min_probe_input(trf_radius: usize) -> usize {
    2 * trf_radius + 1
}

/// Measures at the centre pixel with default probes and energy.
pub fn measure_center<M: SrNetwork + ?Sized>(model: &M, input: usize, seed: u64) -> Result<ErfProfile> {
    let r = model.ratio();
    let c = input / 2;
    measure_erf(model, (input, input), (c * r, c * r), DEFAULT_PROBES, DEFAULT_ENERGY, seed)
}

/// Overlap α: the 98%-mass radius.
pub fn choose_overlap(profile: &ErfProfile) -> usize {
    profile.radius_at(DEFAULT_ENERGY)
}

/// Plain stack of convolutions with leaky ReLUs, ratio 1.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub convs: Vec<Conv2d>,
    pub slope: f32,
}

impl ConvStack {
    pub fn random(depth: usize, channels: usize, kernel: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = (0..depth.max(1))
            .map(|i| {
                let cin = if i == 0 { 3 } else { channels };
                let cout = if i + 1 == depth.max(1) { 3 } else { channels };
                Conv2d::new(cin, cout, kernel, 0.2, 1.0, &mut rng)
            })
            .collect();
        Self { convs, slope: 0.2 }
    }
}

impl SrNetwork for ConvStack {
    fn ratio(&self) -> usize {
        1
    }

    fn trf_radius(&self) -> usize {
        self.convs.iter().map(|c| c.kernel() / 2).sum()
    }

    fn forward_graph(&self, g: &Graph, x: &Var) -> Var {
        let n = self.convs.len();
        let mut h = x.clone();
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, &h);
            if i + 1 < n {
                h = g.leaky_relu(&h, self.slope);
            }
        }
        h
    }
}

impl Module for ConvStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor>)) {
        self.convs.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor>)) {
        self.convs.visit_mut(prefix, f)
    }
}
