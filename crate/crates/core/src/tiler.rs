//! Overlapping tile split, per-tile super-resolution, trim and stitch.

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::par;
use crate::srnet::{add_noise, sr_image, SrNetwork};
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BorderFlags {
    pub top: bool,
    pub bottom: bool,
    pub left: bool,
    pub right: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub core: Rect,
    pub padded: Rect,
    pub border: BorderFlags,
}

impl Tile {
    /// Padding actually kept on each side: (top, bottom, left, right).
    pub fn padding(&self) -> (usize, usize, usize, usize) {
        (
            self.core.y - self.padded.y,
            self.padded.bottom() - self.core.bottom(),
            self.core.x - self.padded.x,
            self.padded.right() - self.core.right(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub full_size: (usize, usize),
    pub tile_core: (usize, usize),
    pub overlap: usize,
    pub ratio: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub tiles: Vec<Tile>,
}

impl TileLayout {
    pub fn new(full_size: (usize, usize), tile_core: (usize, usize), overlap: usize, ratio: usize) -> Result<Self> {
        let (hh, ww) = full_size;
        let (h, w) = tile_core;
        if hh == 0 || ww == 0 || h == 0 || w == 0 || ratio == 0 {
            return Err(Error::invalid("tiler", "image, tile and ratio must be positive"));
        }
        if h > hh || w > ww {
            return Err(Error::invalid(
                "tiler",
                format!("tile core {h}x{w} exceeds the {hh}x{ww} image"),
            ));
        }
        let rows = hh.div_ceil(h);
        let cols = ww.div_ceil(w);
        if (rows > 1 && h + 2 * overlap > hh) || (cols > 1 && w + 2 * overlap > ww) {
            return Err(Error::invalid(
                "tiler",
                format!(
                    "padded tile {}x{} exceeds the {hh}x{ww} image; use a single-tile layout",
                    h + 2 * overlap,
                    w + 2 * overlap
                ),
            ));
        }
        let mut tiles = Vec::with_capacity(rows * cols);
        for row in 0..rows {
            for col in 0..cols {
                let (y, x) = (row * h, col * w);
                let core = Rect {
                    y,
                    x,
                    h: h.min(hh - y),
                    w: w.min(ww - x),
                };
                let py = y.saturating_sub(overlap);
                let px = x.saturating_sub(overlap);
                let padded = Rect {
                    y: py,
                    x: px,
                    h: (core.bottom() + overlap).min(hh) - py,
                    w: (core.right() + overlap).min(ww) - px,
                };
                tiles.push(Tile {
                    index: tiles.len(),
                    row,
                    col,
                    core,
                    padded,
                    border: BorderFlags {
                        top: row == 0,
                        bottom: row + 1 == rows,
                        left: col == 0,
                        right: col + 1 == cols,
                    },
                });
            }
        }
        Ok(Self {
            full_size,
            tile_core,
            overlap,
            ratio,
            rows,
            cols,
            tiles,
        })
    }

    pub fn single(full_size: (usize, usize), ratio: usize) -> Result<Self> {
        Self::new(full_size, full_size, 0, ratio)
    }

    /// Splits into a `rows × cols` grid of near-equal cores.
    pub fn grid(full_size: (usize, usize), rows: usize, cols: usize, overlap: usize, ratio: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("tiler", "grid needs at least one row and column"));
        }
        Self::new(
            full_size,
            (full_size.0.div_ceil(rows), full_size.1.div_ceil(cols)),
            overlap,
            ratio,
        )
    }

    pub fn k(&self) -> usize {
        self.tiles.len()
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.ratio * self.full_size.0, self.ratio * self.full_size.1)
    }

    /// Pixels of the upscaled padded tile, as allocated by the SR call.
    pub fn tile_output_pixels(&self, index: usize) -> usize {
        let p = self.tiles[index].padded;
        self.ratio * p.h * self.ratio * p.w
    }

    /// Output-space coordinates of internal horizontal and vertical
    /// tile boundaries.
    pub fn boundaries(&self) -> (Vec<usize>, Vec<usize>) {
        let r = self.ratio;
        let ys = (1..self.rows).map(|i| r * i * self.tile_core.0).collect();
        let xs = (1..self.cols).map(|j| r * j * self.tile_core.1).collect();
        (ys, xs)
    }
}

fn check_size(image: &ImageTensor, layout: &TileLayout) -> Result<()> {
    if image.size() != layout.full_size {
        return Err(Error::invalid(
            "tiler",
            format!("image is {:?} but the layout expects {:?}", image.size(), layout.full_size),
        ));
    }
    Ok(())
}

pub fn split(image: &ImageTensor, layout: &TileLayout) -> Result<Vec<ImageTensor>> {
    check_size(image, layout)?;
    Ok(layout
        .tiles
        .iter()
        .map(|t| image.crop(t.padded.y, t.padded.x, t.padded.h, t.padded.w))
        .collect())
}

/// Removes `r ×` the kept padding from an upscaled padded tile.
pub fn trim(upscaled: &ImageTensor, layout: &TileLayout, index: usize) -> Result<ImageTensor> {
    let t = layout
        .tiles
        .get(index)
        .ok_or_else(|| Error::invalid("tiler", format!("tile index {index} out of range")))?;
    let r = layout.ratio;
    let want = (r * t.padded.h, r * t.padded.w);
    if upscaled.size() != want {
        return Err(Error::invalid(
            "tiler",
            format!("tile {index} is {:?}, expected {want:?}", upscaled.size()),
        ));
    }
    let (top, _, left, _) = t.padding();
    Ok(upscaled.crop(r * top, r * left, r * t.core.h, r * t.core.w))
}

/// Assembles trimmed cores keyed by tile index, in any order. Also
/// returns the per-output-pixel write count.
pub fn stitch_counted(cores: &[(usize, ImageTensor)], layout: &TileLayout) -> Result<(ImageTensor, Vec<u32>)> {
    let r = layout.ratio;
    let (oh, ow) = layout.output_size();
    let mut seen = vec![false; layout.k()];
    let mut out = Tensor::zeros(Shape::new(1, 3, oh, ow));
    let mut counts = vec![0u32; oh * ow];
    for (index, img) in cores {
        let t = layout
            .tiles
            .get(*index)
            .ok_or_else(|| Error::invalid("tiler", format!("tile index {index} out of range")))?;
        if std::mem::replace(&mut seen[*index], true) {
            return Err(Error::invalid("tiler", format!("tile {index} supplied twice")));
        }
        if img.size() != (r * t.core.h, r * t.core.w) {
            return Err(Error::invalid(
                "tiler",
                format!("core {index} is {:?}, expected {:?}", img.size(), (r * t.core.h, r * t.core.w)),
            ));
        }
        let (y0, x0) = (r * t.core.y, r * t.core.x);
        out.paste(img.tensor(), y0, x0);
        for y in y0..y0 + r * t.core.h {
            for c in &mut counts[y * ow + x0..y * ow + x0 + r * t.core.w] {
                *c += 1;
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::invalid("tiler", format!("tile {missing} is missing")));
    }
    Ok((ImageTensor::new(out)?, counts))
}

pub fn stitch(cores: &[(usize, ImageTensor)], layout: &TileLayout) -> Result<ImageTensor> {
    stitch_counted(cores, layout).map(|(img, _)| img)
}

/// Tiled upscale of an already noised image, at most `max_jobs` tiles in
/// flight (0 = unbounded).
pub fn tiled_sr_noised<M: SrNetwork + ?Sized>(
    noised: &ImageTensor,
    model: &M,
    layout: &TileLayout,
    max_jobs: usize,
) -> Result<ImageTensor> {
    if model.ratio() != layout.ratio {
        return Err(Error::invalid(
            "tiler",
            format!("model ratio {} differs from layout ratio {}", model.ratio(), layout.ratio),
        ));
    }
    let parts = split(noised, layout)?;
    let cores = par::map_range_bounded(layout.k(), max_jobs, |i| {
        sr_image(model, &parts[i]).and_then(|up| trim(&up, layout, i)).map(|c| (i, c))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    stitch(&cores, layout)
}

/// Adds noise once to the whole image, then upscales tile by tile.
pub fn tiled_sr<M: SrNetwork + ?Sized, R: Rng + ?Sized>(
    image: &ImageTensor,
    model: &M,
    layout: &TileLayout,
    noise_sigma: f32,
    rng: &mut R,
) -> Result<ImageTensor> {
    check_size(image, layout)?;
    let noised = add_noise(image, noise_sigma, rng);
    tiled_sr_noised(&noised, model, layout, par::threads())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamReport {
    /// Row-major max-over-channels |tiled - whole|; omitted from manifests.
    #[serde(skip)]
    pub map: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub band_half_width: usize,
    pub band_pixels: usize,
    pub band_mean: f64,
    pub interior_mean: f64,
    pub max: f32,
}

impl SeamReport {
    /// Fraction of pixels whose difference is at most `tol`.
    pub fn fraction_within(&self, tol: f32) -> f64 {
        self.map.iter().filter(|&&d| d <= tol).count() as f64 / self.map.len().max(1) as f64
    }
}

/// Band mask: output pixels within `half` of an internal tile boundary.
pub fn band_mask(layout: &TileLayout, half: usize) -> Vec<bool> {
    let (oh, ow) = layout.output_size();
    let (ys, xs) = layout.boundaries();
    let near = |v: usize, bs: &[usize]| bs.iter().any(|&b| v + half >= b && v < b + half);
    let rows: Vec<bool> = (0..oh).map(|y| near(y, &ys)).collect();
    let cols: Vec<bool> = (0..ow).map(|x| near(x, &xs)).collect();
    let mut m = vec![false; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            m[y * ow + x] = rows[y] || cols[x];
        }
    }
    m
}

/// Default band half-width: `r·α`, at least `r`.
pub fn default_band(layout: &TileLayout) -> usize {
    layout.ratio * layout.overlap.max(1)
}

pub fn seam_diff(tiled: &ImageTensor, whole: &ImageTensor, layout: &TileLayout, band_half_width: usize) -> Result<SeamReport> {
    if tiled.size() != whole.size() {
        return Err(Error::invalid(
            "tiler",
            format!("seam diff of {:?} against {:?}", tiled.size(), whole.size()),
        ));
    }
    if tiled.size() != layout.output_size() {
        return Err(Error::invalid("tiler", "seam diff images do not match the layout output"));
    }
    let (h, w) = tiled.size();
    let (a, b) = (tiled.tensor(), whole.tensor());
    let mut map = vec![0.0f32; h * w];
    for c in 0..3 {
        let off = c * h * w;
        for (i, m) in map.iter_mut().enumerate() {
            *m = m.max((a.data()[off + i] - b.data()[off + i]).abs());
        }
    }
    let mask = band_mask(layout, band_half_width);
    let (mut bs, mut bn, mut is, mut inn) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (d, &m) in map.iter().zip(&mask) {
        if m {
            bs += *d as f64;
            bn += 1;
        } else {
            is += *d as f64;
            inn += 1;
        }
    }
    Ok(SeamReport {
        max: map.iter().copied().fold(0.0, f32::max),
        map,
        height: h,
        width: w,
        band_half_width,
        band_pixels: bn,
        band_mean: if bn > 0 { bs / bn as f64 } else { 0.0 },
        interior_mean: if inn > 0 { is / inn as f64 } else { 0.0 },
    })
}
