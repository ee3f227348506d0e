//! PNG/JPEG input, PNG output, dataset directories and heatmaps.

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::tensor::{Shape, Tensor};
use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb};
use std::path::{Path, PathBuf};

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

fn from_planes(h: usize, w: usize, px: impl Iterator<Item = [f32; 3]>) -> ImageTensor {
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    let plane = h * w;
    for (i, p) in px.enumerate() {
        for c in 0..3 {
            t.data_mut()[c * plane + i] = p[c] * 2.0 - 1.0;
        }
    }
    ImageTensor::new(t).expect("rgb shape")
}

pub fn decode(img: DynamicImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    if sixteen {
        let buf = img.to_rgb16();
        from_planes(h, w, buf.pixels().map(|p| p.0.map(|v| v as f32 / 65535.0)))
    } else {
        let buf = img.to_rgb8();
        from_planes(h, w, buf.pixels().map(|p| p.0.map(|v| v as f32 / 255.0)))
    }
}

/// Loads an 8- or 16-bit PNG or a JPEG, mapped linearly to [-1, 1].
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let format = ImageFormat::from_path(path).map_err(|e| image_err(path, e))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(image_err(path, format!("unsupported format {format:?}; use PNG or JPEG")));
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    Ok(decode(img))
}

fn quantise(v: f32, max: f32) -> f32 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * max).round()
}

fn pixels(img: &ImageTensor) -> impl Iterator<Item = [f32; 3]> + '_ {
    let (h, w) = img.size();
    let plane = h * w;
    let d = img.tensor().data();
    (0..plane).map(move |i| [d[i], d[plane + i], d[2 * plane + i]])
}

fn check_png(path: &Path) -> Result<()> {
    match ImageFormat::from_path(path) {
        Ok(ImageFormat::Png) => Ok(()),
        _ => Err(image_err(path, "output images must be PNG")),
    }
}

/// 8-bit RGB PNG.
pub fn save_image(path: &Path, img: &ImageTensor) -> Result<()> {
    check_png(path)?;
    let (h, w) = img.size();
    let data: Vec<u8> = pixels(img).flat_map(|p| p.map(|v| quantise(v, 255.0) as u8)).collect();
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer size");
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// 16-bit RGB PNG.
pub fn save_image_16(path: &Path, img: &ImageTensor) -> Result<()> {
    check_png(path)?;
    let (h, w) = img.size();
    let data: Vec<u16> = pixels(img).flat_map(|p| p.map(|v| quantise(v, 65535.0) as u16)).collect();
    let buf: ImageBuffer<Rgb<u16>, _> = ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer size");
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Image files directly inside `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<(PathBuf, ImageTensor)>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::invalid("harness", format!("no PNG or JPEG images in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| load_image(&p).map(|i| (p, i)))
        .collect()
}

/// Grey-to-red heatmap of a non-negative map, scaled to its maximum.
pub fn heatmap(map: &[f64], height: usize, width: usize) -> ImageTensor {
    let max = map.iter().copied().fold(0.0f64, f64::max);
    let plane = height * width;
    let mut t = Tensor::zeros(Shape::new(1, 3, height, width));
    for (i, &v) in map.iter().enumerate().take(plane) {
        let u = if max > 0.0 { (v / max) as f32 } else { 0.0 };
        let d = t.data_mut();
        d[i] = 2.0 * u.sqrt() - 1.0;
        d[plane + i] = 2.0 * u * u - 1.0;
        d[2 * plane + i] = 2.0 * u.powi(4) - 1.0;
    }
    ImageTensor::new(t).expect("rgb shape")
}
