use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{CorError, Result};
use crate::numerics::Tensor;

/// Binary instance mask, row-major, one byte (0 or 1) per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// Inclusive pixel bounds `(x0, y0, x1, y1)`.
pub type PixelBox = (usize, usize, usize, usize);

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn bbox(&self) -> Option<PixelBox> {
        let mut b: Option<PixelBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.to_f64()).expect("mask size")
    }

    /// Nonzero pixels are foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Mask { height: h as usize, width: w as usize, data: img.as_raw().iter().map(|v| (*v != 0) as u8).collect() }
    }

    pub fn to_gray(&self) -> GrayImage {
        let raw = self.data.iter().map(|v| if *v != 0 { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("mask size")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| CorError::Image { path: path.into(), message: e.to_string() })?;
        Ok(Mask::from_gray(&img.into_luma8()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        self.to_gray()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| CorError::Image { path: path.into(), message: e.to_string() })
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CorError::io(parent, e))?;
    }
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| CorError::Image { path: path.into(), message: e.to_string() })?;
    Ok(img.into_rgb8())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CorError::Image { path: path.into(), message: e.to_string() })
}

/// Pixelwise OR.
pub fn union_mask(masks: &[Mask]) -> Result<Mask> {
    let first = masks.first().ok_or_else(|| CorError::Input("union of no masks".into()))?;
    let mut out = first.clone();
    for m in &masks[1..] {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(CorError::dim(format!(
                "mask {}x{} does not match {}x{}",
                m.height, m.width, first.height, first.width
            )));
        }
        out.data.iter_mut().zip(&m.data).for_each(|(o, v)| *o |= (*v != 0) as u8);
    }
    Ok(out)
}
