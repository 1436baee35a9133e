//! Validator-facing renderings and the toy object embedder.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::Mask;

pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];

/// Axis-aligned box in pixel units, `x`/`y` at the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.w > 0.0 && self.h > 0.0
            && self.x + self.w <= width as f64
            && self.y + self.h <= height as f64
    }

    /// Whether the pixel with top-left corner `(px, py)` lies inside.
    pub fn contains_pixel(&self, px: usize, py: usize) -> bool {
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        cx >= self.x && cx <= self.x + self.w && cy >= self.y && cy <= self.y + self.h
    }

    /// Tight box around a mask's foreground.
    pub fn of_mask(m: &Mask) -> Option<BBox> {
        m.bbox().map(|(x0, y0, x1, y1)| BBox {
            x: x0 as f64,
            y: y0 as f64,
            w: (x1 - x0 + 1) as f64,
            h: (y1 - y0 + 1) as f64,
        })
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let ix = ((self.x + self.w).min(o.x + o.w) - self.x.max(o.x)).max(0.0);
        let iy = ((self.y + self.h).min(o.y + o.h) - self.y.max(o.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One-pixel outline along the box edge, clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = b.x.floor() as i64;
    let y0 = b.y.floor() as i64;
    let x1 = (b.x + b.w).ceil() as i64 - 1;
    let y1 = (b.y + b.h).ceil() as i64 - 1;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

pub fn with_boxes(img: &RgbImage, boxes: &[(BBox, [u8; 3])]) -> RgbImage {
    let mut out = img.clone();
    for (b, c) in boxes {
        draw_box(&mut out, b, *c);
    }
    out
}

pub fn mean_color(img: &RgbImage) -> [u8; 3] {
    let n = (img.width() * img.height()).max(1) as f64;
    let mut sum = [0.0f64; 3];
    for p in img.pixels() {
        for (s, v) in sum.iter_mut().zip(p.0) {
            *s += v as f64;
        }
    }
    sum.map(|s| (s / n).round() as u8)
}

/// Paints the masked pixels with the image's mean colour.
pub fn mask_out(img: &RgbImage, masks: &[&Mask]) -> RgbImage {
    let fill = Rgb(mean_color(img));
    let mut out = img.clone();
    for m in masks {
        for y in 0..m.height.min(img.height() as usize) {
            for x in 0..m.width.min(img.width() as usize) {
                if m.get(y, x) {
                    out.put_pixel(x as u32, y as u32, fill);
                }
            }
        }
    }
    out
}

/// Object-level feature for the negative-similarity filter.
pub trait Embedder: Sync {
    fn embed(&self, img: &RgbImage, mask: &Mask) -> Vec<f64>;
}

/// L2-normalised joint RGB histogram over the masked pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColorHistogram {
    pub bins: usize,
}

impl Default for ColorHistogram {
    fn default() -> Self {
        ColorHistogram { bins: 8 }
    }
}

impl ColorHistogram {
    pub fn bin_of(&self, rgb: [u8; 3]) -> usize {
        let b = |v: u8| v as usize * self.bins / 256;
        (b(rgb[0]) * self.bins + b(rgb[1])) * self.bins + b(rgb[2])
    }
}

impl Embedder for ColorHistogram {
    fn embed(&self, img: &RgbImage, mask: &Mask) -> Vec<f64> {
        let mut h = vec![0.0; self.bins.pow(3)];
        for y in 0..mask.height.min(img.height() as usize) {
            for x in 0..mask.width.min(img.width() as usize) {
                if mask.get(y, x) {
                    h[self.bin_of(img.get_pixel(x as u32, y as u32).0)] += 1.0;
                }
            }
        }
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            h.iter_mut().for_each(|v| *v /= norm);
        }
        h
    }
}

/// Zero when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
