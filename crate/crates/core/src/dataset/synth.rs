//! Seeded shape world: flat-coloured geometric shapes on a gray background,
//! with exact instance masks and noun-free attribute-change texts.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{save_rgb, Mask};
use super::{save_manifest, CategoryTables, CorSample, Manifest, Split, MANIFEST_VERSION, OFFICIAL_SETTINGS};
use crate::error::Result;

pub const BASE_SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];
pub const NOVEL_SHAPES: [Shape; 2] = [Shape::Star, Shape::Hexagon];

pub const COLOR_NAMES: [&str; 4] = ["light", "dark", "red", "blue"];
pub const COLOR_VALUES: [[u8; 3]; 4] = [[230, 230, 230], [30, 30, 30], [215, 45, 45], [45, 80, 215]];
pub const BACKGROUND: [u8; 3] = [120, 120, 120];

pub const SMALL_RADIUS: f64 = 8.0;
pub const LARGE_RADIUS: f64 = 12.0;
const ROTATION: f64 = PI / 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Star,
    Hexagon,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Star => "star",
            Shape::Hexagon => "hexagon",
        }
    }

    /// Whether a quarter-turn rotation is visible.
    fn rotates(self) -> bool {
        self != Shape::Circle
    }

    /// Point test in object-local coordinates (y pointing down).
    fn contains(self, u: f64, v: f64, r: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= r * r,
            Shape::Square => u.abs().max(v.abs()) <= 0.8 * r,
            Shape::Triangle => (0..3).all(|k| {
                let t = PI / 2.0 + 2.0 * PI * k as f64 / 3.0;
                u * t.cos() + v * t.sin() <= 0.5 * r
            }),
            Shape::Cross => (u.abs() <= 0.3 * r && v.abs() <= r) || (v.abs() <= 0.3 * r && u.abs() <= r),
            Shape::Hexagon => (0..3).all(|k| {
                let t = PI / 3.0 * k as f64;
                (u * t.cos() + v * t.sin()).abs() <= r * (PI / 6.0).cos()
            }),
            Shape::Star => {
                let pts: Vec<(f64, f64)> = (0..10)
                    .map(|i| {
                        let rad = if i % 2 == 0 { r } else { 0.45 * r };
                        let t = -PI / 2.0 + PI * i as f64 / 5.0;
                        (rad * t.cos(), rad * t.sin())
                    })
                    .collect();
                point_in_polygon(u, v, &pts)
            }
        }
    }
}

fn point_in_polygon(x: f64, y: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: usize,
    pub radius: f64,
    pub angle: f64,
    pub cx: f64,
    pub cy: f64,
}

impl SceneObject {
    pub fn covers(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        self.shape.contains(u, v, self.radius)
    }
}

/// Paints objects in order onto the background; returns the image and one
/// mask per object (pixel centres are sampled).
pub fn render_scene(objects: &[SceneObject], size: usize) -> (RgbImage, Vec<Mask>) {
    let mut img = RgbImage::from_pixel(size as u32, size as u32, Rgb(BACKGROUND));
    let mut masks = Vec::with_capacity(objects.len());
    for o in objects {
        let m = Mask::from_fn(size, size, |y, x| o.covers(x as f64 + 0.5, y as f64 + 0.5));
        for y in 0..size {
            for x in 0..size {
                if m.get(y, x) {
                    img.put_pixel(x as u32, y as u32, Rgb(COLOR_VALUES[o.color]));
                }
            }
        }
        masks.push(m);
    }
    (img, masks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train: usize,
    pub test_base: usize,
    pub test_novel: usize,
    pub image_size: usize,
    /// Chance that the reference image also holds a shape of another category.
    pub ref_distractor: f64,
    /// Chance that the target holds a shape of another category painted in
    /// the requested colour; it is neither positive nor negative.
    pub target_distractor: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { train: 300, test_base: 60, test_novel: 0, image_size: 64, ref_distractor: 0.5, target_distractor: 0.0 }
    }
}

/// Which attribute besides colour the text mentions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Clause {
    None,
    Size,
    Orientation,
    Position(Side),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Side {
    fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Top => "top",
            Side::Bottom => "bottom",
        }
    }

    fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::Top => Side::Bottom,
            Side::Bottom => Side::Top,
        }
    }

    fn holds(self, cx: f64, cy: f64, size: f64) -> bool {
        let (lo, hi) = (size / 2.0 - 4.0, size / 2.0 + 4.0);
        match self {
            Side::Left => cx < lo,
            Side::Right => cx > hi,
            Side::Top => cy < lo,
            Side::Bottom => cy > hi,
        }
    }
}

/// Draws non-overlapping centres; `region[i]` optionally restricts object i.
fn place<R: Rng>(rng: &mut R, objs: &mut [SceneObject], region: &[Option<Side>], size: usize) -> bool {
    let s = size as f64;
    for i in 0..objs.len() {
        let r = objs[i].radius;
        let mut placed = false;
        for _ in 0..400 {
            let cx = rng.random_range(r + 1.0..s - r - 1.0);
            let cy = rng.random_range(r + 1.0..s - r - 1.0);
            if region[i].is_some_and(|side| !side.holds(cx, cy, s)) {
                continue;
            }
            let clear = objs[..i].iter().all(|o| {
                let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                d >= o.radius + r + 3.0
            });
            if clear {
                objs[i].cx = cx;
                objs[i].cy = cy;
                placed = true;
                break;
            }
        }
        if !placed {
            return false;
        }
    }
    true
}

fn pick_other<R: Rng>(rng: &mut R, avoid: usize) -> usize {
    let choices: Vec<usize> = (0..COLOR_NAMES.len()).filter(|c| *c != avoid).collect();
    *choices.choose(rng).expect("palette has several colours")
}

struct Generated {
    reference: Vec<SceneObject>,
    target: Vec<SceneObject>,
    text: String,
}

fn generate_one<R: Rng>(rng: &mut R, shape: Shape, others: &[Shape], positives: usize, negatives: usize, cfg: &SynthConfig) -> Generated {
    let size = cfg.image_size;
    loop {
        let c_pos = rng.random_range(0..COLOR_NAMES.len());
        let c_ref = pick_other(rng, c_pos);
        let mut options = vec![Clause::None, Clause::None, Clause::Size];
        if shape.rotates() {
            options.push(Clause::Orientation);
        }
        if positives == 1 {
            let side = [Side::Left, Side::Right, Side::Top, Side::Bottom][rng.random_range(0..4)];
            options.push(Clause::Position(side));
        }
        let clause = *options.choose(rng).expect("non-empty");
        let random_radius = |rng: &mut R| if rng.random_bool(0.5) { SMALL_RADIUS } else { LARGE_RADIUS };

        let ref_radius = random_radius(rng);
        let pos_radius = match clause {
            Clause::Size => {
                if ref_radius == SMALL_RADIUS {
                    LARGE_RADIUS
                } else {
                    SMALL_RADIUS
                }
            }
            _ => random_radius(rng),
        };
        let pos_angle = if clause == Clause::Orientation { ROTATION } else { 0.0 };
        let obj = |color, radius, angle| SceneObject { shape, color, radius, angle, cx: 0.0, cy: 0.0 };

        let mut reference = vec![obj(c_ref, ref_radius, 0.0)];
        if rng.random_bool(cfg.ref_distractor) {
            let other = *others.choose(rng).expect("other shapes");
            let color = rng.random_range(0..COLOR_NAMES.len());
            reference.push(SceneObject { shape: other, color, radius: random_radius(rng), angle: 0.0, cx: 0.0, cy: 0.0 });
        }
        let mut target: Vec<SceneObject> = (0..positives).map(|_| obj(c_pos, pos_radius, pos_angle)).collect();
        for _ in 0..negatives {
            let r = random_radius(rng);
            target.push(obj(pick_other(rng, c_pos), r, 0.0));
        }
        if rng.random_bool(cfg.target_distractor) {
            let other = *others.choose(rng).expect("other shapes");
            target.push(SceneObject { shape: other, color: c_pos, radius: random_radius(rng), angle: 0.0, cx: 0.0, cy: 0.0 });
        }

        let (mut ref_region, mut tar_region) = (vec![None; reference.len()], vec![None; target.len()]);
        if let Clause::Position(side) = clause {
            ref_region[0] = Some(side.opposite());
            tar_region[0] = Some(side);
        }
        if !place(rng, &mut reference, &ref_region, size) || !place(rng, &mut target, &tar_region, size) {
            continue;
        }

        let mut text = format!("change the color to {}", COLOR_NAMES[c_pos]);
        match clause {
            Clause::None => {}
            Clause::Size => {
                let v = if pos_radius > ref_radius { "bigger" } else { "smaller" };
                text.push_str(&format!(" and change the size to {v}"));
            }
            Clause::Orientation => text.push_str(" and change the orientation to rotated"),
            Clause::Position(side) => text.push_str(&format!(" and change the position to {}", side.name())),
        }
        return Generated { reference, target, text };
    }
}

/// Writes images, masks and `manifest.json` under `out_dir`; paths in the
/// manifest are relative to it.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let plan = [(Split::Train, cfg.train), (Split::TestBase, cfg.test_base), (Split::TestNovel, cfg.test_novel)];
    let mut index = 0usize;
    for (split, count) in plan {
        let pool: &[Shape] = if split == Split::TestNovel { &NOVEL_SHAPES } else { &BASE_SHAPES };
        for _ in 0..count {
            let shape = *pool.choose(&mut rng).expect("shapes");
            let others: Vec<Shape> =
                BASE_SHAPES.iter().chain(NOVEL_SHAPES.iter()).copied().filter(|s| *s != shape).collect();
            let setting = *OFFICIAL_SETTINGS.choose(&mut rng).expect("settings");
            let g = generate_one(&mut rng, shape, &others, setting.positives, setting.negatives, cfg);

            let id = format!("syn{index:05}");
            index += 1;
            let (ref_img, ref_masks) = render_scene(&g.reference, cfg.image_size);
            let (tar_img, tar_masks) = render_scene(&g.target, cfg.image_size);
            let rel = |p: String| PathBuf::from(p);
            let ref_image = rel(format!("images/{id}_ref.png"));
            let target_image = rel(format!("images/{id}_tar.png"));
            let ref_mask = rel(format!("masks/{id}_ref.png"));
            save_rgb(&ref_img, &out_dir.join(&ref_image))?;
            save_rgb(&tar_img, &out_dir.join(&target_image))?;
            ref_masks[0].save(&out_dir.join(&ref_mask))?;
            let mut positive_masks = Vec::new();
            let mut negative_masks = Vec::new();
            for (i, m) in tar_masks.iter().take(setting.positives + setting.negatives).enumerate() {
                let p = if i < setting.positives {
                    let p = rel(format!("masks/{id}_pos{i}.png"));
                    positive_masks.push(p.clone());
                    p
                } else {
                    let p = rel(format!("masks/{id}_neg{}.png", i - setting.positives));
                    negative_masks.push(p.clone());
                    p
                };
                m.save(&out_dir.join(&p))?;
            }
            samples.push(CorSample {
                pair_id: id,
                split,
                category: shape.name().to_string(),
                setting: setting.label(),
                ref_image,
                ref_mask,
                retrieval_text: g.text,
                target_image,
                positive_masks,
                negative_masks,
                provenance: Vec::new(),
            });
        }
    }
    let categories = CategoryTables {
        base: BASE_SHAPES.iter().map(|s| s.name().to_string()).collect(),
        novel: NOVEL_SHAPES.iter().map(|s| s.name().to_string()).collect(),
    };
    let manifest = Manifest { version: MANIFEST_VERSION, categories, samples };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_have_sensible_areas() {
        for shape in BASE_SHAPES.iter().chain(NOVEL_SHAPES.iter()) {
            let o = SceneObject { shape: *shape, color: 0, radius: LARGE_RADIUS, angle: 0.0, cx: 32.0, cy: 32.0 };
            let (_, masks) = render_scene(&[o], 64);
            let a = masks[0].area();
            assert!((100..=460).contains(&a), "{:?} area {a}", shape);
        }
    }

    #[test]
    fn rotation_changes_square_mask() {
        let mut o = SceneObject { shape: Shape::Square, color: 0, radius: 12.0, angle: 0.0, cx: 32.0, cy: 32.0 };
        let (_, a) = render_scene(&[o], 64);
        o.angle = ROTATION;
        let (_, b) = render_scene(&[o], 64);
        assert_ne!(a[0], b[0]);
    }
}
