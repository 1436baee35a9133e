//! A 20-image annotation set exercising every pipeline rule, with the
//! validator script that goes with it.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::render::BBox;
use super::vlm::{ScriptedVlm, VlmStep};
use super::{PipelineConfig, RawAnnotations, RawImage, RawObject};
use crate::dataset::synth::{SceneObject, Shape, BACKGROUND};
use crate::dataset::{save_rgb, Mask};
use crate::error::{CorError, Result};

pub const SIZE: usize = 64;

const BLACK: [u8; 3] = [25, 25, 25];
const DARK_BROWN: [u8; 3] = [70, 45, 30];
const BROWN: [u8; 3] = [150, 100, 60];
const CREAM: [u8; 3] = [225, 215, 200];
const RED: [u8; 3] = [210, 40, 40];
const BLUE: [u8; 3] = [40, 70, 210];
const GREEN: [u8; 3] = [40, 170, 60];
const YELLOW: [u8; 3] = [230, 200, 40];
const ORANGE: [u8; 3] = [230, 130, 30];
const PURPLE: [u8; 3] = [120, 60, 170];
const TEAL: [u8; 3] = [40, 160, 160];
const PINK: [u8; 3] = [230, 120, 180];
const OLIVE: [u8; 3] = [200, 200, 60];

struct Spec {
    image: u8,
    tag: char,
    category: &'static str,
    shape: Shape,
    color: [u8; 3],
    radius: f64,
    center: (f64, f64),
    angle: f64,
    /// Annotated box covers the whole image instead of the mask.
    loose_box: bool,
}

const fn obj(image: u8, tag: char, category: &'static str, shape: Shape, color: [u8; 3], radius: f64, center: (f64, f64)) -> Spec {
    Spec { image, tag, category, shape, color, radius, center, angle: 0.0, loose_box: false }
}

const MID: (f64, f64) = (32.0, 32.0);
const LEFT: (f64, f64) = (18.0, 32.0);
const RIGHT: (f64, f64) = (46.0, 32.0);

fn specs() -> Vec<Spec> {
    use Shape::*;
    vec![
        // Two dark bears side by side: the target of the false-match example.
        obj(1, 'a', "bear", Circle, BLACK, 11.0, LEFT),
        obj(1, 'b', "bear", Circle, DARK_BROWN, 11.0, RIGHT),
        obj(2, 'a', "bear", Circle, BROWN, 12.0, MID),
        obj(3, 'a', "bear", Circle, CREAM, 12.0, MID),
        obj(4, 'a', "bear", Circle, BROWN, 4.0, MID),
        obj(5, 'a', "cup", Square, RED, 12.0, MID),
        obj(6, 'a', "cup", Square, BLUE, 12.0, MID),
        obj(7, 'a', "cup", Square, OLIVE, 9.0, (16.0, 16.0)),
        obj(7, 'b', "cup", Square, OLIVE, 9.0, (48.0, 16.0)),
        obj(7, 'c', "cup", Square, OLIVE, 9.0, (16.0, 48.0)),
        obj(7, 'd', "cup", Square, OLIVE, 9.0, (48.0, 48.0)),
        obj(8, 'a', "cup", Square, GREEN, 12.0, MID),
        obj(9, 'a', "dog", Triangle, YELLOW, 14.0, (18.0, 34.0)),
        Spec { angle: PI, ..obj(9, 'b', "dog", Triangle, YELLOW, 14.0, (46.0, 34.0)) },
        obj(10, 'a', "dog", Triangle, ORANGE, 16.0, MID),
        obj(11, 'a', "dog", Square, PURPLE, 44.0, MID),
        Spec { loose_box: true, ..obj(12, 'a', "dog", Circle, TEAL, 8.0, MID) },
        obj(13, 'a', "kite", Cross, RED, 14.0, MID),
        obj(14, 'a', "kite", Cross, BLUE, 14.0, MID),
        obj(15, 'a', "kite", Cross, GREEN, 12.0, LEFT),
        obj(15, 'b', "kite", Cross, CREAM, 12.0, RIGHT),
        obj(16, 'a', "vase", Hexagon, TEAL, 13.0, MID),
        obj(17, 'a', "vase", Hexagon, PINK, 13.0, MID),
        obj(18, 'a', "vase", Hexagon, PINK, 8.0, MID),
        obj(19, 'a', "zebra", Star, CREAM, 15.0, MID),
        obj(20, 'a', "cup", Square, YELLOW, 11.0, LEFT),
        obj(20, 'b', "kite", Cross, PURPLE, 11.0, RIGHT),
    ]
}

pub fn image_id(n: u8) -> String {
    format!("img{n:02}")
}

pub fn object_id(image: u8, category: &str, tag: char) -> String {
    format!("{}-{category}-{tag}", image_id(image))
}

/// Writes images, masks and `annotations.json` under `dir`.
pub fn write_fixture(dir: &Path) -> Result<RawAnnotations> {
    let specs = specs();
    let mut ann = RawAnnotations::default();
    for n in 1..=20u8 {
        let id = image_id(n);
        let mut img = RgbImage::from_pixel(SIZE as u32, SIZE as u32, Rgb(BACKGROUND));
        let source = if n % 2 == 1 { "src-a" } else { "src-b" };
        for s in specs.iter().filter(|s| s.image == n) {
            let shape = SceneObject { shape: s.shape, color: 0, radius: s.radius, angle: s.angle, cx: s.center.0, cy: s.center.1 };
            let mask = Mask::from_fn(SIZE, SIZE, |y, x| shape.covers(x as f64 + 0.5, y as f64 + 0.5));
            for (i, on) in mask.data.iter().enumerate() {
                if *on != 0 {
                    img.put_pixel((i % SIZE) as u32, (i / SIZE) as u32, Rgb(s.color));
                }
            }
            let bbox = if s.loose_box {
                BBox { x: 0.0, y: 0.0, w: SIZE as f64, h: SIZE as f64 }
            } else {
                BBox::of_mask(&mask).ok_or_else(|| CorError::Input(format!("fixture object {n}{} is empty", s.tag)))?
            };
            let oid = object_id(n, s.category, s.tag);
            let rel = Path::new("masks").join(format!("{oid}.png"));
            std::fs::create_dir_all(dir.join("masks")).map_err(|e| CorError::io(dir, e))?;
            mask.save(&dir.join(&rel))?;
            ann.objects.push(RawObject {
                id: oid,
                image_id: id.clone(),
                category: s.category.to_string(),
                bbox,
                mask: rel,
                width: SIZE,
                height: SIZE,
                source: source.to_string(),
            });
        }
        let rel = Path::new("images").join(format!("{id}.png"));
        save_rgb(&img, &dir.join(&rel))?;
        ann.images.push(RawImage { id, file: rel, width: SIZE, height: SIZE, source: source.to_string() });
    }
    ann.save(&dir.join("annotations.json"))?;
    Ok(ann)
}

pub const DEFAULT_TEXTS: &str =
    "[(change the color to bright), (change the size to bigger), (make it much larger and move it over to the far left side)]";
pub const BEAR_TEXTS: &str = "[(change the color to bright), (change the posture to walking), (change the direction to right)]";
pub const KITE_TEXTS: &str = "[(change the kite to red), (change the position to left)]";

/// Everything passes unless a rule says otherwise:
/// - the green cup fails the quality check,
/// - the brown bear marked red against the black one is indistinct,
/// - the blue cup does not pair with the red one,
/// - vase texts about size fail verification,
/// - and "bright" for the black bear alone is a false match, since the
///   other dark bear is still in the picture once the target is painted out.
pub fn fixture_script() -> ScriptedVlm {
    ScriptedVlm::uniform("1", DEFAULT_TEXTS)
        .with_rule(VlmStep::Quality, "img08-cup-a", "0")
        .with_rule(VlmStep::Distinct, r"img01-bear-b\|img01-bear-a", "0")
        .with_rule(VlmStep::Pair, "img06/cup/.*<img05-cup-a", "0")
        .with_rule(VlmStep::Text, ".*/bear/.*", BEAR_TEXTS)
        .with_rule(VlmStep::Text, ".*/kite/.*", KITE_TEXTS)
        .with_rule(VlmStep::Verify, ".*/vase/.*#1", "0")
        .with_rule(VlmStep::FalseMatch, "img01/bear/img01-bear-a<.*#0", "0")
}

pub fn fixture_config() -> PipelineConfig {
    PipelineConfig { seed: 7, ..PipelineConfig::default() }
}
