//! Six hand-countable samples on 4×4 images, one per official setting,
//! with fixed soft predictions for checking the evaluation protocol.
//!
//! Pixels are numbered row-major, 0..16.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::synth::BACKGROUND;
use super::{save_manifest, save_rgb, CategoryTables, CorSample, Manifest, Mask, Split, MANIFEST_VERSION};
use crate::error::Result;

pub const SIDE: usize = 4;

struct Entry {
    id: &'static str,
    split: Split,
    category: &'static str,
    setting: &'static str,
    reference: (&'static str, &'static str),
    target: &'static str,
    positives: &'static [&'static str],
    negatives: &'static [&'static str],
    text: &'static str,
}

/// Object masks by name: the pixels each one covers.
const OBJECTS: [(&str, &[usize]); 19] = [
    ("r1", &[5, 6, 9, 10]),
    ("r3", &[5, 6, 9, 10]),
    ("r4", &[5, 6, 9, 10]),
    ("r6", &[5, 6, 9, 10]),
    ("t1a", &[0, 1, 4, 5]),
    ("t2a", &[0, 1, 4, 5]),
    ("t2b", &[2, 3]),
    ("t3a", &[5]),
    ("t3b", &[0]),
    ("t3c", &[15]),
    ("t4a", &[0]),
    ("t4b", &[3]),
    ("t4c", &[10, 11, 14, 15]),
    ("t5a", &[0, 1]),
    ("t5b", &[2, 3]),
    ("t5c", &[8, 9]),
    ("t6a", &[0]),
    ("t6b", &[5]),
    ("t6c", &[10]),
];

// s1 and s2 share a reference; s5's reference is s4's target image.
const ENTRIES: [Entry; 6] = [
    Entry {
        id: "s1",
        split: Split::Train,
        category: "circle",
        setting: "1p0n",
        reference: ("r1", "r1"),
        target: "t1",
        positives: &["t1a"],
        negatives: &[],
        text: "change the color to red",
    },
    Entry {
        id: "s2",
        split: Split::Train,
        category: "circle",
        setting: "1p1n",
        reference: ("r1", "r1"),
        target: "t2",
        positives: &["t2a"],
        negatives: &["t2b"],
        text: "change the color to blue",
    },
    Entry {
        id: "s3",
        split: Split::Train,
        category: "square",
        setting: "1p2n",
        reference: ("r3", "r3"),
        target: "t3",
        positives: &["t3a"],
        negatives: &["t3b", "t3c"],
        text: "change the size to smaller",
    },
    Entry {
        id: "s4",
        split: Split::TestBase,
        category: "circle",
        setting: "2p0n",
        reference: ("r4", "r4"),
        target: "t4",
        positives: &["t4a", "t4b"],
        negatives: &[],
        text: "change the color to dark",
    },
    Entry {
        id: "s5",
        split: Split::TestBase,
        category: "square",
        setting: "2p1n",
        reference: ("t4", "t4c"),
        target: "t5",
        positives: &["t5a", "t5b"],
        negatives: &["t5c"],
        text: "change the color to light",
    },
    Entry {
        id: "s6",
        split: Split::TestNovel,
        category: "star",
        setting: "3p0n",
        reference: ("r6", "r6"),
        target: "t6",
        positives: &["t6a", "t6b", "t6c"],
        negatives: &[],
        text: "change the orientation to rotated",
    },
];

fn pixels(name: &str) -> Vec<usize> {
    OBJECTS.iter().find(|(n, _)| *n == name).map(|(_, p)| p.to_vec()).expect("fixture object")
}

fn mask_of(name: &str) -> Mask {
    let on = pixels(name);
    Mask::from_fn(SIDE, SIDE, |y, x| on.contains(&(y * SIDE + x)))
}

fn image_path(name: &str) -> PathBuf {
    Path::new("images").join(format!("{name}.png"))
}

fn mask_path(name: &str) -> PathBuf {
    Path::new("masks").join(format!("{name}.png"))
}

/// Manifest without touching the filesystem.
pub fn six_setting_manifest() -> Manifest {
    let samples = ENTRIES
        .iter()
        .map(|e| CorSample {
            pair_id: e.id.to_string(),
            split: e.split,
            category: e.category.to_string(),
            setting: e.setting.to_string(),
            ref_image: image_path(e.reference.0),
            ref_mask: mask_path(e.reference.1),
            retrieval_text: e.text.to_string(),
            target_image: image_path(e.target),
            positive_masks: e.positives.iter().map(|n| mask_path(n)).collect(),
            negative_masks: e.negatives.iter().map(|n| mask_path(n)).collect(),
            provenance: Vec::new(),
        })
        .collect();
    Manifest {
        version: MANIFEST_VERSION,
        categories: CategoryTables { base: vec!["circle".into(), "square".into()], novel: vec!["star".into()] },
        samples,
    }
}

/// Writes images, masks and `manifest.json` under `dir`.
pub fn write_six_setting(dir: &Path) -> Result<Manifest> {
    let manifest = six_setting_manifest();
    let mut images: Vec<(&str, Vec<&str>)> = Vec::new();
    for e in &ENTRIES {
        let objs: Vec<&str> = e.positives.iter().chain(e.negatives).copied().collect();
        images.push((e.target, objs));
        if e.reference.0 == e.reference.1 {
            images.push((e.reference.0, vec![e.reference.1]));
        }
    }
    images.iter_mut().find(|(n, _)| *n == "t4").expect("t4").1.push("t4c");
    for (name, objs) in &images {
        let mut img = RgbImage::from_pixel(SIDE as u32, SIDE as u32, Rgb(BACKGROUND));
        for o in objs {
            for p in pixels(o) {
                img.put_pixel((p % SIDE) as u32, (p / SIDE) as u32, Rgb([200, 60, 60]));
            }
            mask_of(o).save(&dir.join(mask_path(o)))?;
        }
        save_rgb(&img, &dir.join(image_path(name)))?;
    }
    save_manifest(&manifest, &dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Soft predictions, one per sample in manifest order.
pub fn six_setting_predictions() -> Vec<Vec<f64>> {
    let map = |f: &dyn Fn(usize) -> f64| (0..SIDE * SIDE).map(f).collect::<Vec<f64>>();
    vec![
        // s1: exact.
        map(&|p| if [0, 1, 4, 5].contains(&p) { 1.0 } else { 0.0 }),
        // s2: top row at 0.9, half of it right.
        map(&|p| if p < 4 { 0.9 } else { 0.0 }),
        // s3: nothing.
        map(&|_| 0.0),
        // s4: four corners at 0.6 over a 0.2 floor.
        map(&|p| if [0, 3, 12, 15].contains(&p) { 0.6 } else { 0.2 }),
        // s5: one positive and the negative.
        map(&|p| if [0, 1, 8, 9].contains(&p) { 1.0 } else { 0.0 }),
        // s6: the diagonal at 0.7.
        map(&|p| if [0, 5, 10, 15].contains(&p) { 0.7 } else { 0.0 }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_is_valid_and_covers_every_setting() {
        let m = six_setting_manifest();
        m.validate().unwrap();
        let labels: Vec<&str> = m.samples.iter().map(|s| s.setting.as_str()).collect();
        assert_eq!(labels, ["1p0n", "1p1n", "1p2n", "2p0n", "2p1n", "3p0n"]);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_six_setting(dir.path()).unwrap();
        assert_eq!(super::super::load_manifest(&dir.path().join("manifest.json")).unwrap(), m);
        let u = m.samples[5].union_target(dir.path()).unwrap();
        assert_eq!(u.to_f64().iter().sum::<f64>(), 3.0);
    }
}
