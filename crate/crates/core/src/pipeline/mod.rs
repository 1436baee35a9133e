//! Annotation pipeline: raw instance annotations in, validated retrieval
//! triplets out, in four stages of deterministic filters and validator checks.

pub mod fixture;
pub mod render;
pub mod run;
pub mod steps;
pub mod vlm;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_rgb, Mask, Setting, OFFICIAL_SETTINGS};
use crate::error::{CorError, Result};

pub use render::{BBox, ColorHistogram, Embedder};
pub use run::{run_pipeline, PipelineOutput};
pub use vlm::{HttpConfig, HttpVlm, ScriptedVlm, VlmClient, VlmRequest, VlmStep};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawImage {
    pub id: String,
    /// Relative to the annotation root.
    pub file: PathBuf,
    pub width: usize,
    pub height: usize,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawObject {
    pub id: String,
    pub image_id: String,
    pub category: String,
    pub bbox: BBox,
    /// Grayscale PNG at image resolution, relative to the annotation root.
    pub mask: PathBuf,
    pub width: usize,
    pub height: usize,
    pub source: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotations {
    pub images: Vec<RawImage>,
    pub objects: Vec<RawObject>,
}

impl RawAnnotations {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CorError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| CorError::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Mask area over image area must lie in `[min_area, max_area]`.
    pub min_area: f64,
    pub max_area: f64,
    /// Mask area over box area must be at least this.
    pub min_fill: f64,
    /// Images with more same-category instances than this are dropped for that category.
    pub max_instances: usize,
    pub category_cap: usize,
    pub min_reference_area: f64,
    /// Positive/negative pairs more similar than this are discarded.
    pub similarity_cutoff: f64,
    pub max_references: usize,
    pub max_text_words: usize,
    pub min_categories: usize,
    /// Fraction of categories held out as novel.
    pub novel_share: f64,
    /// Fraction of base (category, image) groups assigned to training.
    pub train_share: f64,
    pub seed: u64,
    pub settings: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            min_area: 0.03,
            max_area: 0.80,
            min_fill: 0.20,
            max_instances: 3,
            category_cap: 300,
            min_reference_area: 0.05,
            similarity_cutoff: 0.8,
            max_references: 5,
            max_text_words: 10,
            min_categories: 5,
            novel_share: 78.0 / 408.0,
            train_share: 0.75,
            seed: 0,
            settings: OFFICIAL_SETTINGS.iter().map(Setting::label).collect(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorError::Input(format!("pipeline config: {m}")));
        if !(0.0 < self.min_area && self.min_area < self.max_area && self.max_area <= 1.0) {
            return bad(format!("need 0 < min_area ({}) < max_area ({}) <= 1", self.min_area, self.max_area));
        }
        if !(self.similarity_cutoff > 0.0 && self.similarity_cutoff <= 1.0) {
            return bad(format!("similarity cutoff {} outside (0, 1]", self.similarity_cutoff));
        }
        for (name, v) in [("novel_share", self.novel_share), ("train_share", self.train_share)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} {v} outside (0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.min_fill) || !(0.0..=1.0).contains(&self.min_reference_area) {
            return bad("fill and reference-area thresholds must lie in [0, 1]".into());
        }
        if self.category_cap == 0 || self.max_references == 0 || self.max_instances == 0 {
            return bad("caps must be positive".into());
        }
        self.allowed_settings().map(|_| ())
    }

    pub fn allowed_settings(&self) -> Result<Vec<Setting>> {
        self.settings.iter().map(|s| Setting::parse(s)).collect()
    }
}

/// Why a candidate was dropped; one variant per rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooSmall,
    TooLarge,
    SparseMask,
    Crowded,
    FewImages,
    CategoryCap,
    LowQuality,
    MultipleInstances,
    ReferenceTooSmall,
    UnsupportedSetting,
    SimilarNegative,
    Indistinct,
    SameImage,
    OverLimit,
    PairRejected,
    TooLong,
    MentionsCategory,
    NotVerified,
    FalseMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Reject(RejectReason),
}

/// One line of the audit log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuditRecord {
    Reject { step: u8, subject: String, reason: RejectReason },
    Summary { step: u8, candidates: usize, kept: usize },
}

/// Ordered audit records of one step plus its counts.
#[derive(Clone, Debug, Default)]
pub struct StepAudit {
    pub step: u8,
    pub records: Vec<AuditRecord>,
    candidates: usize,
}

impl StepAudit {
    pub fn new(step: u8) -> Self {
        StepAudit { step, records: Vec::new(), candidates: 0 }
    }

    pub fn keep(&mut self) {
        self.candidates += 1;
    }

    pub fn reject(&mut self, subject: impl Into<String>, reason: RejectReason) {
        self.candidates += 1;
        self.records.push(AuditRecord::Reject { step: self.step, subject: subject.into(), reason });
    }

    /// Appends the summary line and returns all records.
    pub fn finish(mut self) -> Vec<AuditRecord> {
        let rejected = self.records.len();
        self.records.push(AuditRecord::Summary {
            step: self.step,
            candidates: self.candidates,
            kept: self.candidates - rejected,
        });
        self.records
    }
}

/// Annotations with pixels and masks in memory.
pub struct Corpus {
    pub annotations: RawAnnotations,
    pub images: BTreeMap<String, RgbImage>,
    pub masks: BTreeMap<String, Mask>,
    /// Annotated instances per (image, category).
    pub census: BTreeMap<(String, String), usize>,
}

impl Corpus {
    pub fn load(root: &Path, annotations: RawAnnotations) -> Result<Self> {
        let mut images = BTreeMap::new();
        for im in &annotations.images {
            let img = load_rgb(&root.join(&im.file))?;
            if img.dimensions() != (im.width as u32, im.height as u32) {
                return Err(CorError::Input(format!("image {} is {:?}, annotated {}x{}", im.id, img.dimensions(), im.width, im.height)));
            }
            if images.insert(im.id.clone(), img).is_some() {
                return Err(CorError::Input(format!("duplicate image id {}", im.id)));
            }
        }
        let mut masks = BTreeMap::new();
        for o in &annotations.objects {
            masks.insert(o.id.clone(), Mask::load(&root.join(&o.mask))?);
        }
        Corpus::from_parts(annotations, images, masks)
    }

    /// Builds an in-memory corpus; `masks` is keyed by object id.
    pub fn from_parts(
        annotations: RawAnnotations,
        images: BTreeMap<String, RgbImage>,
        masks: BTreeMap<String, Mask>,
    ) -> Result<Self> {
        let mut census = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for o in &annotations.objects {
            if !seen.insert(o.id.as_str()) {
                return Err(CorError::Input(format!("duplicate object id {}", o.id)));
            }
            let img = images
                .get(&o.image_id)
                .ok_or_else(|| CorError::Input(format!("object {} refers to unknown image {}", o.id, o.image_id)))?;
            let m = masks.get(&o.id).ok_or_else(|| CorError::Input(format!("object {} has no mask", o.id)))?;
            validate_object(o, m, img)?;
            *census.entry((o.image_id.clone(), o.category.clone())).or_insert(0) += 1;
        }
        Ok(Corpus { annotations, images, masks, census })
    }

    pub fn object(&self, id: &str) -> &RawObject {
        self.annotations.objects.iter().find(|o| o.id == id).expect("known object id")
    }

    pub fn instances(&self, o: &RawObject) -> usize {
        self.census.get(&(o.image_id.clone(), o.category.clone())).copied().unwrap_or(0)
    }

    /// Mask area over image area.
    pub fn area_ratio(&self, o: &RawObject) -> f64 {
        self.masks[&o.id].area() as f64 / (o.width * o.height) as f64
    }

    /// Mask area over box area.
    pub fn fill_ratio(&self, o: &RawObject) -> f64 {
        self.masks[&o.id].area() as f64 / o.bbox.area()
    }
}

/// Box inside the image, mask the image's size and inside the box.
pub fn validate_object(o: &RawObject, m: &Mask, img: &RgbImage) -> Result<()> {
    let bad = |why: String| Err(CorError::Input(format!("object {}: {why}", o.id)));
    if (o.width as u32, o.height as u32) != img.dimensions() || (m.width, m.height) != (o.width, o.height) {
        return bad(format!("mask {}x{} and image {:?} disagree with {}x{}", m.width, m.height, img.dimensions(), o.width, o.height));
    }
    if !o.bbox.within(o.width, o.height) {
        return bad(format!("box {:?} leaves the image", o.bbox));
    }
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(y, x) && !o.bbox.contains_pixel(x, y) {
                return bad(format!("mask pixel ({x}, {y}) outside the box"));
            }
        }
    }
    Ok(())
}
