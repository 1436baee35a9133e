//! Detect, rank, segment: the modular comparison method with toy stages.
//! It returns exactly one region per query, so multi-target queries are
//! covered at most partially by construction.

use std::collections::VecDeque;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataset::synth::{BACKGROUND, COLOR_NAMES, COLOR_VALUES};
use crate::dataset::{load_rgb, CorSample, Manifest, Mask, Split};
use crate::error::{CorError, Result};
use crate::metrics::{evaluate, EvalItem, EvalReport};
use crate::pipeline::render::{cosine, BBox, ColorHistogram, Embedder};

pub const MIN_CONFIDENCE: f64 = 0.3;
pub const NMS_IOU: f64 = 0.8;
pub const MAX_CANDIDATES: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    /// Pixels the detector attributes to the object.
    pub region: Mask,
}

pub trait Detector: Sync {
    fn detect(&self, image: &RgbImage) -> Vec<Detection>;
}

pub trait Ranker: Sync {
    /// One score per candidate; higher is a better match for reference + text.
    fn score(&self, ref_image: &RgbImage, ref_mask: &Mask, text: &str, image: &RgbImage, candidates: &[Detection]) -> Vec<f64>;
}

pub trait BoxSegmenter: Sync {
    fn segment(&self, image: &RgbImage, candidate: &Detection) -> Mask;
}

/// Drops low-confidence boxes, suppresses overlaps and keeps the best 30.
pub fn filter_candidates(mut dets: Vec<Detection>) -> Vec<Detection> {
    dets.retain(|d| d.confidence > MIN_CONFIDENCE);
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.len() == MAX_CANDIDATES {
            break;
        }
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) < NMS_IOU) {
            kept.push(d);
        }
    }
    kept
}

/// 4-connected components of identical non-background colour. Confidence
/// grows with component area, so specks fall under the threshold.
#[derive(Clone, Copy, Debug)]
pub struct ComponentDetector {
    pub background: [u8; 3],
    /// Area at which confidence reaches 1 − 1/e.
    pub area_scale: f64,
}

impl Default for ComponentDetector {
    fn default() -> Self {
        ComponentDetector { background: BACKGROUND, area_scale: 16.0 }
    }
}

impl Detector for ComponentDetector {
    fn detect(&self, image: &RgbImage) -> Vec<Detection> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let px = |x: usize, y: usize| image.get_pixel(x as u32, y as u32).0;
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for start in 0..w * h {
            let colour = px(start % w, start / w);
            if seen[start] || colour == self.background {
                continue;
            }
            let mut region = Mask::zeros(h, w);
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            let mut area = 0usize;
            while let Some(i) = queue.pop_front() {
                let (x, y) = (i % w, i / w);
                region.set(y, x, true);
                area += 1;
                let mut visit = |nx: usize, ny: usize| {
                    let j = ny * w + nx;
                    if !seen[j] && px(nx, ny) == colour {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < w {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < h {
                    visit(x, y + 1);
                }
            }
            let bbox = BBox::of_mask(&region).expect("component has a pixel");
            out.push(Detection { bbox, confidence: 1.0 - (-(area as f64) / self.area_scale).exp(), region });
        }
        out
    }
}

/// Colour histogram plus a coarse shape code (how much of its box a region fills).
fn region_embedding(hist: &ColorHistogram, image: &RgbImage, mask: &Mask) -> Vec<f64> {
    let mut v = hist.embed(image, mask);
    let fill = match BBox::of_mask(mask) {
        Some(b) => mask.area() as f64 / b.area(),
        None => 0.0,
    };
    let code: Vec<f64> = (0..8).map(|k| (-(fill - k as f64 / 7.0).powi(2) / (2.0 * 0.05f64.powi(2))).exp()).collect();
    let n = code.iter().map(|c| c * c).sum::<f64>().sqrt();
    v.extend(code.iter().map(|c| if n > 0.0 { c / n } else { 0.0 }));
    v
}

/// Colour words in the text mapped into the histogram half of the embedding.
fn text_embedding(hist: &ColorHistogram, text: &str) -> Vec<f64> {
    let mut v = vec![0.0; hist.bins.pow(3) + 8];
    for word in crate::backbones::tokenize(text) {
        if let Some(i) = COLOR_NAMES.iter().position(|c| *c == word) {
            v[hist.bin_of(COLOR_VALUES[i])] = 1.0;
        }
    }
    v
}

/// Scores candidates by cosine to `embed(reference) + embed(text)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SumRanker {
    pub hist: ColorHistogram,
}

impl Ranker for SumRanker {
    fn score(&self, ref_image: &RgbImage, ref_mask: &Mask, text: &str, image: &RgbImage, candidates: &[Detection]) -> Vec<f64> {
        let r = region_embedding(&self.hist, ref_image, ref_mask);
        let t = text_embedding(&self.hist, text);
        let query: Vec<f64> = r.iter().zip(&t).map(|(a, b)| a + b).collect();
        candidates.iter().map(|c| cosine(&query, &region_embedding(&self.hist, image, &c.region))).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentMode {
    /// Pixels in the box sharing the candidate's colour.
    #[default]
    ColorRegion,
    /// The whole box.
    BoxFill,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ToySegmenter {
    pub mode: SegmentMode,
}

impl BoxSegmenter for ToySegmenter {
    fn segment(&self, image: &RgbImage, c: &Detection) -> Mask {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let colour =
            c.region.data.iter().position(|v| *v != 0).map(|i| image.get_pixel((i % w) as u32, (i / w) as u32).0);
        Mask::from_fn(h, w, |y, x| {
            c.bbox.contains_pixel(x, y)
                && match self.mode {
                    SegmentMode::BoxFill => true,
                    SegmentMode::ColorRegion => Some(image.get_pixel(x as u32, y as u32).0) == colour,
                }
        })
    }
}

pub struct StagePipeline {
    pub detector: Box<dyn Detector>,
    pub ranker: Box<dyn Ranker>,
    pub segmenter: Box<dyn BoxSegmenter>,
}

impl Default for StagePipeline {
    fn default() -> Self {
        StagePipeline {
            detector: Box::new(ComponentDetector::default()),
            ranker: Box::new(SumRanker::default()),
            segmenter: Box::new(ToySegmenter::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaselineOutcome {
    Selected { candidate: Detection, score: f64, candidates: usize },
    /// Nothing was detected; the mask is empty.
    EmptyPrediction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselinePrediction {
    pub mask: Mask,
    pub outcome: BaselineOutcome,
}

impl StagePipeline {
    pub fn predict(&self, ref_image: &RgbImage, ref_mask: &Mask, text: &str, target: &RgbImage) -> BaselinePrediction {
        let candidates = filter_candidates(self.detector.detect(target));
        let scores = self.ranker.score(ref_image, ref_mask, text, target, &candidates);
        // First maximum wins, so ties go to the more confident detection.
        let best = scores
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
                Some((_, b)) if b >= *s => acc,
                _ => Some((i, *s)),
            });
        match best {
            Some((i, score)) => BaselinePrediction {
                mask: self.segmenter.segment(target, &candidates[i]),
                outcome: BaselineOutcome::Selected { candidate: candidates[i].clone(), score, candidates: candidates.len() },
            },
            None => {
                log::warn!("baseline: no detection in the target image");
                BaselinePrediction {
                    mask: Mask::zeros(target.height() as usize, target.width() as usize),
                    outcome: BaselineOutcome::EmptyPrediction,
                }
            }
        }
    }
}

/// Loads one manifest record (paths relative to `root`) and predicts its mask.
pub fn run_baseline(sample: &CorSample, root: &Path, pipeline: &StagePipeline) -> Result<BaselinePrediction> {
    let target = load_rgb(&root.join(&sample.target_image))?;
    let ref_image = load_rgb(&root.join(&sample.ref_image))?;
    let ref_mask = Mask::load(&root.join(&sample.ref_mask))?;
    if (ref_mask.width as u32, ref_mask.height as u32) != ref_image.dimensions() {
        return Err(CorError::dim(format!("{}: reference mask and image sizes differ", sample.pair_id)));
    }
    Ok(pipeline.predict(&ref_image, &ref_mask, &sample.retrieval_text, &target))
}

/// Baseline predictions and report over one split.
pub fn evaluate_baseline(manifest: &Manifest, root: &Path, split: Split, pipeline: &StagePipeline) -> Result<EvalReport> {
    let samples: Vec<&CorSample> = manifest.split(split).collect();
    let mut gts = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    for s in &samples {
        let gt = s.union_target(root)?;
        let p = run_baseline(s, root, pipeline)?;
        if (p.mask.height, p.mask.width) != (gt.height, gt.width) {
            return Err(CorError::dim(format!("{}: target image and mask sizes differ", s.pair_id)));
        }
        gts.push(gt.to_f64());
        preds.push(p.mask.to_f64());
    }
    let items = samples
        .iter()
        .zip(&gts)
        .map(|(s, g)| Ok(EvalItem { split: s.split.as_str(), setting: s.setting()?, gt: g }))
        .collect::<Result<Vec<_>>>()?;
    evaluate("baseline", &items, &preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{render_scene, SceneObject, Shape};
    use image::Rgb;

    fn det(x: f64, conf: f64) -> Detection {
        Detection { bbox: BBox { x, y: 0.0, w: 10.0, h: 10.0 }, confidence: conf, region: Mask::zeros(1, 1) }
    }

    #[test]
    fn candidate_filtering_rules() {
        let kept = filter_candidates(vec![det(0.0, 0.9), det(1.0, 0.8), det(3.0, 0.7), det(50.0, 0.3), det(60.0, 0.31)]);
        // x=1 overlaps x=0 at IoU 9/11 > 0.8; x=3 is at 7/13.
        let xs: Vec<f64> = kept.iter().map(|d| d.bbox.x).collect();
        assert_eq!(xs, [0.0, 3.0, 60.0]);
        let many: Vec<Detection> = (0..50).map(|i| det(20.0 * i as f64, 0.5 + i as f64 / 100.0)).collect();
        let kept = filter_candidates(many);
        assert_eq!(kept.len(), MAX_CANDIDATES);
        assert!(kept.windows(2).all(|w| w[0].confidence >= w[1].confidence));
    }

    fn scene(objs: &[SceneObject]) -> (RgbImage, Vec<Mask>) {
        render_scene(objs, 64)
    }

    fn obj(shape: Shape, color: usize, cx: f64, cy: f64) -> SceneObject {
        SceneObject { shape, color, radius: 10.0, angle: 0.0, cx, cy }
    }

    #[test]
    fn components_are_exact_on_clean_scenes() {
        let (img, masks) = scene(&[obj(Shape::Circle, 2, 16.0, 16.0), obj(Shape::Square, 3, 46.0, 46.0)]);
        let dets = ComponentDetector::default().detect(&img);
        assert_eq!(dets.len(), 2);
        for (d, m) in dets.iter().zip(&masks) {
            assert_eq!(&d.region, m);
            assert!(d.confidence > 0.99);
        }
    }

    #[test]
    fn single_target_is_recovered() {
        let (target, masks) = scene(&[obj(Shape::Circle, 2, 30.0, 30.0)]);
        let (reference, ref_masks) = scene(&[obj(Shape::Circle, 0, 32.0, 32.0)]);
        let p = StagePipeline::default().predict(&reference, &ref_masks[0], "change the color to red", &target);
        assert_eq!(p.mask, masks[0]);
        assert!(matches!(p.outcome, BaselineOutcome::Selected { candidates: 1, .. }));
    }

    #[test]
    fn text_colour_picks_the_positive() {
        let (target, masks) =
            scene(&[obj(Shape::Circle, 1, 16.0, 16.0), obj(Shape::Circle, 3, 46.0, 46.0), obj(Shape::Circle, 2, 16.0, 46.0)]);
        let (reference, ref_masks) = scene(&[obj(Shape::Circle, 0, 32.0, 32.0)]);
        let p = StagePipeline::default().predict(&reference, &ref_masks[0], "change the color to blue", &target);
        assert_eq!(p.mask, masks[1]);
    }

    #[test]
    fn two_positives_yield_one() {
        let (target, masks) = scene(&[obj(Shape::Square, 2, 16.0, 16.0), obj(Shape::Square, 2, 46.0, 46.0)]);
        let (reference, ref_masks) = scene(&[obj(Shape::Square, 1, 32.0, 32.0)]);
        let p = StagePipeline::default().predict(&reference, &ref_masks[0], "change the color to red", &target);
        let union = crate::dataset::union_mask(&masks).unwrap();
        let d = crate::metrics::dice(&p.mask.to_f64(), &union.to_f64()).unwrap();
        assert!(p.mask == masks[0] || p.mask == masks[1]);
        assert!(d < 1.0 && (d - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_scene_gives_an_empty_mask() {
        let blank = RgbImage::from_pixel(16, 16, Rgb(BACKGROUND));
        let p = StagePipeline::default().predict(&blank, &Mask::zeros(16, 16), "change the color to red", &blank);
        assert_eq!(p.outcome, BaselineOutcome::EmptyPrediction);
        assert_eq!(p.mask.area(), 0);
    }

    #[test]
    fn output_stays_inside_the_chosen_box() {
        let (target, _) = scene(&[obj(Shape::Triangle, 2, 30.0, 30.0)]);
        let (reference, ref_masks) = scene(&[obj(Shape::Triangle, 0, 32.0, 32.0)]);
        for mode in [SegmentMode::ColorRegion, SegmentMode::BoxFill] {
            let pipe = StagePipeline { segmenter: Box::new(ToySegmenter { mode }), ..StagePipeline::default() };
            let p = pipe.predict(&reference, &ref_masks[0], "change the color to red", &target);
            let BaselineOutcome::Selected { candidate, .. } = &p.outcome else { panic!("nothing selected") };
            for y in 0..64 {
                for x in 0..64 {
                    if p.mask.get(y, x) {
                        assert!(candidate.bbox.contains_pixel(x, y));
                    }
                }
            }
        }
    }
}
