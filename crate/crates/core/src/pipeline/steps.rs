//! The ten pipeline steps. Each batch-level function returns its survivors
//! in a deterministic order together with the step's audit records.

use std::collections::{BTreeMap, BTreeSet};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{cosine, mask_out, with_boxes, Embedder, BLUE, RED};
use super::vlm::{ask_all, parse_binary, parse_changes, VlmClient, VlmRequest, VlmStep};
use super::{AuditRecord, Corpus, Decision, PipelineConfig, RawObject, RejectReason, StepAudit};
use crate::dataset::{mentions_category, Setting, Split};
use crate::error::{CorError, Result};

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The image with red boxes on `red` and blue boxes on `blue`.
pub fn boxed(corpus: &Corpus, image_id: &str, red: &[&str], blue: &[&str]) -> RgbImage {
    let boxes: Vec<_> = red
        .iter()
        .map(|id| (corpus.object(id).bbox, RED))
        .chain(blue.iter().map(|id| (corpus.object(id).bbox, BLUE)))
        .collect();
    with_boxes(&corpus.images[image_id], &boxes)
}

/// Asks every request and reads each reply as a yes/no verdict.
fn verdicts<C: VlmClient + ?Sized>(vlm: &C, reqs: &[VlmRequest]) -> Result<Vec<bool>> {
    ask_all(vlm, reqs).into_iter().map(|r| r.and_then(|t| parse_binary(&t))).collect()
}

/// Per-object geometric rules, checked in this order: area bounds, box fill,
/// then the same-category crowding of the object's image.
pub fn step1_candidate_filter(o: &RawObject, corpus: &Corpus, cfg: &PipelineConfig) -> Decision {
    let area = corpus.area_ratio(o);
    if area < cfg.min_area {
        Decision::Reject(RejectReason::TooSmall)
    } else if area > cfg.max_area {
        Decision::Reject(RejectReason::TooLarge)
    } else if corpus.fill_ratio(o) < cfg.min_fill {
        Decision::Reject(RejectReason::SparseMask)
    } else if corpus.instances(o) > cfg.max_instances {
        Decision::Reject(RejectReason::Crowded)
    } else {
        Decision::Keep
    }
}

/// Caps a category's survivors by taking sources in turn; within a source,
/// objects go by (image id, object id).
pub fn cap_round_robin<'a>(objs: &[&'a RawObject], cap: usize) -> (Vec<&'a RawObject>, Vec<&'a RawObject>) {
    let mut by_source: BTreeMap<&str, Vec<&RawObject>> = BTreeMap::new();
    for o in objs {
        by_source.entry(o.source.as_str()).or_default().push(o);
    }
    for list in by_source.values_mut() {
        list.sort_by(|a, b| (&a.image_id, &a.id).cmp(&(&b.image_id, &b.id)));
    }
    let mut queues: Vec<std::collections::VecDeque<&RawObject>> = by_source.into_values().map(Into::into).collect();
    let mut kept = Vec::new();
    while kept.len() < cap && queues.iter().any(|q| !q.is_empty()) {
        for q in queues.iter_mut() {
            if kept.len() == cap {
                break;
            }
            if let Some(o) = q.pop_front() {
                kept.push(o);
            }
        }
    }
    let dropped = queues.into_iter().flatten().collect();
    (kept, dropped)
}

/// Object rules, then categories spanning fewer than two images, then the cap.
pub fn step1_filter(corpus: &Corpus, cfg: &PipelineConfig) -> (Vec<String>, Vec<AuditRecord>) {
    let mut audit = StepAudit::new(1);
    let mut survivors: BTreeMap<&str, Vec<&RawObject>> = BTreeMap::new();
    let mut rejected: BTreeMap<&str, RejectReason> = BTreeMap::new();
    for o in &corpus.annotations.objects {
        match step1_candidate_filter(o, corpus, cfg) {
            Decision::Keep => survivors.entry(o.category.as_str()).or_default().push(o),
            Decision::Reject(r) => {
                rejected.insert(o.id.as_str(), r);
            }
        }
    }
    let mut kept = BTreeSet::new();
    for objs in survivors.values() {
        let images: BTreeSet<&str> = objs.iter().map(|o| o.image_id.as_str()).collect();
        if images.len() < 2 {
            for o in objs {
                rejected.insert(o.id.as_str(), RejectReason::FewImages);
            }
            continue;
        }
        let (keep, drop) = cap_round_robin(objs, cfg.category_cap);
        for o in drop {
            rejected.insert(o.id.as_str(), RejectReason::CategoryCap);
        }
        kept.extend(keep.iter().map(|o| o.id.as_str()));
    }
    let mut out = Vec::new();
    for o in &corpus.annotations.objects {
        if kept.contains(o.id.as_str()) {
            audit.keep();
            out.push(o.id.clone());
        } else {
            audit.reject(&o.id, rejected[o.id.as_str()]);
        }
    }
    (out, audit.finish())
}

pub fn step2_request(corpus: &Corpus, o: &RawObject) -> Result<VlmRequest> {
    let n = corpus.instances(o).to_string();
    let prompt = VlmStep::Quality.template().render(&[("cat_name", &o.category), ("ins_len", &n)])?;
    Ok(VlmRequest {
        step: VlmStep::Quality,
        subject: o.id.clone(),
        images: vec![boxed(corpus, &o.image_id, &[&o.id], &[])],
        prompt,
    })
}

/// Single-object form of the quality check.
pub fn step2_quality_check<C: VlmClient + ?Sized>(corpus: &Corpus, o: &RawObject, vlm: &C) -> Result<bool> {
    parse_binary(&vlm.ask(&step2_request(corpus, o)?)?)
}

pub fn step2_filter<C: VlmClient + ?Sized>(corpus: &Corpus, ids: &[String], vlm: &C) -> Result<(Vec<String>, Vec<AuditRecord>)> {
    let reqs = ids.iter().map(|id| step2_request(corpus, corpus.object(id))).collect::<Result<Vec<_>>>()?;
    let ok = verdicts(vlm, &reqs)?;
    let mut audit = StepAudit::new(2);
    let mut out = Vec::new();
    for (id, pass) in ids.iter().zip(ok) {
        if pass {
            audit.keep();
            out.push(id.clone());
        } else {
            audit.reject(id, RejectReason::LowQuality);
        }
    }
    Ok((out, audit.finish()))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySplit {
    pub base: Vec<String>,
    pub novel: Vec<String>,
}

/// Seeded shuffle; the first `round(|C| · novel_share)` categories become
/// novel. Both lists come back sorted.
pub fn step3_category_split(categories: &[String], cfg: &PipelineConfig) -> Result<CategorySplit> {
    let mut cats: Vec<String> = categories.to_vec();
    cats.sort();
    cats.dedup();
    if cats.len() < cfg.min_categories {
        return Err(CorError::Input(format!("{} categories, at least {} needed for a split", cats.len(), cfg.min_categories)));
    }
    let n_novel = ((cats.len() as f64 * cfg.novel_share).round() as usize).clamp(1, cats.len() - 1);
    cats.shuffle(&mut stream_rng(cfg.seed, 3));
    let mut novel = cats[..n_novel].to_vec();
    let mut base = cats[n_novel..].to_vec();
    novel.sort();
    base.sort();
    Ok(CategorySplit { base, novel })
}

/// Split assignment of one (category, image) group.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupSplit {
    pub category: String,
    pub image_id: String,
    pub split: Split,
}

/// Novel groups go to test_novel; base groups are shuffled and the first
/// `round(n · train_share)` go to train.
pub fn step4_train_test_split(groups: &[(String, String)], cats: &CategorySplit, cfg: &PipelineConfig) -> Vec<GroupSplit> {
    let mut groups: Vec<(String, String)> = groups.to_vec();
    groups.sort();
    groups.dedup();
    let (mut base, novel): (Vec<_>, Vec<_>) = groups.into_iter().partition(|(c, _)| !cats.novel.contains(c));
    base.shuffle(&mut stream_rng(cfg.seed, 4));
    let n_train = (base.len() as f64 * cfg.train_share).round() as usize;
    let mut out: Vec<GroupSplit> = base
        .into_iter()
        .enumerate()
        .map(|(i, (category, image_id))| GroupSplit {
            category,
            image_id,
            split: if i < n_train { Split::Train } else { Split::TestBase },
        })
        .chain(novel.into_iter().map(|(category, image_id)| GroupSplit { category, image_id, split: Split::TestNovel }))
        .collect();
    out.sort();
    out
}

pub fn split_of(splits: &[GroupSplit], category: &str, image_id: &str) -> Option<Split> {
    splits.iter().find(|g| g.category == category && g.image_id == image_id).map(|g| g.split)
}

pub fn step5_reference_check(o: &RawObject, corpus: &Corpus, cfg: &PipelineConfig) -> Decision {
    if corpus.instances(o) != 1 {
        Decision::Reject(RejectReason::MultipleInstances)
    } else if corpus.area_ratio(o) < cfg.min_reference_area {
        Decision::Reject(RejectReason::ReferenceTooSmall)
    } else {
        Decision::Keep
    }
}

/// Objects eligible as references. Rejection here only removes an object
/// from the reference pool; it may still be a target.
pub fn step5_reference_select(corpus: &Corpus, ids: &[String], cfg: &PipelineConfig) -> (Vec<String>, Vec<AuditRecord>) {
    let mut audit = StepAudit::new(5);
    let mut out = Vec::new();
    for id in ids {
        match step5_reference_check(corpus.object(id), corpus, cfg) {
            Decision::Keep => {
                audit.keep();
                out.push(id.clone());
            }
            Decision::Reject(r) => audit.reject(id, r),
        }
    }
    (out, audit.finish())
}

/// Positives and negatives of one target image for one category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub id: String,
    pub category: String,
    pub image_id: String,
    pub split: Split,
    pub setting: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

/// All ways to mark a non-empty subset of `objects` as positives.
pub fn enumerate_configs(objects: &[String]) -> Vec<(Vec<String>, Vec<String>)> {
    let n = objects.len();
    (1u32..(1 << n))
        .map(|bits| {
            let (mut p, mut q) = (Vec::new(), Vec::new());
            for (i, o) in objects.iter().enumerate() {
                if bits & (1 << i) != 0 { p.push(o.clone()) } else { q.push(o.clone()) }
            }
            (p, q)
        })
        .collect()
}

fn distinct_request(corpus: &Corpus, pos: &str, neg: &str) -> Result<VlmRequest> {
    let o = corpus.object(pos);
    Ok(VlmRequest {
        step: VlmStep::Distinct,
        subject: format!("{pos}|{neg}"),
        images: vec![boxed(corpus, &o.image_id, &[pos], &[neg])],
        prompt: VlmStep::Distinct.template().render(&[("cat_name", &o.category)])?,
    })
}

/// Per (category, image) group of survivors: every positive/negative
/// partition with an allowed setting, whose pairs are dissimilar enough and
/// judged distinguishable.
pub fn step6_target_select<C: VlmClient + ?Sized, E: Embedder + ?Sized>(
    corpus: &Corpus,
    ids: &[String],
    splits: &[GroupSplit],
    embedder: &E,
    vlm: &C,
    cfg: &PipelineConfig,
) -> Result<(Vec<TargetConfig>, Vec<AuditRecord>)> {
    let allowed = cfg.allowed_settings()?;
    let mut groups: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for id in ids {
        let o = corpus.object(id);
        groups.entry((o.category.clone(), o.image_id.clone())).or_default().push(id.clone());
    }
    let embed = |id: &str| {
        let o = corpus.object(id);
        embedder.embed(&corpus.images[&o.image_id], &corpus.masks[id])
    };

    let mut audit = StepAudit::new(6);
    let mut pending: Vec<(TargetConfig, Vec<(String, String)>)> = Vec::new();
    for ((category, image_id), mut objs) in groups {
        objs.sort();
        let Some(split) = split_of(splits, &category, &image_id) else { continue };
        let feats: BTreeMap<&str, Vec<f64>> = objs.iter().map(|id| (id.as_str(), embed(id))).collect();
        for (positives, negatives) in enumerate_configs(&objs) {
            let id = format!("{image_id}/{category}/{}", positives.join("+"));
            let setting = Setting { positives: positives.len(), negatives: negatives.len() };
            if !allowed.contains(&setting) {
                audit.reject(id, RejectReason::UnsupportedSetting);
                continue;
            }
            let pairs: Vec<(String, String)> =
                positives.iter().flat_map(|p| negatives.iter().map(move |n| (p.clone(), n.clone()))).collect();
            if pairs.iter().any(|(p, n)| cosine(&feats[p.as_str()], &feats[n.as_str()]) > cfg.similarity_cutoff) {
                audit.reject(id, RejectReason::SimilarNegative);
                continue;
            }
            let cfg_entry = TargetConfig {
                id,
                category: category.clone(),
                image_id: image_id.clone(),
                split,
                setting: setting.label(),
                positives,
                negatives,
            };
            pending.push((cfg_entry, pairs));
        }
    }

    let mut unique: Vec<(String, String)> = pending.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
    unique.sort();
    unique.dedup();
    let reqs = unique.iter().map(|(p, n)| distinct_request(corpus, p, n)).collect::<Result<Vec<_>>>()?;
    let answers: BTreeMap<(String, String), bool> = unique.into_iter().zip(verdicts(vlm, &reqs)?).collect();

    let mut out = Vec::new();
    for (t, pairs) in pending {
        if pairs.iter().all(|p| answers[p]) {
            audit.keep();
            out.push(t);
        } else {
            audit.reject(&t.id, RejectReason::Indistinct);
        }
    }
    Ok((out, audit.finish()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub target: TargetConfig,
    pub reference: String,
}

impl Pair {
    pub fn id(&self) -> String {
        format!("{}<{}", self.target.id, self.reference)
    }

    fn images(&self, corpus: &Corpus) -> Vec<RgbImage> {
        let r = corpus.object(&self.reference);
        let pos: Vec<&str> = self.target.positives.iter().map(String::as_str).collect();
        vec![boxed(corpus, &r.image_id, &[&self.reference], &[]), boxed(corpus, &self.target.image_id, &pos, &[])]
    }
}

/// Same-category references from the target's split and from other images,
/// one per image, at most `max_references` (seeded sample), each confirmed
/// by the validator.
pub fn step7_pair_construct<C: VlmClient + ?Sized>(
    corpus: &Corpus,
    targets: &[TargetConfig],
    references: &[String],
    splits: &[GroupSplit],
    vlm: &C,
    cfg: &PipelineConfig,
) -> Result<(Vec<Pair>, Vec<AuditRecord>)> {
    let mut audit = StepAudit::new(7);
    let mut candidates = Vec::new();
    for (ti, t) in targets.iter().enumerate() {
        let mut eligible: Vec<&RawObject> = references
            .iter()
            .map(|id| corpus.object(id))
            .filter(|r| {
                r.category == t.category
                    && r.image_id != t.image_id
                    && split_of(splits, &r.category, &r.image_id) == Some(t.split)
            })
            .collect();
        eligible.sort_by(|a, b| (&a.image_id, &a.id).cmp(&(&b.image_id, &b.id)));
        let mut seen = BTreeSet::new();
        let mut distinct = Vec::new();
        for r in eligible {
            if seen.insert(r.image_id.as_str()) {
                distinct.push(r.id.clone());
            } else {
                audit.reject(format!("{}<{}", t.id, r.id), RejectReason::SameImage);
            }
        }
        if distinct.len() > cfg.max_references {
            distinct.shuffle(&mut stream_rng(cfg.seed, (7 << 32) | ti as u64));
            for r in distinct.split_off(cfg.max_references) {
                audit.reject(format!("{}<{}", t.id, r), RejectReason::OverLimit);
            }
            distinct.sort();
        }
        candidates.extend(distinct.into_iter().map(|reference| Pair { target: t.clone(), reference }));
    }
    let reqs = candidates
        .iter()
        .map(|p| {
            Ok(VlmRequest {
                step: VlmStep::Pair,
                subject: p.id(),
                images: p.images(corpus),
                prompt: VlmStep::Pair.template().render(&[("cat_name", &p.target.category)])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (p, ok) in candidates.into_iter().zip(verdicts(vlm, &reqs)?) {
        if ok {
            audit.keep();
            out.push(p);
        } else {
            audit.reject(p.id(), RejectReason::PairRejected);
        }
    }
    Ok((out, audit.finish()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub pair: Pair,
    /// Position of the text in the validator's list.
    pub index: usize,
    pub text: String,
}

impl Triplet {
    pub fn id(&self) -> String {
        format!("{}#{}", self.pair.id(), self.index)
    }
}

/// Why a generated text is unusable, if it is.
pub fn text_problem(text: &str, category: &str, cfg: &PipelineConfig) -> Option<RejectReason> {
    if text.split_whitespace().count() > cfg.max_text_words {
        Some(RejectReason::TooLong)
    } else if mentions_category(text, category) {
        Some(RejectReason::MentionsCategory)
    } else {
        None
    }
}

/// Parses the change list of every pair; each acceptable text is a triplet.
pub fn step8_text_generate<C: VlmClient + ?Sized>(
    corpus: &Corpus,
    pairs: &[Pair],
    vlm: &C,
    cfg: &PipelineConfig,
) -> Result<(Vec<Triplet>, Vec<AuditRecord>)> {
    let reqs = pairs
        .iter()
        .map(|p| {
            Ok(VlmRequest {
                step: VlmStep::Text,
                subject: p.id(),
                images: p.images(corpus),
                prompt: VlmStep::Text.template().render(&[("cat_name", &p.target.category)])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut audit = StepAudit::new(8);
    let mut out = Vec::new();
    for (p, reply) in pairs.iter().zip(ask_all(vlm, &reqs)) {
        for (index, text) in parse_changes(&reply?)?.into_iter().enumerate() {
            let t = Triplet { pair: p.clone(), index, text };
            match text_problem(&t.text, &p.target.category, cfg) {
                Some(r) => audit.reject(t.id(), r),
                None => {
                    audit.keep();
                    out.push(t);
                }
            }
        }
    }
    Ok((out, audit.finish()))
}

fn triplet_request(corpus: &Corpus, t: &Triplet, step: VlmStep) -> Result<VlmRequest> {
    let mut images = t.pair.images(corpus);
    if step == VlmStep::FalseMatch {
        let masks: Vec<_> = t.pair.target.positives.iter().map(|id| &corpus.masks[id]).collect();
        images[1] = mask_out(&corpus.images[&t.pair.target.image_id], &masks);
    }
    let prompt = step
        .template()
        .render(&[("target_cat", &t.pair.target.category), ("retrieval_text", &t.text)])?;
    Ok(VlmRequest { step, subject: t.id(), images, prompt })
}

fn triplet_filter<C: VlmClient + ?Sized>(
    corpus: &Corpus,
    triplets: &[Triplet],
    vlm: &C,
    step: VlmStep,
    reason: RejectReason,
) -> Result<(Vec<Triplet>, Vec<AuditRecord>)> {
    let reqs = triplets.iter().map(|t| triplet_request(corpus, t, step)).collect::<Result<Vec<_>>>()?;
    let mut audit = StepAudit::new(step.number());
    let mut out = Vec::new();
    for (t, ok) in triplets.iter().zip(verdicts(vlm, &reqs)?) {
        if ok {
            audit.keep();
            out.push(t.clone());
        } else {
            audit.reject(t.id(), reason);
        }
    }
    Ok((out, audit.finish()))
}

/// Reference plus text must single out the boxed positives.
pub fn step9_positive_verify<C: VlmClient + ?Sized>(corpus: &Corpus, triplets: &[Triplet], vlm: &C) -> Result<(Vec<Triplet>, Vec<AuditRecord>)> {
    triplet_filter(corpus, triplets, vlm, VlmStep::Verify, RejectReason::NotVerified)
}

/// With the positives painted out, nothing left may match; a `1` certifies that.
pub fn step10_false_match_reject<C: VlmClient + ?Sized>(corpus: &Corpus, triplets: &[Triplet], vlm: &C) -> Result<(Vec<Triplet>, Vec<AuditRecord>)> {
    triplet_filter(corpus, triplets, vlm, VlmStep::FalseMatch, RejectReason::FalseMatch)
}
