//! Stage orchestration, per-stage snapshots for resuming, and output files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::Embedder;
use super::steps::*;
use super::vlm::VlmClient;
use super::{AuditRecord, Corpus, PipelineConfig, RawAnnotations};
use crate::dataset::{save_manifest, CategoryTables, CorSample, Manifest, MANIFEST_VERSION};
use crate::error::{CorError, Result};

pub const STEP_NAMES: [&str; 10] = [
    "step1_candidate_filter",
    "step2_quality_check",
    "step3_category_split",
    "step4_train_test_split",
    "step5_reference_select",
    "step6_target_select",
    "step7_pair_construct",
    "step8_text_generate",
    "step9_positive_verify",
    "step10_false_match_reject",
];

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Snapshot<T> {
    stage: u8,
    fingerprint: String,
    audit: Vec<AuditRecord>,
    data: T,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Prepared {
    survivors: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Divided {
    categories: CategorySplit,
    splits: Vec<GroupSplit>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Built {
    triplets: Vec<Triplet>,
}

/// Result of a run, before anything is written.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Paths are relative to the output directory.
    pub manifest: Manifest,
    pub audit: Vec<AuditRecord>,
    pub triplets: Vec<Triplet>,
    pub categories: CategorySplit,
    pub splits: Vec<GroupSplit>,
    /// Output-relative destination → annotation-relative source.
    pub files: BTreeMap<PathBuf, PathBuf>,
}

impl PipelineOutput {
    /// Audit log as JSON lines.
    pub fn audit_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.audit {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Copies the referenced images and masks and writes `manifest.json` and
    /// `audit.jsonl` under `out_dir`.
    pub fn write(&self, root: &Path, out_dir: &Path) -> Result<()> {
        for (dest, src) in &self.files {
            let to = out_dir.join(dest);
            if let Some(parent) = to.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CorError::io(parent, e))?;
            }
            std::fs::copy(root.join(src), &to).map_err(|e| CorError::io(&to, e))?;
        }
        save_manifest(&self.manifest, &out_dir.join("manifest.json"))?;
        let audit = out_dir.join("audit.jsonl");
        std::fs::write(&audit, self.audit_jsonl()?).map_err(|e| CorError::io(&audit, e))
    }
}

fn fingerprint(cfg: &PipelineConfig, ann: &RawAnnotations) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    h.update(serde_json::to_vec(ann)?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Loads a stage snapshot if present and made from the same inputs,
/// otherwise runs `compute` and stores the result.
fn stage<T: Serialize + DeserializeOwned>(
    work_dir: Option<&Path>,
    stage: u8,
    fp: &str,
    compute: impl FnOnce() -> Result<(T, Vec<AuditRecord>)>,
) -> Result<(T, Vec<AuditRecord>)> {
    let path = work_dir.map(|d| d.join(format!("stage{stage}.json")));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let text = std::fs::read_to_string(p).map_err(|e| CorError::io(p, e))?;
        let snap: Snapshot<T> = serde_json::from_str(&text)?;
        if snap.fingerprint == fp && snap.stage == stage {
            log::info!("stage {stage}: resumed from {}", p.display());
            return Ok((snap.data, snap.audit));
        }
        log::info!("stage {stage}: snapshot is from other inputs, recomputing");
    }
    let (data, audit) = compute()?;
    if let Some(p) = path {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CorError::io(parent, e))?;
        }
        let snap = Snapshot { stage, fingerprint: fp.to_string(), audit, data };
        std::fs::write(&p, serde_json::to_string(&snap)?).map_err(|e| CorError::io(&p, e))?;
        return Ok((snap.data, snap.audit));
    }
    Ok((data, audit))
}

fn summary(step: u8, n: usize) -> AuditRecord {
    AuditRecord::Summary { step, candidates: n, kept: n }
}

/// Runs all four stages. With `work_dir`, each finished stage is stored
/// there and reused by later runs on the same inputs and configuration.
pub fn run_pipeline(
    root: &Path,
    annotations: RawAnnotations,
    cfg: &PipelineConfig,
    vlm: &dyn VlmClient,
    embedder: &dyn Embedder,
    work_dir: Option<&Path>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let fp = fingerprint(cfg, &annotations)?;
    let corpus = Corpus::load(root, annotations)?;

    let (prep, mut audit) = stage(work_dir, 1, &fp, || {
        let (s1, mut a) = step1_filter(&corpus, cfg);
        let (survivors, a2) = step2_filter(&corpus, &s1, vlm)?;
        a.extend(a2);
        Ok((Prepared { survivors }, a))
    })?;

    let (div, a) = stage(work_dir, 2, &fp, || {
        let mut cats: Vec<String> = prep.survivors.iter().map(|id| corpus.object(id).category.clone()).collect();
        cats.sort();
        cats.dedup();
        if cats.is_empty() {
            return Ok((Divided { categories: CategorySplit::default(), splits: Vec::new() }, vec![summary(3, 0), summary(4, 0)]));
        }
        let categories = step3_category_split(&cats, cfg)?;
        let groups: Vec<(String, String)> = prep
            .survivors
            .iter()
            .map(|id| {
                let o = corpus.object(id);
                (o.category.clone(), o.image_id.clone())
            })
            .collect();
        let splits = step4_train_test_split(&groups, &categories, cfg);
        let a = vec![summary(3, cats.len()), summary(4, splits.len())];
        Ok((Divided { categories, splits }, a))
    })?;
    audit.extend(a);

    let (built, a) = stage(work_dir, 3, &fp, || {
        let (refs, mut a) = step5_reference_select(&corpus, &prep.survivors, cfg);
        let (targets, a6) = step6_target_select(&corpus, &prep.survivors, &div.splits, embedder, vlm, cfg)?;
        let (pairs, a7) = step7_pair_construct(&corpus, &targets, &refs, &div.splits, vlm, cfg)?;
        let (triplets, a8) = step8_text_generate(&corpus, &pairs, vlm, cfg)?;
        a.extend(a6.into_iter().chain(a7).chain(a8));
        Ok((Built { triplets }, a))
    })?;
    audit.extend(a);

    let (done, a) = stage(work_dir, 4, &fp, || {
        let (t9, mut a) = step9_positive_verify(&corpus, &built.triplets, vlm)?;
        let (t10, a10) = step10_false_match_reject(&corpus, &t9, vlm)?;
        a.extend(a10);
        Ok((Built { triplets: t10 }, a))
    })?;
    audit.extend(a);

    let (manifest, files) = assemble(&corpus, &done.triplets, &div.categories)?;
    Ok(PipelineOutput {
        manifest,
        audit,
        triplets: done.triplets,
        categories: div.categories,
        splits: div.splits,
        files,
    })
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn assemble(
    corpus: &Corpus,
    triplets: &[Triplet],
    cats: &CategorySplit,
) -> Result<(Manifest, BTreeMap<PathBuf, PathBuf>)> {
    let mut files = BTreeMap::new();
    let mut image_path = |image_id: &str| -> PathBuf {
        let src = corpus.annotations.images.iter().find(|i| i.id == image_id).expect("known image").file.clone();
        let ext = src.extension().and_then(|e| e.to_str()).unwrap_or("png").to_string();
        let dest = PathBuf::from("images").join(format!("{}.{ext}", sanitize(image_id)));
        files.insert(dest.clone(), src);
        dest
    };
    let mut mask_paths = BTreeMap::new();
    let mut mask_path = |id: &str| -> PathBuf {
        let dest = PathBuf::from("masks").join(format!("{}.png", sanitize(id)));
        mask_paths.insert(dest.clone(), corpus.object(id).mask.clone());
        dest
    };
    let mut samples = Vec::with_capacity(triplets.len());
    for t in triplets {
        let tc = &t.pair.target;
        let r = corpus.object(&t.pair.reference);
        samples.push(CorSample {
            pair_id: sanitize(&format!(
                "{}-{}-{}-{}-{}",
                tc.image_id,
                tc.category,
                tc.positives.join("+"),
                t.pair.reference,
                t.index
            )),
            split: tc.split,
            category: tc.category.clone(),
            setting: tc.setting.clone(),
            ref_image: image_path(&r.image_id),
            ref_mask: mask_path(&r.id),
            retrieval_text: t.text.clone(),
            target_image: image_path(&tc.image_id),
            positive_masks: tc.positives.iter().map(|id| mask_path(id)).collect(),
            negative_masks: tc.negatives.iter().map(|id| mask_path(id)).collect(),
            provenance: STEP_NAMES.iter().map(|s| s.to_string()).collect(),
        });
    }
    files.extend(mask_paths);
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        categories: CategoryTables { base: cats.base.clone(), novel: cats.novel.clone() },
        samples,
    };
    manifest.validate()?;
    Ok((manifest, files))
}
