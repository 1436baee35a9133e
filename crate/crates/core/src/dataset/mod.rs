//! Retrieval samples, manifests, setting labels and split statistics.

pub mod fixture;
pub mod mask;
pub mod stats;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CorError, Result};

pub use mask::{load_rgb, save_rgb, union_mask, Mask};
pub use stats::{split_summary, stats, StatsTable};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestBase,
    TestNovel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestBase, Split::TestNovel];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestBase => "test_base",
            Split::TestNovel => "test_novel",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CorError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| CorError::Input(format!("unknown split {s:?}")))
    }
}

/// `x` positives and `y` negatives, written `xpyn`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Setting {
    pub positives: usize,
    pub negatives: usize,
}

pub const OFFICIAL_SETTINGS: [Setting; 6] = [
    Setting { positives: 1, negatives: 0 },
    Setting { positives: 1, negatives: 1 },
    Setting { positives: 1, negatives: 2 },
    Setting { positives: 2, negatives: 0 },
    Setting { positives: 2, negatives: 1 },
    Setting { positives: 3, negatives: 0 },
];

impl Setting {
    pub fn label(&self) -> String {
        format!("{}p{}n", self.positives, self.negatives)
    }

    pub fn parse(label: &str) -> Result<Setting> {
        let bad = || CorError::Input(format!("malformed setting label {label:?}"));
        let rest = label.strip_suffix('n').ok_or_else(bad)?;
        let (p, n) = rest.split_once('p').ok_or_else(bad)?;
        Ok(Setting { positives: p.parse().map_err(|_| bad())?, negatives: n.parse().map_err(|_| bad())? })
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

pub fn classify_setting_with(n_pos: usize, n_neg: usize, allowed: &[Setting]) -> Result<Setting> {
    let s = Setting { positives: n_pos, negatives: n_neg };
    if n_pos == 0 || !allowed.contains(&s) {
        return Err(CorError::UnsupportedSetting { positives: n_pos, negatives: n_neg });
    }
    Ok(s)
}

/// Classifies against the six official settings.
pub fn classify_setting(n_pos: usize, n_neg: usize) -> Result<Setting> {
    classify_setting_with(n_pos, n_neg, &OFFICIAL_SETTINGS)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorSample {
    pub pair_id: String,
    pub split: Split,
    pub category: String,
    pub setting: String,
    pub ref_image: PathBuf,
    pub ref_mask: PathBuf,
    pub retrieval_text: String,
    pub target_image: PathBuf,
    pub positive_masks: Vec<PathBuf>,
    pub negative_masks: Vec<PathBuf>,
    /// Steps a pipeline-built sample passed, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

impl CorSample {
    pub fn setting(&self) -> Result<Setting> {
        Setting::parse(&self.setting)
    }

    /// Union of the positive masks, loaded relative to `root`.
    pub fn union_target(&self, root: &Path) -> Result<Mask> {
        let masks = self.positive_masks.iter().map(|p| Mask::load(&root.join(p))).collect::<Result<Vec<_>>>()?;
        union_mask(&masks)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTables {
    pub base: Vec<String>,
    pub novel: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub categories: CategoryTables,
    pub samples: Vec<CorSample>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest { version: MANIFEST_VERSION, categories: CategoryTables::default(), samples: Vec::new() }
    }
}

/// Words that name a category, for the noun-free check: the name, its
/// plural and each word of multi-word names.
pub fn category_lexicon(category: &str) -> Vec<String> {
    let mut words = vec![category.to_lowercase()];
    for w in category.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        words.push(w.to_lowercase());
    }
    let plurals: Vec<String> = words.iter().flat_map(|w| [format!("{w}s"), format!("{w}es")]).collect();
    words.extend(plurals);
    words.sort();
    words.dedup();
    words
}

/// True if any token of `text` is a category word.
pub fn mentions_category(text: &str, category: &str) -> bool {
    let lex = category_lexicon(category);
    let lower = text.to_lowercase();
    if lower.contains(&category.to_lowercase()) {
        return true;
    }
    crate::backbones::tokenize(text).iter().any(|t| lex.contains(t))
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Checks the per-record and cross-record invariants; errors name the record.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(CorError::Parse { index: 0, message: format!("unsupported manifest version {}", self.version) });
        }
        let novel: HashSet<&str> = self.categories.novel.iter().map(String::as_str).collect();
        let mut ids = HashSet::new();
        for (index, s) in self.samples.iter().enumerate() {
            let err = |message: String| CorError::Parse { index, message };
            if !ids.insert(s.pair_id.as_str()) {
                return Err(err(format!("duplicate pair_id {:?}", s.pair_id)));
            }
            if s.retrieval_text.trim().is_empty() {
                return Err(err("empty retrieval text".into()));
            }
            let setting = s.setting().map_err(|e| err(e.to_string()))?;
            if setting.positives != s.positive_masks.len() || setting.negatives != s.negative_masks.len() {
                return Err(err(format!(
                    "setting {} but {} positive and {} negative masks",
                    s.setting,
                    s.positive_masks.len(),
                    s.negative_masks.len()
                )));
            }
            if novel.contains(s.category.as_str()) && s.split != Split::TestNovel {
                return Err(err(format!("novel category {:?} outside test_novel", s.category)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses record by record so that errors carry the record index.
    pub fn from_json(text: &str) -> Result<Manifest> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CorError::Parse { index: 0, message: e.to_string() })?;
        let obj = value.as_object().ok_or_else(|| CorError::Parse { index: 0, message: "not an object".into() })?;
        let version = obj
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CorError::Parse { index: 0, message: "missing version".into() })? as u32;
        let categories = match obj.get("categories") {
            Some(c) => serde_json::from_value(c.clone())
                .map_err(|e| CorError::Parse { index: 0, message: format!("categories: {e}") })?,
            None => CategoryTables::default(),
        };
        let records = obj
            .get("samples")
            .and_then(|v| v.as_array())
            .ok_or_else(|| CorError::Parse { index: 0, message: "missing samples array".into() })?;
        let samples = records
            .iter()
            .enumerate()
            .map(|(index, r)| {
                serde_json::from_value(r.clone()).map_err(|e| CorError::Parse { index, message: e.to_string() })
            })
            .collect::<Result<Vec<CorSample>>>()?;
        let m = Manifest { version, categories, samples };
        m.validate()?;
        Ok(m)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CorError::io(path, e))?;
    Manifest::from_json(&text)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CorError::io(parent, e))?;
    }
    std::fs::write(path, manifest.to_json()?).map_err(|e| CorError::io(path, e))
}

/// Pair counts per category, per split.
pub type Histogram = BTreeMap<String, BTreeMap<String, usize>>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setting_labels_round_trip() {
        for s in OFFICIAL_SETTINGS {
            assert_eq!(Setting::parse(&s.label()).unwrap(), s);
        }
        assert!(Setting::parse("1x0n").is_err());
    }

    #[test]
    fn lexicon_covers_plurals_and_parts() {
        assert!(mentions_category("two Circles here", "circle"));
        assert!(mentions_category("a brown bear", "teddy bear"));
        assert!(!mentions_category("change the color to light", "circle"));
    }
}
