//! Per-split dataset statistics in the layout of the dataset summary table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{CorSample, Histogram, Manifest, Split};

pub const STATS_COLUMNS: [&str; 4] = ["All", "Train", "Test-Base", "Test-Novel"];
pub const STATS_ROWS: [&str; 8] = [
    "total pairs",
    "total categories",
    "target images",
    "target objects",
    "reference images",
    "reference objects",
    "all images",
    "all objects",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub name: String,
    /// One count per column of [`STATS_COLUMNS`].
    pub values: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsTable {
    pub columns: Vec<String>,
    pub rows: Vec<StatsRow>,
}

impl StatsTable {
    pub fn get(&self, row: &str, column: &str) -> Option<usize> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.name == row).map(|r| r.values[c])
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<20}", "Metric");
        for c in &self.columns {
            out.push_str(&format!(" {c:>11}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<20}", r.name));
            for v in &r.values {
                out.push_str(&format!(" {:>11}", group_thousands(*v)));
            }
            out.push('\n');
        }
        out
    }
}

/// `127166` → `"127,166"`
pub fn group_thousands(v: usize) -> String {
    let s = v.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Default)]
struct Tally {
    pairs: usize,
    categories: BTreeSet<String>,
    target_images: BTreeSet<PathBuf>,
    target_objects: BTreeSet<PathBuf>,
    ref_images: BTreeSet<PathBuf>,
    ref_objects: BTreeSet<PathBuf>,
}

impl Tally {
    fn add(&mut self, s: &CorSample) {
        self.pairs += 1;
        self.categories.insert(s.category.clone());
        self.target_images.insert(s.target_image.clone());
        self.target_objects.extend(s.positive_masks.iter().cloned());
        self.ref_images.insert(s.ref_image.clone());
        self.ref_objects.insert(s.ref_mask.clone());
    }

    fn column(&self) -> Vec<usize> {
        let images = self.target_images.union(&self.ref_images).count();
        let objects = self.target_objects.union(&self.ref_objects).count();
        vec![
            self.pairs,
            self.categories.len(),
            self.target_images.len(),
            self.target_objects.len(),
            self.ref_images.len(),
            self.ref_objects.len(),
            images,
            objects,
        ]
    }
}

/// Images are identified by path and objects by mask path; target objects
/// are the positive instances.
pub fn stats(manifest: &Manifest) -> StatsTable {
    let mut all = Tally::default();
    let mut per: BTreeMap<Split, Tally> = Split::ALL.iter().map(|s| (*s, Tally::default())).collect();
    for s in &manifest.samples {
        all.add(s);
        per.get_mut(&s.split).expect("every split present").add(s);
    }
    let cols: Vec<Vec<usize>> =
        std::iter::once(all.column()).chain(Split::ALL.iter().map(|s| per[s].column())).collect();
    let rows = STATS_ROWS
        .iter()
        .enumerate()
        .map(|(i, name)| StatsRow { name: name.to_string(), values: cols.iter().map(|c| c[i]).collect() })
        .collect();
    StatsTable { columns: STATS_COLUMNS.iter().map(|c| c.to_string()).collect(), rows }
}

/// Pair counts per category within each split that has samples.
pub fn split_summary(manifest: &Manifest) -> Histogram {
    let mut h = Histogram::new();
    for s in &manifest.samples {
        *h.entry(s.split.to_string()).or_default().entry(s.category.clone()).or_default() += 1;
    }
    h
}
