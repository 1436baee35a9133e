use std::collections::BTreeMap;
use std::path::Path;

use cor_core::dataset::fixture::{six_setting_manifest, write_six_setting};
use cor_core::dataset::stats::{STATS_COLUMNS, STATS_ROWS};
use cor_core::dataset::synth::{synth_generate, SynthConfig, BASE_SHAPES, NOVEL_SHAPES};
use cor_core::dataset::{
    classify_setting, load_manifest, mentions_category, save_manifest, split_summary, stats, union_mask, Manifest,
    Mask, Split,
};
use cor_core::CorError;
use sha2::{Digest, Sha256};

#[path = "support/oracles.rs"]
mod oracles;
use oracles::SIX_SETTING_STATS;


#[test]
fn stats_on_the_six_setting_fixture() {
    let t = stats(&six_setting_manifest());
    assert_eq!(t.columns, STATS_COLUMNS);
    assert_eq!(t.rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), STATS_ROWS);
    for (row, values) in SIX_SETTING_STATS {
        for (col, v) in STATS_COLUMNS.iter().zip(values) {
            assert_eq!(t.get(row, col), Some(v), "{row} / {col}");
        }
    }
    let text = t.to_text();
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().next().unwrap().contains("Test-Novel"));
}

#[test]
fn histograms_add_up_to_the_pair_counts() {
    let m = six_setting_manifest();
    let h = split_summary(&m);
    let want: BTreeMap<String, BTreeMap<String, usize>> = [
        ("train", vec![("circle", 2), ("square", 1)]),
        ("test_base", vec![("circle", 1), ("square", 1)]),
        ("test_novel", vec![("star", 1)]),
    ]
    .into_iter()
    .map(|(s, v)| (s.to_string(), v.into_iter().map(|(c, n)| (c.to_string(), n)).collect()))
    .collect();
    assert_eq!(h, want);
    let t = stats(&m);
    for split in Split::ALL {
        let total: usize = h.get(split.as_str()).map(|c| c.values().sum()).unwrap_or(0);
        let col = ["Train", "Test-Base", "Test-Novel"][Split::ALL.iter().position(|s| *s == split).unwrap()];
        assert_eq!(Some(total), t.get("total pairs", col));
    }
    assert!(split_summary(&Manifest::default()).is_empty());
}

#[test]
fn manifests_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_six_setting(dir.path()).unwrap();
    let path = dir.path().join("again.json");
    save_manifest(&m, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back, m);
    save_manifest(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    let empty = dir.path().join("empty.json");
    save_manifest(&Manifest::default(), &empty).unwrap();
    assert_eq!(load_manifest(&empty).unwrap(), Manifest::default());
}

#[test]
fn malformed_records_report_their_index() {
    let mut m = six_setting_manifest();
    m.samples[3].pair_id = m.samples[1].pair_id.clone();
    match Manifest::from_json(&m.to_json().unwrap()) {
        Err(CorError::Parse { index, .. }) => assert_eq!(index, 3),
        other => panic!("{other:?}"),
    }
    let mut v: serde_json::Value = serde_json::from_str(&six_setting_manifest().to_json().unwrap()).unwrap();
    v["samples"][4]["split"] = "validation".into();
    match Manifest::from_json(&v.to_string()) {
        Err(CorError::Parse { index, .. }) => assert_eq!(index, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn settings_and_unions() {
    assert_eq!(classify_setting(1, 1).unwrap().label(), "1p1n");
    assert_eq!(classify_setting(3, 0).unwrap().label(), "3p0n");
    assert!(matches!(classify_setting(4, 0), Err(CorError::UnsupportedSetting { .. })));
    assert!(classify_setting(0, 1).is_err());

    let a = Mask::from_fn(4, 4, |y, _| y == 0);
    let b = Mask::from_fn(4, 4, |y, _| y == 3);
    let c = Mask::from_fn(4, 4, |_, x| x == 0);
    assert_eq!(union_mask(std::slice::from_ref(&a)).unwrap(), a);
    assert_eq!(union_mask(&[a.clone(), b.clone()]).unwrap().area(), 8);
    assert_eq!(union_mask(&[a, b, c]).unwrap().area(), 10);
    assert!(matches!(union_mask(&[]), Err(CorError::Input(_))));
}

fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(std::fs::read(&p).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), hex);
            }
        }
    }
    out
}

fn small() -> SynthConfig {
    SynthConfig { train: 24, test_base: 6, test_novel: 6, ..SynthConfig::default() }
}

#[test]
fn synthetic_world_is_deterministic_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_generate(&small(), 42, a.path()).unwrap();
    synth_generate(&small(), 42, b.path()).unwrap();
    synth_generate(&small(), 43, c.path()).unwrap();
    let ha = tree_hashes(a.path());
    assert!(ha.len() > 36);
    assert_eq!(ha, tree_hashes(b.path()));
    assert_ne!(ha, tree_hashes(c.path()));
}

#[test]
fn synthetic_samples_honour_their_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(&SynthConfig { train: 120, test_base: 30, test_novel: 30, ..SynthConfig::default() }, 5, dir.path())
        .unwrap();
    assert_eq!(m, load_manifest(&dir.path().join("manifest.json")).unwrap());
    let novel: Vec<&str> = NOVEL_SHAPES.iter().map(|s| s.name()).collect();
    let base: Vec<&str> = BASE_SHAPES.iter().map(|s| s.name()).collect();
    let lexicon_all: Vec<&str> = base.iter().chain(&novel).copied().collect();
    for s in &m.samples {
        let setting = classify_setting(s.positive_masks.len(), s.negative_masks.len()).unwrap();
        assert_eq!(setting.label(), s.setting);
        if s.setting == "1p2n" {
            assert_eq!((s.positive_masks.len(), s.negative_masks.len()), (1, 2));
        }
        for shape in &lexicon_all {
            assert!(!mentions_category(&s.retrieval_text, shape), "{:?} names {shape}", s.retrieval_text);
        }
        assert_eq!(s.split == Split::TestNovel, novel.contains(&s.category.as_str()));
        let gt = s.union_target(dir.path()).unwrap();
        assert!(gt.area() > 0);
        let r = Mask::load(&dir.path().join(&s.ref_mask)).unwrap();
        assert!(r.area() > 0);
    }
}
