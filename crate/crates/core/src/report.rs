//! Comparison tables across methods, and report files.

use std::path::Path;

use crate::dataset::{Split, OFFICIAL_SETTINGS};
use crate::error::{CorError, Result};
use crate::metrics::EvalReport;

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Methods as rows; for each split present in any report, Dice, IoU, MAE,
/// mDice and mIoU of the whole split.
pub fn overall_table(reports: &[EvalReport]) -> String {
    let splits: Vec<&str> = Split::ALL
        .iter()
        .map(|s| s.as_str())
        .filter(|s| reports.iter().any(|r| r.splits.contains_key(*s)))
        .collect();
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}", "method");
    for s in &splits {
        for m in ["Dice", "IoU", "MAE", "mDice", "mIoU"] {
            out.push_str(&format!(" {:>17}", format!("{s}:{m}")));
        }
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<width$}", r.method));
        for s in &splits {
            let m = r.splits.get(*s).map(|x| x.overall.metrics);
            for v in [m.map(|m| m.dice), m.map(|m| m.iou), m.map(|m| m.mae), m.map(|m| m.m_dice), m.map(|m| m.m_iou)] {
                out.push_str(&format!(" {:>17}", cell(v)));
            }
        }
        out.push('\n');
    }
    out
}

/// Methods as rows, the six settings as columns, Dice of `split`.
pub fn setting_table(reports: &[EvalReport], split: Split) -> String {
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("[{split}] Dice by setting\n{:<width$}", "method");
    let labels: Vec<String> = OFFICIAL_SETTINGS.iter().map(|s| s.label()).collect();
    for l in &labels {
        out.push_str(&format!(" {l:>8}"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<width$}", r.method));
        let rep = r.splits.get(split.as_str());
        for l in &labels {
            let v = rep.and_then(|x| x.settings.get(l)).map(|s| s.metrics.dice);
            out.push_str(&format!(" {:>8}", cell(v)));
        }
        out.push('\n');
    }
    out
}

/// Writes `report.txt` (the per-split blocks) and `report.json`.
pub fn write_eval_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CorError::io(dir, e))?;
    let txt = dir.join("report.txt");
    std::fs::write(&txt, report.to_text()).map_err(|e| CorError::io(&txt, e))?;
    let json = dir.join("report.json");
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    std::fs::write(&json, s).map_err(|e| CorError::io(&json, e))
}

pub fn read_eval_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CorError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Overall table followed by one setting table per split any report covers.
pub fn comparison(reports: &[EvalReport]) -> String {
    let mut out = overall_table(reports);
    for split in Split::ALL {
        if reports.iter().any(|r| r.splits.contains_key(split.as_str())) {
            out.push('\n');
            out.push_str(&setting_table(reports, split));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Setting;
    use crate::metrics::{evaluate, EvalItem};

    fn report(method: &str, pred: f64) -> EvalReport {
        let gt = vec![1.0, 1.0, 0.0, 0.0];
        let items = [
            EvalItem { split: "test_base", setting: Setting::parse("1p0n").unwrap(), gt: &gt },
            EvalItem { split: "test_base", setting: Setting::parse("2p1n").unwrap(), gt: &gt },
        ];
        evaluate(method, &items, &[vec![pred, 1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn tables_have_one_row_per_method() {
        let rs = [report("core", 1.0), report("baseline", 0.0)];
        let t = overall_table(&rs);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().next().unwrap().contains("test_base:Dice"));
        assert!(!t.contains("train:"));
        let s = setting_table(&rs, Split::TestBase);
        let base = s.lines().find(|l| l.starts_with("baseline")).unwrap();
        // 1p0n: dice 2/3; 1p1n absent.
        assert!(base.contains("0.6667") && base.contains(" -"));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = report("core", 0.2);
        write_eval_report(&r, dir.path()).unwrap();
        assert_eq!(read_eval_report(&dir.path().join("report.json")).unwrap(), r);
        assert!(std::fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("[test_base]"));
    }
}
