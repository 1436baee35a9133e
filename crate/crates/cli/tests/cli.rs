use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cor_cli::{cmd_eval, cmd_synth, cmd_train, load_model, EvalArgs, FixtureKind, Method, SynthArgs, TrainArgs, CHECKPOINT_FILE, LOG_FILE};
use cor_core::dataset::{load_manifest, Split};
use cor_core::numerics::checkpoint;
use cor_core::pipeline::ScriptedVlm;
use cor_core::{CoreModel, Expression, ModelConfig};

fn cor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cor")).args(args).output().expect("spawn cor")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_world(dir: &Path) -> PathBuf {
    let out = dir.join("world");
    cmd_synth(&SynthArgs {
        out: out.clone(),
        seed: 7,
        train: 6,
        test_base: 3,
        test_novel: 0,
        size: 64,
        fixture: FixtureKind::World,
    })
    .unwrap();
    out.join("manifest.json")
}

fn train_args(manifest: &Path, out: &Path, epochs: usize) -> TrainArgs {
    TrainArgs {
        manifest: manifest.to_path_buf(),
        out: out.to_path_buf(),
        epochs,
        lr: 1e-4,
        batch_size: 6,
        seed: 42,
        no_rre: false,
        no_avti: false,
        no_lcor: false,
        expr: Expression::Full,
    }
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn zero_epochs_saves_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_world(dir.path());
    let run = dir.path().join("run");
    assert!(cmd_train(&train_args(&manifest, &run, 0)).unwrap().is_empty());

    let fresh = CoreModel::new(ModelConfig { seed: 42, ..ModelConfig::default() }).unwrap();
    let reference = dir.path().join("init.bin");
    checkpoint::save(&fresh.store, &reference).unwrap();
    assert_eq!(std::fs::read(run.join(CHECKPOINT_FILE)).unwrap(), std::fs::read(reference).unwrap());
    assert_eq!(std::fs::read_to_string(run.join(LOG_FILE)).unwrap().lines().count(), 1);
}

#[test]
fn training_leaves_frozen_weights_alone_and_logs_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_world(dir.path());
    let run = dir.path().join("run");
    let logs = cmd_train(&train_args(&manifest, &run, 2)).unwrap();
    assert_eq!(logs.len(), 2);

    let fresh = CoreModel::new(ModelConfig { seed: 42, ..ModelConfig::default() }).unwrap();
    let trained = load_model(&run).unwrap();
    for id in fresh.frozen_ids() {
        // The checkpoint is f32, so compare at that precision.
        let a: Vec<f32> = fresh.store.tensor(id).data().iter().map(|&v| v as f32).collect();
        let b: Vec<f32> = trained.store.tensor(id).data().iter().map(|&v| v as f32).collect();
        assert_eq!(a, b);
    }
    let trainable_moved = fresh
        .store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .any(|(id, _)| fresh.store.tensor(id).data() != trained.store.tensor(id).data());
    assert!(trainable_moved);

    let log = std::fs::read_to_string(run.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().next().unwrap().contains("l_cor"));
}

#[test]
fn no_lcor_drops_the_alignment_column() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_world(dir.path());
    let run = dir.path().join("run");
    let out = cor(&["train", "--manifest", p(&manifest), "--out", p(&run), "--epochs", "1", "--no-lcor"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join(LOG_FILE)).unwrap();
    let header = log.lines().next().unwrap();
    assert!(!header.contains("l_cor"), "{header}");
    assert!(header.contains("l_seg"));
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn evaluation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_world(dir.path());
    let run = dir.path().join("run");
    cmd_train(&train_args(&manifest, &run, 1)).unwrap();
    let eval = |out: &str, method| EvalArgs {
        manifest: manifest.clone(),
        checkpoint: Some(run.clone()),
        method,
        split: Split::TestBase,
        out: Some(dir.path().join(out)),
        name: None,
    };
    let a = cmd_eval(&eval("a", Method::Core)).unwrap();
    let b = cmd_eval(&eval("b", Method::Core)).unwrap();
    assert_eq!(a, b);
    assert_eq!(files(&dir.path().join("a")), files(&dir.path().join("b")));
    assert_eq!(a.splits["test_base"].overall.count, 3);

    let base = cmd_eval(&eval("c", Method::Baseline)).unwrap();
    assert_eq!(base.method, "baseline");
    assert_eq!(base.splits["test_base"].overall.count, 3);

    let missing = EvalArgs { checkpoint: None, ..eval("d", Method::Core) };
    assert!(cmd_eval(&missing).is_err());
    let empty = EvalArgs { split: Split::TestNovel, ..eval("e", Method::Core) };
    assert!(cmd_eval(&empty).is_err());
}

#[test]
fn a_checkpoint_from_another_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_world(dir.path());
    let run = dir.path().join("run");
    cmd_train(&train_args(&manifest, &run, 0)).unwrap();
    let mut other = CoreModel::new(ModelConfig { k: 4, ..ModelConfig::default() }).unwrap();
    let err = checkpoint::load(&mut other.store, &run.join(CHECKPOINT_FILE)).unwrap_err();
    assert!(matches!(err, cor_core::CorError::Checkpoint(_)), "{err:?}");
}

#[test]
fn stats_on_the_six_setting_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let six = dir.path().join("six");
    assert!(cor(&["synth", "--fixture", "six-setting", "--out", p(&six)]).status.success());
    let out = cor(&["stats", "--manifest", p(&six.join("manifest.json")), "--out", p(&dir.path().join("st"))]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row = text.lines().find(|l| l.starts_with("all objects")).unwrap();
    assert_eq!(row.split_whitespace().skip(2).collect::<Vec<_>>(), ["15", "5", "6", "4"]);
    assert_eq!(std::fs::read_to_string(dir.path().join("st/stats.txt")).unwrap(), text);
    let cats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("st/categories.json")).unwrap()).unwrap();
    assert_eq!(cats["test_novel"]["star"], 1);
}

#[test]
fn synth_is_reproducible_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let args = ["synth", "--out", p(&out), "--seed", seed, "--train", "8", "--test-base", "4", "--test-novel", "4"];
        assert!(cor(&args).status.success());
        files(&out)
    };
    let a = run("a", "42");
    assert_eq!(a, run("b", "42"));
    assert_ne!(a, run("c", "9"));
    assert_eq!(load_manifest(&dir.path().join("a/manifest.json")).unwrap().samples.len(), 16);
}

#[test]
fn pipeline_with_a_rejecting_validator_yields_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert!(cor(&["synth", "--fixture", "pipeline", "--out", p(&fx)]).status.success());
    let mock = dir.path().join("reject.json");
    std::fs::write(&mock, serde_json::to_string(&ScriptedVlm::uniform("0", "[(x)]")).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = cor(&[
        "pipeline",
        "--annotations",
        p(&fx.join("annotations.json")),
        "--mock",
        p(&mock),
        "--config",
        p(&fx.join("pipeline.json")),
        "--out",
        p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(load_manifest(&out_dir.join("manifest.json")).unwrap().samples.is_empty());

    let full = dir.path().join("full");
    let out = cor(&[
        "pipeline",
        "--annotations",
        p(&fx.join("annotations.json")),
        "--mock",
        p(&fx.join("mock.json")),
        "--config",
        p(&fx.join("pipeline.json")),
        "--out",
        p(&full),
    ]);
    assert!(out.status.success());
    assert_eq!(load_manifest(&full.join("manifest.json")).unwrap().samples.len(), 37);
}

#[test]
fn pipeline_without_a_validator_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert!(cor(&["synth", "--fixture", "pipeline", "--out", p(&fx)]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_cor"))
        .args(["pipeline", "--annotations", p(&fx.join("annotations.json")), "--out", p(&dir.path().join("o"))])
        .env_remove("COR_VLM_ENDPOINT")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("COR_VLM_ENDPOINT"));
}

#[test]
fn gradcheck_exit_code_follows_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("grad.txt");
    let ok = cor(&["gradcheck", "--out", p(&table)]);
    assert!(ok.status.success());
    assert!(std::fs::read_to_string(&table).unwrap().contains("l_total"));
    let bad = cor(&["gradcheck", "--analytic-scale", "1.01"]);
    assert!(!bad.status.success());
}

#[test]
fn report_joins_several_runs() {
    let dir = tempfile::tempdir().unwrap();
    let six = dir.path().join("six");
    assert!(cor(&["synth", "--fixture", "six-setting", "--out", p(&six)]).status.success());
    let m = six.join("manifest.json");
    for split in ["train", "test_base"] {
        let out = dir.path().join(split);
        let args = ["eval", "--manifest", p(&m), "--method", "baseline", "--split", split, "--out", p(&out), "--name", split];
        let o = cor(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let out = cor(&[
        "report",
        "--inputs",
        p(&dir.path().join("train/report.json")),
        p(&dir.path().join("test_base/report.json")),
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[train] Dice by setting") && text.contains("[test_base] Dice by setting"));
}
