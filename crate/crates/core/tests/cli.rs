//! End-to-end tests of the `essa` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use essa_core::checkpoint::Checkpoint;
use essa_core::config::RunConfig;
use essa_core::data::{expected_len, Dataset};
use essa_core::eval::{evaluate_knn_protocol, Metric};

fn essa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_essa")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = essa(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = r#"{"name": "t", "image_size": 16, "train": 16, "val": 4, "test": 12, "seed": 3}"#;

/// A workspace with synthetic data and a config whose stages run 2 epochs.
fn workspace(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    ok(&["synth", "--spec", s(&spec), "--out", s(&dir.path().join("data"))]);
    let config = dir.path().join("run.ini");
    fs::write(
        &config,
        format!(
            "[model]\npreset = tiny\nseed = 1\n\n\
             [adapter.essa]\nkind = lora\n\n\
             [essa]\nepochs = 3\nwarmup_epochs = 1\nbatch_size = 8\n\n\
             [sa]\nepochs = 2\nwarmup_epochs = 1\nbatch_size = 8\n\n\
             [ttt]\nepochs = 2\nwarmup_epochs = 1\nbatch_size = 8\n\n\
             [data]\nessa = data/t.train.target.esds\nsa = data/t.train.source.esds\nttt = data/t.test.target.esds\n\
             train = data/t.train.target.esds\ntest = data/t.test.target.esds\n\n\
             [eval]\nk = 5\n{extra}"
        ),
    )
    .unwrap();
    (dir, config)
}

#[test]
fn synth_is_byte_identical_and_sized_by_the_header_formula() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let stdout = ok(&["synth", "--spec", s(&spec), "--out", s(&dir.path().join("a"))]);
    ok(&["synth", "--spec", s(&spec), "--out", s(&dir.path().join("b"))]);
    assert_eq!(stdout.lines().count(), 6);
    for entry in fs::read_dir(dir.path().join("a")).unwrap() {
        let path = entry.unwrap().path();
        let a = fs::read(&path).unwrap();
        let b = fs::read(dir.path().join("b").join(path.file_name().unwrap())).unwrap();
        assert_eq!(a, b, "{}", path.display());
        let count = if path.to_str().unwrap().contains(".train.") {
            16
        } else if path.to_str().unwrap().contains(".val.") {
            4
        } else {
            12
        };
        assert_eq!(a.len(), expected_len(count, 3 * 16 * 16, true));
    }
}

#[test]
fn zero_shift_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"image_size": 16, "train": 2, "val": 2, "test": 2, "shift_strength": 0.0}"#).unwrap();
    let out = essa(&["synth", "--spec", s(&spec), "--out", s(&dir.path().join("d"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let src = fs::read(dir.path().join("d/synth.test.source.esds")).unwrap();
    let tgt = fs::read(dir.path().join("d/synth.test.target.esds")).unwrap();
    assert_eq!(src, tgt);
}

#[test]
fn stages_chain_and_log_one_line_per_epoch() {
    let (dir, config) = workspace("");
    let d = dir.path();
    ok(&["adapt", "--config", s(&config), "--out", s(&d.join("essa.ckpt"))]);
    let log = fs::read_to_string(d.join("essa.ckpt.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.contains("\"stage\":\"essa\"") && l.contains("\"adapter\":\"lora\"")));

    // Finetune on top of the adapted weights by pointing the stage at them.
    let chained = d.join("chain.ini");
    let text = fs::read_to_string(&config).unwrap().replace("[sa]\n", "[sa]\nfrom = essa.ckpt\n");
    fs::write(&chained, text).unwrap();
    ok(&["finetune", "--config", s(&chained), "--out", s(&d.join("sa.ckpt"))]);
    let text = fs::read_to_string(&chained).unwrap().replace("[ttt]\n", "[ttt]\nfrom = sa.ckpt\n");
    fs::write(&chained, text).unwrap();
    ok(&["ttt", "--config", s(&chained), "--out", s(&d.join("ttt.ckpt"))]);

    let sa = Checkpoint::load(&d.join("sa.ckpt")).unwrap().model().unwrap();
    let ttt = Checkpoint::load(&d.join("ttt.ckpt")).unwrap().model().unwrap();
    assert!(sa.layout.lora.is_some());
    for name in ["head.weight", "head.bias"] {
        assert_eq!(sa.params.get(name), ttt.params.get(name));
    }
    let first = ok(&["eval", "--ckpt", s(&d.join("ttt.ckpt")), "--config", s(&config), "--protocol", "head"]);
    let again = ok(&["eval", "--ckpt", s(&d.join("ttt.ckpt")), "--config", s(&config), "--protocol", "head"]);
    assert_eq!(first, again);
    assert!(first.starts_with("accuracy: "));
}

#[test]
fn resumed_run_writes_the_same_checkpoint() {
    let (dir, config) = workspace("");
    let d = dir.path();
    ok(&["adapt", "--config", s(&config), "--out", s(&d.join("full.ckpt"))]);
    ok(&["adapt", "--config", s(&config), "--out", s(&d.join("part.ckpt")), "--until-epoch", "1"]);
    let part = Checkpoint::load(&d.join("part.ckpt")).unwrap();
    assert_eq!(part.meta.run.as_ref().unwrap().epoch, 1);
    ok(&["adapt", "--config", s(&config), "--resume", s(&d.join("part.ckpt")), "--out", s(&d.join("resumed.ckpt"))]);
    assert_eq!(fs::read(d.join("full.ckpt")).unwrap(), fs::read(d.join("resumed.ckpt")).unwrap());
}

#[test]
fn knn_eval_matches_the_library() {
    let (dir, config) = workspace("");
    let d = dir.path();
    ok(&["finetune", "--config", s(&config), "--out", s(&d.join("sa.ckpt"))]);
    let log = d.join("eval.jsonl");
    let out = ok(&["eval", "--ckpt", s(&d.join("sa.ckpt")), "--config", s(&config), "--log", s(&log)]);
    let cfg = RunConfig::load(&config).unwrap();
    let model = Checkpoint::load(&d.join("sa.ckpt")).unwrap().model().unwrap();
    let train = Dataset::load(cfg.data.train.as_ref().unwrap()).unwrap();
    let test = Dataset::load(cfg.data.test.as_ref().unwrap()).unwrap();
    let direct = evaluate_knn_protocol(&model, &train, &test, 5, 0.07, Metric::Accuracy).unwrap();
    assert_eq!(out.trim(), format!("accuracy: {:.6}", direct.value));
    let line = fs::read_to_string(log).unwrap();
    assert!(line.contains("\"kind\":\"eval\"") && line.contains("\"stage\":\"sa\"") && line.contains("\"adapter\":\"full\""));
}

#[test]
fn report_has_one_row_per_adapter_and_stage() {
    let (dir, config) = workspace("");
    let d = dir.path();
    let logs = d.join("logs");
    fs::create_dir(&logs).unwrap();
    let text = fs::read_to_string(&config).unwrap().replace("kind = lora", "kind = full");
    fs::write(&config, text).unwrap();
    ok(&["adapt", "--config", s(&config), "--out", s(&d.join("e.ckpt")), "--log", s(&logs.join("essa.jsonl"))]);
    ok(&["eval", "--ckpt", s(&d.join("e.ckpt")), "--config", s(&config), "--log", s(&logs.join("essa.jsonl"))]);
    let csv = d.join("report.csv");
    ok(&["report", "--logs", s(&logs), "--out", s(&csv)]);
    let text = fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let header: Vec<&str> = lines[0].split(',').collect();
    let row: Vec<&str> = lines[1].split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("adapter"), "full");
    assert_eq!(col("stage"), "essa");
    assert_eq!(col("trainable_fraction"), "1.0");
    let count: usize = col("trainable_count").parse().unwrap();
    assert_eq!(col("optimizer_state_bytes").parse::<usize>().unwrap(), count * 16);
    assert_eq!(col("metric"), "accuracy");
}

#[test]
fn errors_map_to_exit_codes() {
    let (dir, config) = workspace("");
    let d = dir.path();

    let bad = d.join("bad.ini");
    fs::write(&bad, "[model]\npreset = tiny\n[essa]\nepoch = 3\n").unwrap();
    let out = essa(&["adapt", "--config", s(&bad), "--out", s(&d.join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));

    let out = essa(&["eval", "--ckpt", "x", "--config", s(&config), "--protocol", "bogus"]);
    assert_eq!(out.status.code(), Some(2));

    ok(&["adapt", "--config", s(&config), "--out", s(&d.join("e.ckpt"))]);
    let out = essa(&["eval", "--ckpt", s(&d.join("e.ckpt")), "--config", s(&config), "--protocol", "head"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    ok(&["adapt", "--config", s(&config), "--out", s(&d.join("p.ckpt")), "--until-epoch", "1"]);
    let small = d.join("small.ini");
    fs::write(&small, fs::read_to_string(&config).unwrap().replace("preset = tiny", "preset = small")).unwrap();
    let out = essa(&["adapt", "--config", s(&small), "--resume", s(&d.join("p.ckpt")), "--out", s(&d.join("q.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));

    let mut bytes = fs::read(d.join("data/t.test.target.esds")).unwrap();
    bytes.truncate(bytes.len() - 1);
    fs::write(d.join("data/t.test.target.esds"), bytes).unwrap();
    let out = essa(&["eval", "--ckpt", s(&d.join("e.ckpt")), "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(3));

    let mut ck = fs::read(d.join("e.ckpt")).unwrap();
    let mid = ck.len() / 2;
    ck[mid] ^= 0x40;
    fs::write(d.join("e.ckpt"), ck).unwrap();
    let out = essa(&["eval", "--ckpt", s(&d.join("e.ckpt")), "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(3));
}
