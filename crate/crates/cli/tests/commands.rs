use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn biovlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biovlm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = biovlm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    biovlm(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

/// A short-training config and its generated bundle.
fn fixture(dir: &Path, json: &str) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, "config.json", json);
    let data = dir.join("data.bvlb");
    ok(&["gen-data", "--spec", s(&cfg), "--out", s(&data)]);
    (cfg, data)
}

const QUICK: &str = r#"{"train": {"lr": 0.2, "epochs": 5}}"#;

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn gen_data_is_seeded_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "{}");
    let a = tmp.path().join("a.bvlb");
    let b = tmp.path().join("b.bvlb");
    let c = tmp.path().join("c.bvlb");
    ok(&["gen-data", "--spec", s(&cfg), "--out", s(&a)]);
    ok(&["gen-data", "--spec", s(&cfg), "--out", s(&b)]);
    ok(&["gen-data", "--spec", s(&cfg), "--out", s(&c), "--seed", "5"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn train_writes_fixed_outputs_and_the_snapshot_reruns_it() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data) = fixture(tmp.path(), QUICK);
    let out = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    for f in ["checkpoint.bvlb", "train_log.csv", "resolved_config.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,ce,asa,ler,cmd,total,lr\n"));
    // 128 samples in batches of 32 for 5 epochs
    assert_eq!(log.lines().count(), 1 + 4 * 5);

    let first = fs::read(out.join("checkpoint.bvlb")).unwrap();
    let snapshot = tmp.path().join("snapshot.json");
    fs::copy(out.join("resolved_config.json"), &snapshot).unwrap();
    fs::remove_dir_all(&out).unwrap();
    ok(&["train", "--config", s(&snapshot), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(fs::read(out.join("checkpoint.bvlb")).unwrap(), first);
}

#[test]
fn eval_covers_every_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data) = fixture(tmp.path(), QUICK);
    let b2n_cfg = write_config(
        tmp.path(),
        "b2n.json",
        r#"{"train": {"lr": 0.2, "epochs": 5}, "eval": {"protocol": "b2n"}}"#,
    );
    let full = tmp.path().join("full");
    let base = tmp.path().join("base");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&full)]);
    ok(&["train", "--config", s(&b2n_cfg), "--data", s(&data), "--out", s(&base)]);
    let ckpt = |d: &Path| d.join("checkpoint.bvlb");

    let fsl = tmp.path().join("fsl");
    ok(&["eval", "--checkpoint", s(&ckpt(&full)), "--data", s(&data), "--protocol", "fewshot", "--out", s(&fsl)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(fsl.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"], "fewshot");
    assert!(report["accuracy"]["synth-a"].as_f64().unwrap() > 50.0);
    let csv = fs::read_to_string(fsl.join("report.csv")).unwrap();
    assert!(csv.starts_with("protocol,dataset,split,accuracy,ece\n"));
    assert!(fsl.join("resolved_config.json").is_file());

    let b2n = tmp.path().join("b2n");
    let table = ok(&["eval", "--checkpoint", s(&ckpt(&base)), "--data", s(&data), "--protocol", "b2n", "--out", s(&b2n)]);
    let splits: Vec<String> = csv_rows(&table)[1..].iter().map(|r| r[2].clone()).collect();
    assert_eq!(splits, ["base", "new", "hm"]);

    // a bank trained on all classes has seen the new half
    let wrong = tmp.path().join("wrong");
    assert_eq!(code(&["eval", "--checkpoint", s(&ckpt(&full)), "--data", s(&data), "--protocol", "b2n", "--out", s(&wrong)]), 2);

    let target_cfg = write_config(
        tmp.path(),
        "target.json",
        r#"{"seed": 9, "data": {"spec": {"dataset_id": "synth-b", "class_offset": 100}}}"#,
    );
    let target = tmp.path().join("target.bvlb");
    ok(&["gen-data", "--spec", s(&target_cfg), "--out", s(&target)]);
    let ood = tmp.path().join("ood");
    let table = ok(&["eval", "--checkpoint", s(&ckpt(&full)), "--data", s(&target), "--protocol", "ood", "--out", s(&ood)]);
    let rows = csv_rows(&table);
    assert_eq!(rows[1][1], "synth-b");
    assert_eq!(rows[2][1], "average");

    // the source's own samples are not a valid OOD target
    assert_eq!(code(&["eval", "--checkpoint", s(&ckpt(&full)), "--data", s(&data), "--protocol", "ood", "--out", s(&ood)]), 3);
}

#[test]
fn untrained_bank_without_class_signal_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data) = fixture(tmp.path(), r#"{"train": {"epochs": 0}, "data": {"spec": {"class_weight": 0.0}}}"#);
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let table = ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bvlb")),
        "--data",
        s(&data),
        "--protocol",
        "fewshot",
        "--out",
        s(&tmp.path().join("eval")),
    ]);
    let acc: f64 = csv_rows(&table)[1][3].parse().unwrap();
    // chance is 12.5 for eight classes
    assert!(acc < 30.0, "{acc}");
}

#[test]
fn ablations_and_sweep_emit_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data) = fixture(tmp.path(), QUICK);
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);

    let sel = tmp.path().join("select");
    ok(&["ablate-select", "--checkpoint", s(&run.join("checkpoint.bvlb")), "--data", s(&data), "--out", s(&sel)]);
    let rows = csv_rows(&fs::read_to_string(sel.join("report.csv")).unwrap());
    assert_eq!(rows[0], ["method", "b2n", "fsl"]);
    let methods: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(methods, ["Softmax", "Mean", "Avg. Logits", "Argmax", "Top-2", "Top-5", "Entropy"]);

    let loss = tmp.path().join("loss");
    ok(&["ablate-loss", "--config", s(&cfg), "--data", s(&data), "--out", s(&loss)]);
    let rows = csv_rows(&fs::read_to_string(loss.join("report.csv")).unwrap());
    assert_eq!(rows[0].len(), 12);
    assert_eq!(rows.len(), 1 + 8);
    let json: Value = serde_json::from_str(&fs::read_to_string(loss.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 8);

    let sweep = tmp.path().join("sweep");
    let table = ok(&["sweep-prompts", "--config", s(&cfg), "--data", s(&data), "--N-list", "1,2,10", "--out", s(&sweep)]);
    let counts: Vec<String> = csv_rows(&table)[1..].iter().map(|r| r[0].clone()).collect();
    assert_eq!(counts, ["1", "2", "10"]);
    assert!(sweep.join("report.json").is_file());
}

#[test]
fn gradcheck_passes_on_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "{}");
    let out = ok(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(out.lines().filter(|l| l.ends_with(",ok")).count(), 12, "{out}");
}

#[test]
fn errors_map_to_category_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "bad.json", r#"{"bank": {"N": 10, "K": 3}}"#);
    let missing = tmp.path().join("missing.json");
    let out = tmp.path().join("d.bvlb");
    assert_eq!(code(&["gen-data", "--spec", s(&bad), "--out", s(&out)]), 2);
    assert_eq!(code(&["gen-data", "--spec", s(&missing), "--out", s(&out)]), 1);

    let (cfg, data) = fixture(tmp.path(), QUICK);
    let mut bytes = fs::read(&data).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    let corrupt = tmp.path().join("corrupt.bvlb");
    fs::write(&corrupt, bytes).unwrap();
    let run = tmp.path().join("run");
    let res = biovlm(&["train", "--config", s(&cfg), "--data", s(&corrupt), "--out", s(&run)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("corrupt section"));

    let other_n = write_config(tmp.path(), "n5.json", r#"{"bank": {"N": 5}, "data": {"spec": {"noise_attribute_count": 2}}}"#);
    assert_eq!(code(&["train", "--config", s(&other_n), "--data", s(&data), "--out", s(&run)]), 2);
}
