use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use poirec::eval::{evaluate, EvalReport};
use poirec::ingest::load_dataset;
use poirec::model::{load_checkpoint, Model, VariantSpec};
use poirec::numerics::RngState;
use poirec::train::TrainConfig;

fn poirec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poirec")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = poirec(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = poirec(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic corpus ingested into `<dir>/enc`.
fn corpus(dir: &Path) -> PathBuf {
    let tsv = dir.join("synth.tsv");
    ok(&["synth", "--out", s(&tsv), "--users", "16", "--areas", "3", "--seed", "5"]);
    let enc = dir.join("enc");
    ok(&["ingest", "--dataset", s(&tsv), "--out", s(&enc)]);
    enc
}

const QUICK: &[&str] = &["--epochs", "2", "--neg", "5", "--batch", "8"];

fn train(enc: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--dataset", s(enc), "--out", s(out)];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    let stdout = ok(&args);
    let dir = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run_dir="))
        .expect("run_dir printed");
    PathBuf::from(dir)
}

#[test]
fn ingest_reports_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let enc = corpus(tmp.path());
    let manifest = std::fs::read_to_string(enc.join("ingest_manifest.txt")).unwrap();
    assert!(manifest.contains("malformed=0"));
    assert!(manifest.contains("pois=45"));
    let again = tmp.path().join("enc2");
    ok(&["ingest", "--dataset", s(&tmp.path().join("synth.tsv")), "--out", s(&again)]);
    assert_eq!(manifest, std::fs::read_to_string(again.join("ingest_manifest.txt")).unwrap());

    let empty = tmp.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    let err = fails(&["ingest", "--dataset", s(&empty), "--out", s(&tmp.path().join("e"))]);
    assert!(err.contains("check-ins"), "{err}");
}

#[test]
fn train_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let enc = corpus(tmp.path());
    let run = train(&enc, &tmp.path().join("runs"), &[]);
    for f in ["manifest.txt", "config.json", "loss.log", "checkpoint.bin"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("loss.log")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ck = s(&run.join("checkpoint.bin")).to_string();
    let json = ok(&["evaluate", "--dataset", s(&enc), "--checkpoint", &ck]);
    let csv = ok(&["evaluate", "--dataset", s(&enc), "--checkpoint", &ck, "--format", "csv"]);
    let from_json: EvalReport = serde_json::from_str(json.trim()).unwrap();
    let from_csv = EvalReport::from_csv_row(csv.lines().nth(1).unwrap()).unwrap();
    assert_eq!(from_json, from_csv);
    assert!(run.join("report.json").exists() && run.join("report.csv").exists());

    // same numbers as the library call
    let ds = load_dataset(enc.join("dataset.jsonl")).unwrap();
    let loaded = load_checkpoint(&ck).unwrap();
    let lib = evaluate(
        &VariantSpec::full(),
        &loaded.model,
        &ds.histories,
        &ds.vocab.poi_category,
        &TrainConfig::default().seq(),
        &loaded.config_hash,
    )
    .unwrap();
    assert_eq!(lib, from_json);

    let err = fails(&["evaluate", "--dataset", s(&enc), "--checkpoint", &ck, "--variant", "long"]);
    assert!(err.contains("variant"), "{err}");
}

#[test]
fn reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let enc = corpus(tmp.path());
    let a = train(&enc, &tmp.path().join("a"), &["--seed", "3"]);
    let b = train(&enc, &tmp.path().join("b"), &["--seed", "3"]);
    assert_eq!(a.file_name(), b.file_name());
    for f in ["manifest.txt", "config.json", "loss.log", "checkpoint.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let eval = |run: &Path| ok(&["evaluate", "--dataset", s(&enc), "--checkpoint", s(&run.join("checkpoint.bin"))]);
    assert_eq!(eval(&a), eval(&b));
    let c = train(&enc, &tmp.path().join("c"), &["--seed", "4"]);
    assert_ne!(a.file_name(), c.file_name());
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let enc = corpus(tmp.path());
    let run = train(
        &enc,
        &tmp.path().join("runs"),
        &["--lr", "0", "--dropout-mlp", "0", "--resample-negatives", "false"],
    );
    let ds = load_dataset(enc.join("dataset.jsonl")).unwrap();
    let ck = load_checkpoint(run.join("checkpoint.bin")).unwrap();
    let init = Model::new(ds.vocab.sizes(), VariantSpec::full(), &mut RngState::derive(42, 0)).unwrap();
    for (a, b) in ck.model.store.leaves().iter().zip(init.store.leaves()) {
        assert_eq!(a.value, b.value, "{}", a.id);
    }
    let log = std::fs::read_to_string(run.join("loss.log")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|l| (l - losses[0]).abs() <= 1e-12 * losses[0]), "{losses:?}");
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let enc = corpus(tmp.path());
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, format!("dataset = {}\nepochs = 1\nneg = 5\nvariant = s1+s4\n", s(&enc))).unwrap();
    let out = tmp.path().join("runs");
    let stdout = ok(&["train", "--config", s(&cfg), "--out", s(&out), "--epochs", "2"]);
    let run = PathBuf::from(stdout.lines().find_map(|l| l.strip_prefix("run_dir=")).unwrap());
    let manifest = std::fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("epochs=2") && manifest.contains("variant=S1+S4"), "{manifest}");

    std::fs::write(&cfg, "dataset = x\nlearning_rate = 1\n").unwrap();
    let err = fails(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(err.contains("unknown config key"), "{err}");
    let err = fails(&["train", "--out", s(&out)]);
    assert!(err.contains("--dataset"), "{err}");
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let enc = corpus(tmp.path());
    let out = tmp.path().join("abl");
    let mut args = vec!["ablate", "--dataset", s(&enc), "--out", s(&out), "--variants", "long;s1 s1+s2", "--format", "csv"];
    args.extend_from_slice(QUICK);
    let stdout = ok(&args);
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows[0], poirec::eval::CSV_HEADER);
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, vec!["long", "S1", "S1+S2"]);
    assert_eq!(std::fs::read_to_string(out.join("ablation.csv")).unwrap(), stdout);
}

#[test]
fn gradcheck_passes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let enc = corpus(tmp.path());
    let stdout = ok(&["gradcheck", "--dataset", s(&enc), "--coords", "40", "--neg", "5"]);
    let v: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(v["coordinates"].as_u64().unwrap() > 0);
}

#[test]
fn non_finite_loss_aborts() {
    let tmp = tempfile::tempdir().unwrap();
    let enc = corpus(tmp.path());
    let err = fails(&["train", "--dataset", s(&enc), "--out", s(&tmp.path().join("r")), "--lr", "1e300", "--epochs", "3"]);
    assert!(err.contains("non-finite loss"), "{err}");
}
