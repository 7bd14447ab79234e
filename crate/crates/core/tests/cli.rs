use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use edgedoc::data::load_manifest;
use edgedoc::eval::read_records;
use edgedoc::Tensor;

const REDUCED: [&str; 8] = [
    "--set",
    "model.stage_channels=8,16,16,32",
    "--set",
    "model.stage_depths=1,1,1,1",
    "--set",
    "model.decoder_channels=16,8,8,4",
    "--set",
    "model.input_size=64,64",
];

fn edgedoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgedoc"))
        .args(args)
        .env_remove("EDGEDOC_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = edgedoc(args);
    assert!(
        out.status.success(),
        "edgedoc {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    edgedoc(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, bonafide: usize, attack: usize, seed: u64) -> String {
    let out = dir.join(name);
    ok(&[
        "synth",
        "--bonafide",
        &bonafide.to_string(),
        "--attack",
        &attack.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]);
    out.join("manifest.tsv").display().to_string()
}

fn history_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn synth_is_deterministic_and_rejects_empty_classes() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "a", 3, 2, 7);
    synth(d.path(), "b", 3, 2, 7);
    let m = load_manifest(d.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(m.entries.len(), 5);
    for e in &m.entries {
        let a = fs::read(d.path().join("a").join(&e.image)).unwrap();
        let b = fs::read(d.path().join("b").join(&e.image)).unwrap();
        assert_eq!(a, b, "{}", e.id);
    }
    assert_eq!(
        fs::read(d.path().join("a/manifest.tsv")).unwrap(),
        fs::read(d.path().join("b/manifest.tsv")).unwrap()
    );
    let out = d.path().join("none");
    assert_eq!(code(&["synth", "--bonafide", "0", "--attack", "2", "--out", s(&out)]), 2);
    assert_eq!(code(&["synth", "--attack", "2", "--out", s(&out)]), 2);
}

#[test]
fn default_length_training_then_inference() {
    let d = tempfile::tempdir().unwrap();
    let train = synth(d.path(), "train", 32, 32, 1);
    let val = synth(d.path(), "val", 8, 8, 2);
    let run = d.path().join("run");
    let mut args = vec!["train", "--train", &train, "--val", &val, "--out", s(&run)];
    args.extend(REDUCED);
    ok(&args);
    let rows = history_rows(&run.join("history.csv"));
    assert_eq!(rows.len(), 20);
    assert!(fs::read_to_string(run.join("history.csv")).unwrap().starts_with("epoch,train_loss,val_loss,lr"));
    assert_eq!(rows[0][3], 3e-4);
    let best = rows.iter().map(|r| r[2]).fold(f64::INFINITY, f64::min);
    let meta = fs::read_to_string(run.join("checkpoint/checkpoint.txt")).unwrap();
    let saved: f64 = meta
        .lines()
        .find_map(|l| l.strip_prefix("meta.val_loss="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((saved - best).abs() < 1e-9, "{saved} vs {best}");

    let infer = d.path().join("infer");
    let ckpt = run.join("checkpoint");
    ok(&["infer", "--checkpoint", s(&ckpt), "--manifest", &val, "--out", s(&infer)]);
    let records = read_records(infer.join("records.csv")).unwrap();
    assert_eq!(records.len(), 16);
    assert!(records.iter().all(|r| (0.0..=1.0).contains(&r.score)));
    assert!(records.iter().all(|r| r.mask_path.as_ref().is_some_and(|p| infer.join(p).exists())));
    let first = fs::read(infer.join("records.csv")).unwrap();
    ok(&["infer", "--checkpoint", s(&ckpt), "--manifest", &val, "--out", s(&infer)]);
    assert_eq!(first, fs::read(infer.join("records.csv")).unwrap());

    let report = ok(&["eval", "--records", s(&infer.join("records.csv")), "--manifest", &val]);
    assert!(report.contains("roc_auc="), "{report}");
    assert!(report.contains("pixel_f1="), "{report}");

    // A parameter whose shape disagrees with the architecture is refused.
    let broken = d.path().join("broken");
    fs::create_dir_all(&broken).unwrap();
    for e in fs::read_dir(&ckpt).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), broken.join(e.file_name())).unwrap();
    }
    Tensor::zeros([2]).write_btf(broken.join("mask_head.bias.btf")).unwrap();
    let out = edgedoc(&["infer", "--checkpoint", s(&broken), "--manifest", &val, "--out", s(&infer)]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_mask_weight_makes_total_equal_classification_loss() {
    let d = tempfile::tempdir().unwrap();
    let train = synth(d.path(), "train", 2, 2, 3);
    let val = synth(d.path(), "val", 1, 1, 4);
    let run = d.path().join("run");
    let mut args = vec![
        "train", "--train", &train, "--val", &val, "--out", s(&run), "--epochs", "3", "--lambda-mask", "0",
    ];
    args.extend(REDUCED);
    ok(&args);
    for r in history_rows(&run.join("history.csv")) {
        assert_eq!(r[1], r[4], "train total vs cls");
        assert_eq!(r[2], r[6], "val total vs cls");
    }
    let cfg = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(cfg.contains("loss.lambda_mask=0\n"), "{cfg}");
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).unwrap();
    path.display().to_string()
}

#[test]
fn eval_and_fuse_contracts() {
    let d = tempfile::tempdir().unwrap();
    let a = write(&d.path().join("a.csv"), "id,label,score\nx,1,0.9\ny,0,0.2\nz,1,0.4\nw,0,0.6\n");
    let b = write(&d.path().join("b.csv"), "id,label,score\nw,0,0.1\nz,1,0.8\ny,0,0.3\nx,1,0.7\n");
    let other = write(&d.path().join("c.csv"), "id,label,score\nx,1,0.9\ny,0,0.2\nq,1,0.4\nw,0,0.6\n");
    let single = write(&d.path().join("s.csv"), "id,label,score\nx,1,0.9\ny,1,0.2\n");

    let fused = d.path().join("fused");
    ok(&["fuse", "--a", &a, "--b", &b, "--weight", "1", "--out", s(&fused)]);
    let fused_csv = fused.join("records.csv").display().to_string();
    let strip = |t: String| t.lines().filter(|l| !l.starts_with("name")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(ok(&["eval", "--records", &fused_csv])), strip(ok(&["eval", "--records", &a])));
    let fr = read_records(&fused_csv).unwrap();
    let ar = read_records(&a).unwrap();
    for (f, r) in fr.iter().zip(&ar) {
        assert_eq!((f.id.as_str(), f.score), (r.id.as_str(), r.score));
    }

    let out = edgedoc(&["fuse", "--a", &a, "--b", &other, "--out", s(&d.path().join("bad"))]);
    assert_eq!(out.status.code(), Some(6));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('q') && err.contains('z'), "{err}");

    let out = edgedoc(&["eval", "--records", &single]);
    assert_eq!(out.status.code(), Some(7));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bonafide"));

    let perfect = write(&d.path().join("p.csv"), "id,label,score\nx,1,0.9\ny,0,0.2\nz,1,0.6\n");
    let report = ok(&["eval", "--records", &perfect, "--out", s(&d.path().join("rep"))]);
    for key in ["accuracy=1", "f1_weighted=1", "roc_auc=1", "mcc=1"] {
        assert!(report.contains(key), "{key} missing in {report}");
    }
    assert!(d.path().join("rep/roc.csv").exists() && d.path().join("rep/report.txt").exists());

    let roc = d.path().join("roc.csv");
    ok(&["roc", "--records", &a, "--out", s(&roc)]);
    assert!(fs::read_to_string(&roc).unwrap().lines().count() >= 3);
    assert_eq!(code(&["eval", "--records", s(&d.path().join("missing.csv"))]), 3);
}

#[test]
fn configuration_resolution() {
    let d = tempfile::tempdir().unwrap();
    let file = write(&d.path().join("run.cfg"), "# run\nseed=9\noptim.epochs=4\n");
    let text = ok(&["--config", &file, "--set", "optim.lr0=0.001", "--print-config", "roc", "--records", "x", "--out", "y"]);
    assert!(text.contains("seed=9\n") && text.contains("optim.epochs=4\n") && text.contains("optim.lr0=0.001\n"));

    let env = Command::new(env!("CARGO_BIN_EXE_edgedoc"))
        .args(["--print-config", "roc", "--records", "x", "--out", "y"])
        .env("EDGEDOC_SEED", "31")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&env.stdout).contains("seed=31\n"));

    // The printed configuration reproduces itself.
    let again = write(&d.path().join("again.cfg"), &text);
    assert_eq!(ok(&["--config", &again, "--print-config", "roc", "--records", "x", "--out", "y"]), text);

    assert_eq!(code(&["--set", "optim.nope=1", "--print-config", "roc", "--records", "x", "--out", "y"]), 2);
    assert_eq!(code(&["--set", "fusion.weight=2", "--print-config", "roc", "--records", "x", "--out", "y"]), 2);
    let bad = write(&d.path().join("bad.cfg"), "seed 9\n");
    assert_eq!(code(&["--config", &bad, "roc", "--records", "x", "--out", "y"]), 2);
}
