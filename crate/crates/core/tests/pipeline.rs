mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{synth, SMALL};
use dcelanm::data::{load_mask, save_image, write_dataset, Manifest};
use dcelanm::{Rng, Tensor};

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcelanm"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Kvasir-style folder: `images/` and `masks/` with matching names, no manifest.
fn kvasir_dir(root: &Path, n: usize) {
    write_dataset(root, &synth(n, 64, 21)).unwrap();
    std::fs::remove_file(root.join("manifest.tsv")).unwrap();
}

fn trained_checkpoint(dir: &Path) -> std::path::PathBuf {
    kvasir_dir(&dir.join("data"), 6);
    std::fs::write(dir.join("small.cfg"), SMALL).unwrap();
    ok(&cli(
        &["train", "--config", "small.cfg", "--data", "data", "--all-splits", "--epochs", "1", "--out", "run"],
        dir,
    ));
    dir.join("run/model.ckpt")
}

#[test]
fn kvasir_layout_ingests_and_reports_three_metrics() {
    let dir = tempfile::tempdir().unwrap();
    kvasir_dir(dir.path(), 5);
    let m = Manifest::open(dir.path()).unwrap();
    assert_eq!(m.entries.len(), 5);
    assert_eq!(m.load_all().unwrap()[0].image.shape(), &[3, 64, 64]);

    let work = tempfile::tempdir().unwrap();
    let ck = trained_checkpoint(work.path());
    let data = dir.path().to_str().unwrap();
    let text = ok(&cli(&["eval", "--data", data, "--split", "all", "--checkpoint", ck.to_str().unwrap(), "--out", "ev"], work.path()));
    let keys: Vec<&str> = text.lines().take_while(|l| !l.is_empty()).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(keys, ["threshold", "samples", "mDice", "mIOU", "mPre"]);
    assert!(text.contains("samples\t5"));
    assert_eq!(std::fs::read_to_string(work.path().join("ev/report.txt")).unwrap(), text);
    let again = ok(&cli(&["eval", "--data", data, "--split", "all", "--checkpoint", ck.to_str().unwrap()], work.path()));
    assert_eq!(text, again);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    kvasir_dir(&dir.path().join("data"), 4);
    std::fs::write(dir.path().join("c.cfg"), format!("{SMALL}epochs = 3\n")).unwrap();
    ok(&cli(&["train", "--config", "c.cfg", "--data", "data", "--all-splits", "--epochs", "2", "--block", "elan", "--mae", "off", "--out", "r"], dir.path()));
    let log = std::fs::read_to_string(dir.path().join("r/train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let ck = dcelanm::train::Checkpoint::load(&dir.path().join("r/model.ckpt")).unwrap();
    assert!(!ck.config.net.use_mae);
    assert_eq!(ck.config.net.block, dcelanm::backbone::BlockKind::Elan);
}

#[test]
fn predicts_at_original_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained_checkpoint(dir.path());
    let mut rng = Rng::new(3);
    let img = Tensor::from_vec((0..3 * 288 * 384).map(|_| rng.uniform() as f32).collect(), &[3, 288, 384]).unwrap();
    save_image(&img, &dir.path().join("cvc.png")).unwrap();
    let out = ok(&cli(&["predict", "--checkpoint", ck.to_str().unwrap(), "--image", "cvc.png", "--out", "cvc_mask.png"], dir.path()));
    assert_eq!(out.trim(), "cvc_mask.png");
    let mask = load_mask(&dir.path().join("cvc_mask.png")).unwrap();
    assert_eq!(mask.shape(), &[1, 288, 384]);
    assert!(mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("junk.ckpt"), b"DCLM\x00").unwrap();
    std::fs::write(p.join("bad.cfg"), "patch = lots\n").unwrap();
    kvasir_dir(&p.join("data"), 2);
    let code = |args: &[&str]| cli(args, p).status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["train", "--no-such-flag"]), Some(1));
    assert_eq!(code(&["info", "--config", "bad.cfg"]), Some(1));
    assert_eq!(code(&["info", "--mask-ratio", "1.5"]), Some(1));
    assert_eq!(code(&["train", "--data", "missing"]), Some(2));
    assert_eq!(code(&["eval", "--data", "data", "--checkpoint", "junk.ckpt"]), Some(3));
    assert_eq!(code(&["eval", "--data", "data", "--checkpoint", "absent.ckpt"]), Some(3));
}

#[test]
fn synth_info_and_gradcheck_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&cli(&["synth", "--out", "s", "--count", "3", "--side", "48", "--seed", "4"], dir.path()));
    assert!(out.starts_with("3 samples"));
    assert_eq!(Manifest::open(&dir.path().join("s")).unwrap().entries.len(), 3);

    let info = ok(&cli(&["info"], dir.path()));
    let total: usize = info.lines().last().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    let listed: usize = info.lines().rev().skip(1).map(|l| l.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, listed);
    let elan = ok(&cli(&["info", "--block", "elan", "--mae", "off"], dir.path()));
    let elan_total: usize = elan.lines().last().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(elan_total < total);

    let gc = ok(&cli(&["gradcheck"], dir.path()));
    let last = gc.lines().last().unwrap();
    let (passed, rest) = last.split_once(" of ").unwrap();
    assert_eq!(passed, rest.split_whitespace().next().unwrap(), "{gc}");
}

#[test]
fn pretrain_then_train_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    kvasir_dir(&dir.path().join("data"), 4);
    std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    let out = ok(&cli(&["pretrain-mae", "--config", "small.cfg", "--data", "data", "--all-splits", "--epochs", "2", "--freeze-cnn", "--out", "pre"], dir.path()));
    assert!(out.contains("reconstruction loss"));
    assert_eq!(std::fs::read_to_string(dir.path().join("pre/pretrain.log")).unwrap().lines().count(), 2);
    ok(&cli(&["train", "--config", "small.cfg", "--data", "data", "--all-splits", "--epochs", "1", "--checkpoint", "pre/model.ckpt", "--out", "run"], dir.path()));
    // resuming a finished run with more epochs continues the count
    ok(&cli(&["train", "--data", "data", "--all-splits", "--epochs", "2", "--checkpoint", "run/model.ckpt", "--out", "run2"], dir.path()));
    let log = std::fs::read_to_string(dir.path().join("run2/train.log")).unwrap();
    assert!(log.starts_with("2\t"), "{log}");
    // network flags cannot change under a resumed run
    let r = cli(&["train", "--data", "data", "--all-splits", "--block", "elan", "--checkpoint", "run/model.ckpt", "--out", "run3"], dir.path());
    assert_eq!(r.status.code(), Some(3));
}
