//! Drives the built `cdc` binary end to end on a tiny corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cdc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdc")).args(args).current_dir(cwd).env_remove("CDC_CONFIG").output().expect("spawn cdc")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = cdc(args, cwd);
    assert!(out.status.success(), "cdc {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn train_compress_decompress_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let sum = ok(&["dataset-gen", "--n", "4", "--size", "64", "--seed", "3", "-o", "corpus"], d);
    assert_eq!(sum.trim().len(), 64);
    assert_eq!(ok(&["-q", "dataset-gen", "--n", "4", "--size", "64", "--seed", "3", "-o", "again"], d), sum);

    fs::write(d.join("cdc.toml"), "[train]\nbatch_size = 2\ncheckpoint_every = 0\n").unwrap();
    ok(&["--config", "cdc.toml", "train", "--data", "corpus", "-o", "run", "--steps", "2"], d);
    assert!(d.join("run/final.ckpt").exists());
    assert!(d.join("run/config.toml").exists());
    assert_eq!(fs::read_to_string(d.join("run/train_log.jsonl")).unwrap().lines().count(), 1);

    let img = "corpus/synthetic_00000.png";
    ok(&["compress", img, "--model", "run/final.ckpt", "-o", "a.cdc"], d);
    ok(&["decompress", "a.cdc", "--model", "run/final.ckpt", "-o", "a.png", "--steps", "3", "--dump-steps", "0,1"], d);
    let dec = image::open(d.join("a.png")).unwrap();
    assert_eq!((dec.width(), dec.height()), (64, 64));
    assert!(d.join("a.step000.png").exists() && d.join("a.step100.png").exists());

    // Decoding is deterministic at γ = 0.
    ok(&["decompress", "a.cdc", "--model", "run/final.ckpt", "-o", "b.png", "--steps", "3"], d);
    assert_eq!(fs::read(d.join("a.png")).unwrap(), fs::read(d.join("b.png")).unwrap());

    ok(&["eval", "--model", "run/final.ckpt", "--originals", "corpus", "--steps", "2", "--grid", "gamma=0,0.6,0.8,1", "-o", "eval", "--jobs", "2"], d);
    let csv = fs::read_to_string(d.join("eval/rd.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).filter(|l| !l.starts_with("mean")).collect();
    assert_eq!(rows.len(), 4 * 4, "{csv}");
    assert!(csv.starts_with("image_id,bpp,psnr_db,ssim,ms_ssim,lpips,n_test,gamma,model_id,rho_preset"));
    assert!(d.join("eval/rd.json").exists());
    assert_eq!(fs::read_dir(d.join("eval/bitstreams")).unwrap().count(), 4);

    ok(&["plot", "eval/rd.csv", "-o", "rd.svg"], d);
    assert!(fs::read_to_string(d.join("rd.svg")).unwrap().contains("<svg"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(cdc(&["--help"], d).status.code(), Some(0));
    // Bad invocations exit 1.
    assert_eq!(cdc(&["compress"], d).status.code(), Some(1));
    assert_eq!(cdc(&["frobnicate"], d).status.code(), Some(1));
    fs::write(d.join("bad.toml"), "[trian]\nx = 1\n").unwrap();
    assert_eq!(cdc(&["--config", "bad.toml", "dataset-gen", "-o", "c"], d).status.code(), Some(1));
    // Runtime failures exit 2.
    let out = cdc(&["compress", "missing.png", "--model", "missing.ckpt", "-o", "x.cdc"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
    assert_eq!(cdc(&["plot", "nothing.csv", "-o", "p.svg"], d).status.code(), Some(2));
}
