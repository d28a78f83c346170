//! End-to-end command-line tests: every subcommand runs in-process against a
//! temporary directory, artifacts land where documented with the documented
//! headers, identically-seeded reruns are byte-identical, and the spawned
//! binary maps error classes to exit codes.

use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use gpdnn::cli;

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("gpdnn").chain(args.iter().copied()))
}

/// A fresh per-test scratch directory under the target tmp dir.
fn scratch(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    if d.exists() {
        std::fs::remove_dir_all(&d).unwrap();
    }
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("reading {}: {}", p.display(), e))
}

fn first_line(p: &Path) -> String {
    read(p).lines().next().unwrap_or_default().to_string()
}

/// Train a tiny half-moon model into `dir` and return the checkpoint path,
/// renamed so reports carry a recognizable model name.
fn train_moon(dir: &Path, preset: &str, name: &str, iters: &str, lr: &str, seed: &str) -> PathBuf {
    let out = dir.join(format!("train-{}", name));
    let code = run(&[
        "train",
        "--preset",
        preset,
        "--iters",
        iters,
        "--lr",
        lr,
        "--batch",
        "50",
        "--seed",
        seed,
        "--data-seed",
        "7",
        "--moons-n",
        "240",
        "--val-size",
        "40",
        "--moons-test",
        "80",
        "--val-interval",
        "50",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "training {} failed", preset);
    let ckpt = dir.join(format!("{}.ckpt", name));
    std::fs::copy(out.join("model.ckpt"), &ckpt).unwrap();
    ckpt
}

#[test]
fn round_trip_through_every_command() {
    let d = scratch("round-trip");
    let nn = train_moon(&d, "halfmoon-nn", "moon-nn", "400", "1e-2", "0");
    let gp = train_moon(&d, "halfmoon-gpdnn-rbf", "moon-gp", "200", "1e-3", "0");

    // training artifacts
    let tdir = d.join("train-moon-nn");
    assert!(tdir.join("model.ckpt").exists());
    assert_eq!(first_line(&tdir.join("trace.csv")), "iter,loss,val_error,val_ll");
    assert!(read(&tdir.join("config.txt")).contains("preset = halfmoon-nn"));

    // gradient-sign sweep sourced on one model, scored on both
    let fgsm = d.join("fgsm");
    let code = run(&[
        "attack",
        "fgsm",
        "--source",
        nn.to_str().unwrap(),
        "--eval",
        &format!("{},{}", nn.display(), gp.display()),
        "--eps",
        "0.0,0.2,0.4",
        "--n",
        "60",
        "--data-seed",
        "7",
        "--moons-n",
        "240",
        "--moons-test",
        "80",
        "--out",
        fgsm.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let sweep = read(&fgsm.join("sweep.csv"));
    assert_eq!(sweep.lines().next().unwrap(), "epsilon,model,error,ll,entropy");
    // one row per (epsilon, model), named by checkpoint file stem
    assert_eq!(sweep.lines().filter(|l| l.contains("moon-nn")).count(), 3);
    assert_eq!(sweep.lines().filter(|l| l.contains("moon-gp")).count(), 3);

    // paired minimum-distance study
    let cw = d.join("cw");
    let code = run(&[
        "attack",
        "cw",
        "--models",
        &format!("{},{}", nn.display(), gp.display()),
        "--n",
        "12",
        "--search-steps",
        "2",
        "--cw-iters",
        "30",
        "--cw-lr",
        "3e-2",
        "--threads",
        "2",
        "--data-seed",
        "7",
        "--moons-n",
        "240",
        "--moons-test",
        "80",
        "--out",
        cw.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_eq!(
        first_line(&cw.join("cw.csv")),
        "index,model,success,l2,clean_pred,adv_pred"
    );
    assert_eq!(first_line(&cw.join("paired.csv")), "index,l2_a,l2_b,diff");
    assert_eq!(first_line(&cw.join("histogram.csv")), "bin_lo,bin_hi,count");

    // transfer table, dataset-major
    let tr = d.join("transfer");
    let code = run(&[
        "transfer",
        "--models",
        &format!("{},{}", nn.display(), gp.display()),
        "--data-seed",
        "7",
        "--moons-n",
        "240",
        "--moons-test",
        "80",
        "--out",
        tr.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let table = read(&tr.join("transfer.csv"));
    assert_eq!(table.lines().next().unwrap(), "dataset,model,n,error,ll,entropy");
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "two models on one 2-d dataset: {:?}", rows);
    assert!(rows[0].contains("moon-nn") && rows[1].contains("moon-gp"));

    // probability grid over the 2-d input space
    let gr = d.join("grid");
    let code = run(&[
        "grid",
        "--model",
        gp.to_str().unwrap(),
        "--steps",
        "9",
        "--x0",
        "-2,3",
        "--x1",
        "-2,2",
        "--out",
        gr.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let grid = read(&gr.join("grid.csv"));
    assert_eq!(grid.lines().next().unwrap(), "x0,x1,p_class1,entropy");
    assert_eq!(grid.lines().count(), 1 + 9 * 9);
}

#[test]
fn reruns_are_byte_identical_and_seeds_matter() {
    let d = scratch("rerun");
    let args = |out: &Path, seed: &str| {
        vec![
            "train".to_string(),
            "--preset".into(),
            "halfmoon-nn".into(),
            "--iters".into(),
            "120".into(),
            "--lr".into(),
            "1e-2".into(),
            "--seed".into(),
            seed.into(),
            "--data-seed".into(),
            "7".into(),
            "--moons-n".into(),
            "240".into(),
            "--val-size".into(),
            "40".into(),
            "--moons-test".into(),
            "60".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let go = |out: &Path, seed: &str| {
        let a = args(out, seed);
        let v: Vec<&str> = a.iter().map(String::as_str).collect();
        assert_eq!(run(&v), 0);
    };
    let (o1, o2, o3) = (d.join("a"), d.join("b"), d.join("c"));
    go(&o1, "5");
    go(&o2, "5");
    go(&o3, "6");
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(
        bytes(&o1.join("trace.csv")),
        bytes(&o2.join("trace.csv")),
        "same seeds must reproduce the training trace byte for byte"
    );
    assert_eq!(
        bytes(&o1.join("model.ckpt")),
        bytes(&o2.join("model.ckpt")),
        "same seeds must reproduce the checkpoint byte for byte"
    );
    assert_ne!(
        bytes(&o1.join("model.ckpt")),
        bytes(&o3.join("model.ckpt")),
        "a different model seed must train a different model"
    );
}

#[test]
fn config_file_fills_in_under_explicit_flags() {
    let d = scratch("config");
    let file = d.join("settings.cfg");
    std::fs::write(
        &file,
        "# training settings\npreset = halfmoon-nn\niters = 60\nlr = 0.01\nmoons-n = 240\n\
         val-size = 40\nmoons-test = 60\ndata-seed = 7\n",
    )
    .unwrap();
    let out = d.join("out");
    let code = run(&[
        "train",
        "--config",
        file.to_str().unwrap(),
        "--iters",
        "40",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let effective = read(&out.join("config.txt"));
    assert!(effective.contains("iters = 40"), "flag must override the file:\n{}", effective);
    assert!(effective.contains("lr = 0.01"), "file must fill unset flags:\n{}", effective);
    assert!(effective.contains("preset = halfmoon-nn"), "{}", effective);
}

#[test]
fn spawned_binary_maps_error_classes_to_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_gpdnn");
    let d = scratch("exit-codes");
    let spawn = |args: &[&str]| Proc::new(bin).args(args).output().unwrap();

    // usage errors: bad invocation, unknown preset, invalid grid resolution
    assert_eq!(spawn(&[]).status.code(), Some(2));
    let out = spawn(&["train", "--preset", "no-such-preset", "--out", d.join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // data errors: a checkpoint that does not exist
    let out = spawn(&["grid", "--model", d.join("missing.ckpt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    // clean help and version exits
    assert_eq!(spawn(&["--help"]).status.code(), Some(0));
    assert_eq!(spawn(&["train", "--help"]).status.code(), Some(0));

    // a checkpoint to drive the remaining cases
    let ckpt = train_moon(&d, "halfmoon-nn", "probe", "60", "1e-2", "0");
    let out = spawn(&["grid", "--model", ckpt.to_str().unwrap(), "--steps", "1",
        "--out", d.join("g").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "a one-step grid is a usage error");

    // unused config keys warn on stderr but do not fail the run
    let file = d.join("odd.cfg");
    std::fs::write(&file, "steps = 5\nbogus-key = 1\n").unwrap();
    let out = spawn(&[
        "grid",
        "--model",
        ckpt.to_str().unwrap(),
        "--config",
        file.to_str().unwrap(),
        "--out",
        d.join("g2").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus-key"), "stderr should warn about unused keys: {}", err);
}
