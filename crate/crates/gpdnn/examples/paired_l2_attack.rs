//! Run the minimum-distance L2 attack against a conv classifier and a conv
//! GP model on the same images, pairing the distances per image. Where both
//! attacks succeed, the GP model typically needs a visibly larger push; on
//! some images the attack fails against it outright within the search
//! budget.
//!
//!     cargo run --example paired_l2_attack

use gpdnn::attack::CwConfig;
use gpdnn::data::{load_idx, split, synth};
use gpdnn::eval::cw_study;
use gpdnn::nn::{preset, Model};
use gpdnn::train::{train, TrainConfig};
use std::path::Path;

fn main() -> gpdnn::Result<()> {
    let dir = Path::new("out/examples/paired-l2");
    std::fs::create_dir_all(dir)?;
    synth::ensure_idx_corpus(dir, 2_200, 160, 11)?;
    let full = load_idx(&dir.join(synth::TRAIN_IMAGES), &dir.join(synth::TRAIN_LABELS))?;
    let test = load_idx(&dir.join(synth::TEST_IMAGES), &dir.join(synth::TEST_LABELS))?;
    let (train_ds, val_ds) = split(&full, 200, 1.0, 11)?;

    let fit = |name: &str| -> gpdnn::Result<Model> {
        let model = Model::build(&preset(name)?, 0)?;
        let cfg = TrainConfig { iters: 120, batch: 64, val_interval: 40, ..TrainConfig::default() };
        Ok(train(&model, &train_ds, &val_ds, &cfg)?.model)
    };
    let nn = fit("sc-a")?;
    let gp = fit("sc-c")?;

    // a light search budget keeps this example quick; the experiment
    // protocols crank these up
    let pool = test.take(24)?;
    let cfg = CwConfig { search_steps: 4, c0: 1e-2, iters: 120, lr: 2e-2, ..CwConfig::default() };
    let study = cw_study(&nn, &gp, &pool, &cfg, 1)?;

    println!(
        "{} of {} pool images were classified correctly by both models and attacked",
        study.kept,
        pool.n()
    );
    println!("attack failures: classifier {}, gp model {}", study.fail_a, study.fail_b);
    println!();
    println!("{:>6} {:>12} {:>12} {:>10}", "image", "l2 vs nn", "l2 vs gp", "diff");
    let mut pair = 0usize;
    for (i, (ra, rb)) in study.results_a.iter().zip(&study.results_b).enumerate() {
        let fmt = |r: &gpdnn::attack::AttackResult| {
            if r.success {
                format!("{:.3}", r.l2)
            } else {
                "failed".to_string()
            }
        };
        let diff = if ra.success && rb.success {
            pair += 1;
            format!("{:+.3}", rb.l2 - ra.l2)
        } else {
            String::new()
        };
        println!("{:>6} {:>12} {:>12} {:>10}", i, fmt(ra), fmt(rb), diff);
    }
    println!();
    println!(
        "mean paired difference over {} pairs: {:+.3} (positive: the gp needs more)",
        pair, study.mean_paired_diff
    );
    Ok(())
}
