//! Train the small conv GP model on synthetic digits, end to end: corpus
//! generation, validation-selected checkpointing, and a held-out report.
//! A few hundred iterations at a small batch are enough to watch the
//! evidence bound fall and the error melt; the full protocol just runs
//! longer at batch 250.
//!
//!     cargo run --example train_digits

use gpdnn::checkpoint::save_model;
use gpdnn::data::{load_idx, split, synth};
use gpdnn::eval::evaluate;
use gpdnn::nn::{preset, Model};
use gpdnn::train::{train, TrainConfig};
use std::path::Path;

fn main() -> gpdnn::Result<()> {
    let dir = Path::new("out/examples/train-digits");
    std::fs::create_dir_all(dir)?;
    synth::ensure_idx_corpus(dir, 2_200, 400, 11)?;
    let full = load_idx(&dir.join(synth::TRAIN_IMAGES), &dir.join(synth::TRAIN_LABELS))?;
    let test = load_idx(&dir.join(synth::TEST_IMAGES), &dir.join(synth::TEST_LABELS))?;
    let (train_ds, val_ds) = split(&full, 200, 1.0, 11)?;

    let spec = preset("sc-c")?;
    println!("training {} on {} digits ({} validation)", spec.name, train_ds.n(), val_ds.n());
    let model = Model::build(&spec, 0)?;
    let cfg = TrainConfig {
        iters: 150,
        batch: 64,
        val_interval: 25,
        ..TrainConfig::default()
    };
    let out = train(&model, &train_ds, &val_ds, &cfg)?;
    println!("{:>6} {:>12} {:>10} {:>9}", "iter", "loss", "val_error", "val_ll");
    for row in &out.trace {
        println!(
            "{:>6} {:>12.2} {:>10.3} {:>9.3}",
            row.iter, row.loss, row.val_error, row.val_ll
        );
    }
    println!("kept the checkpoint from iteration {} (val error {:.3})", out.best_iter, out.best_val_error);

    let rep = evaluate(&out.model, &test, 128)?;
    println!(
        "held-out: error {:.3}, mean log-likelihood {:.3}, mean entropy {:.3} nats over {} images",
        rep.error, rep.mean_ll, rep.mean_entropy, rep.n
    );
    let ckpt = dir.join("model.ckpt");
    save_model(&ckpt, &out.model)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}
