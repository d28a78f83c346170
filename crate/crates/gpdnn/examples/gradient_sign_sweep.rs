//! Attack a plain conv classifier and a conv GP model with gradient-sign
//! perturbations of growing size, each model attacking itself, and watch
//! how differently they fail: the classifier's error saturates while it
//! stays confident; the GP model degrades less and its predictive entropy
//! climbs toward "I have no idea".
//!
//!     cargo run --example gradient_sign_sweep

use gpdnn::attack::dataset_bounds;
use gpdnn::data::{load_idx, split, synth};
use gpdnn::eval::epsilon_sweep;
use gpdnn::nn::{preset, Model};
use gpdnn::train::{train, TrainConfig};
use std::path::Path;

fn main() -> gpdnn::Result<()> {
    let dir = Path::new("out/examples/gradient-sign");
    std::fs::create_dir_all(dir)?;
    synth::ensure_idx_corpus(dir, 2_200, 300, 11)?;
    let full = load_idx(&dir.join(synth::TRAIN_IMAGES), &dir.join(synth::TRAIN_LABELS))?;
    let test = load_idx(&dir.join(synth::TEST_IMAGES), &dir.join(synth::TEST_LABELS))?;
    let (train_ds, val_ds) = split(&full, 200, 1.0, 11)?;

    let fit = |name: &str| -> gpdnn::Result<Model> {
        let model = Model::build(&preset(name)?, 0)?;
        let cfg = TrainConfig { iters: 120, batch: 64, val_interval: 40, ..TrainConfig::default() };
        let out = train(&model, &train_ds, &val_ds, &cfg)?;
        println!("trained {:<6} to val error {:.3}", name, out.best_val_error);
        Ok(out.model)
    };
    let nn = fit("sc-a")?;
    let gp = fit("sc-c")?;

    let eps = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0];
    let bounds = dataset_bounds(&test);
    let sweep_nn = epsilon_sweep(&[&nn], &nn, &test, &eps, bounds)?;
    let sweep_gp = epsilon_sweep(&[&gp], &gp, &test, &eps, bounds)?;

    println!();
    println!(
        "{:>5} | {:>10} {:>10} | {:>10} {:>10}",
        "eps", "nn error", "nn ent", "gp error", "gp ent"
    );
    for (a, b) in sweep_nn.rows.iter().zip(&sweep_gp.rows) {
        println!(
            "{:>5.2} | {:>10.3} {:>10.3} | {:>10.3} {:>10.3}",
            a.eps,
            a.reports[0].error,
            a.reports[0].mean_entropy,
            b.reports[0].error,
            b.reports[0].mean_entropy
        );
    }
    println!();
    println!("entropy is in nats; ln 10 = 2.303 is a shrug across ten classes");
    Ok(())
}
