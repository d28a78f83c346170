//! Take a trained softmax classifier, cut off its head, and graft a GP with
//! a robustmax likelihood onto the frozen-in-place feature map — then fine
//! tune end to end. The feature map keeps its accuracy; the head swap is
//! what buys calibrated uncertainty away from the data.
//!
//!     cargo run --example head_switch

use gpdnn::data::{half_moons, split};
use gpdnn::eval::{boundary_grid, evaluate};
use gpdnn::gp::KernelKind;
use gpdnn::nn::{preset, Model};
use gpdnn::train::{switch_head, train, TrainConfig};

fn far_field_confidence(model: &Model) -> gpdnn::Result<f64> {
    // mean max-probability over the rim of a generous grid, far from the moons
    let rows = boundary_grid(model, (-6.0, 7.0), (-6.0, 6.0), 41)?;
    let far: Vec<f64> = rows
        .iter()
        .filter(|(x0, x1, _, _)| x0.abs().max(x1.abs()) > 4.0)
        .map(|(_, _, p1, _)| p1.max(1.0 - p1))
        .collect();
    Ok(far.iter().sum::<f64>() / far.len() as f64)
}

fn main() -> gpdnn::Result<()> {
    let pool = half_moons(600, 0.1, 11)?;
    let (train_ds, val_ds) = split(&pool, 100, 1.0, 11)?;

    // stage 1: an ordinary softmax classifier
    let model = Model::build(&preset("halfmoon-nn")?, 0)?;
    let cfg = TrainConfig { iters: 3_000, batch: 50, lr: 3e-3, val_interval: 500, ..TrainConfig::default() };
    let nn = train(&model, &train_ds, &val_ds, &cfg)?.model;
    let rep = evaluate(&nn, &train_ds, 200)?;
    println!(
        "softmax classifier: train error {:.3}, far-field confidence {:.3}",
        rep.error,
        far_field_confidence(&nn)?
    );

    // stage 2: same feature map, GP head initialized from training features
    let switched = switch_head(&nn, 20, KernelKind::Rbf, &train_ds.x, 1)?;
    let rep = evaluate(&switched, &train_ds, 200)?;
    println!(
        "after the head switch (no tuning): train error {:.3}, far-field confidence {:.3}",
        rep.error,
        far_field_confidence(&switched)?
    );

    // stage 3: brief end-to-end fine tuning of extractor + GP together
    let cfg = TrainConfig { iters: 400, batch: 50, val_interval: 100, ..TrainConfig::default() };
    let tuned = train(&switched, &train_ds, &val_ds, &cfg)?.model;
    let rep = evaluate(&tuned, &train_ds, 200)?;
    println!(
        "after fine tuning: train error {:.3}, far-field confidence {:.3}",
        rep.error,
        far_field_confidence(&tuned)?
    );
    println!();
    println!("far-field confidence near 1.0 means the model extrapolates boldly;");
    println!("near 0.5 it knows the far field is anybody's guess");
    Ok(())
}
