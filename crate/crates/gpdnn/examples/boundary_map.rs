//! Train a plain classifier and a GP-headed model on the two half moons,
//! then chart max-probability over the plane. The classifier extrapolates
//! with near-total confidence; the GP model's confidence collapses toward
//! a coin flip away from the data.
//!
//!     cargo run --example boundary_map

use gpdnn::data::{half_moons, split};
use gpdnn::eval::boundary_grid;
use gpdnn::nn::{preset, Model};
use gpdnn::train::{train, TrainConfig};

fn fit(name: &str, iters: usize, lr: f64) -> gpdnn::Result<Model> {
    let pool = half_moons(600, 0.1, 11)?;
    let (train_ds, val_ds) = split(&pool, 100, 1.0, 11)?;
    let model = Model::build(&preset(name)?, 0)?;
    let cfg = TrainConfig { iters, batch: 50, lr, val_interval: 200, ..TrainConfig::default() };
    let out = train(&model, &train_ds, &val_ds, &cfg)?;
    println!(
        "{:<20} best val error {:.3} at iteration {}",
        name, out.best_val_error, out.best_iter
    );
    Ok(out.model)
}

fn chart(model: &Model) -> gpdnn::Result<()> {
    // one character per cell: how sure the model is, wherever it is
    let (steps, x0r, x1r) = (58, (-4.0, 5.0), (-3.5, 3.5));
    let rows = boundary_grid(model, x0r, x1r, steps)?;
    let glyph = |p1: f64| {
        let conf = p1.max(1.0 - p1);
        let side = if p1 >= 0.5 { ['+', 'x', 'X'] } else { ['-', 'o', 'O'] };
        if conf < 0.6 {
            '.'
        } else if conf < 0.8 {
            side[0]
        } else if conf < 0.95 {
            side[1]
        } else {
            side[2]
        }
    };
    // rows come back x0-major; print x1 down the screen
    for j in (0..steps).rev() {
        let line: String = (0..steps).map(|i| glyph(rows[i * steps + j].2)).collect();
        println!("  {}", line);
    }
    println!("  X/O: confidence above 0.95   x/o: above 0.8   +/-: above 0.6   .: near chance");
    Ok(())
}

fn main() -> gpdnn::Result<()> {
    println!("half-moon classifier (trained feature map, softmax):");
    let nn = fit("halfmoon-nn", 3_000, 3e-3)?;
    chart(&nn)?;
    println!();
    println!("half-moon GP model (same feature map, GP head, robustmax):");
    let gp = fit("halfmoon-gpdnn-rbf", 1_500, 1e-3)?;
    chart(&gp)?;
    println!();
    println!("the data lives roughly in [-1.5, 2.5] x [-1, 1.5]; everything else is");
    println!("extrapolation, where only the GP model admits it is guessing");
    Ok(())
}
