//! Generate the synthetic digit corpus in its two on-disk formats — IDX
//! files (big-endian, magic-numbered) and a Semeion-style text file — then
//! load both back and print what arrived. The same files back every digit
//! command when no real data directory is supplied.
//!
//!     cargo run --example make_corpus

use gpdnn::data::{load_idx, load_semeion, synth};
use std::path::Path;

fn main() -> gpdnn::Result<()> {
    let dir = Path::new("out/examples/corpus");
    std::fs::create_dir_all(dir)?;
    synth::ensure_idx_corpus(dir, 1_200, 300, 11)?;
    let semeion_path = dir.join("semeion.data");
    synth::ensure_semeion_file(&semeion_path, 300, 11)?;

    let train = load_idx(&dir.join(synth::TRAIN_IMAGES), &dir.join(synth::TRAIN_LABELS))?;
    let test = load_idx(&dir.join(synth::TEST_IMAGES), &dir.join(synth::TEST_LABELS))?;
    let sem = load_semeion(&semeion_path)?;

    for ds in [&train, &test, &sem] {
        let mut counts = vec![0usize; ds.classes];
        for &y in &ds.y {
            counts[y] += 1;
        }
        let lo = ds.x.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ds.x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "{:<24} {:>5} items of {} values, per class {:?}, pixel range [{:.0}, {:.0}]",
            ds.name,
            ds.n(),
            ds.item_numel(),
            counts,
            lo,
            hi
        );
    }

    // a low-tech look at one image from each stream
    let show = |name: &str, px: &[f64], w: usize| {
        println!("{}:", name);
        for r in 0..w {
            let line: String = (0..w)
                .map(|c| match px[r * w + c] {
                    v if v > 0.5 => '#',
                    v if v > -0.5 => '+',
                    _ => ' ',
                })
                .collect();
            println!("  {}", line);
        }
    };
    let side = (train.item_numel() as f64).sqrt() as usize;
    show(
        &format!("train[0] (label {})", train.y[0]),
        &train.x.data()[..train.item_numel()],
        side,
    );
    show(
        &format!("semeion[1] (label {})", sem.y[1]),
        &sem.x.data()[sem.item_numel()..2 * sem.item_numel()],
        (sem.item_numel() as f64).sqrt() as usize,
    );
    println!("files live under {}", dir.display());
    Ok(())
}
