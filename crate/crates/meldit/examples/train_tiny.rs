//! Trains the tiny preset on a 256-sample synthetic corpus and prints the
//! loss trajectory. Usage:
//!
//! ```text
//! cargo run --release --example train_tiny -- [iterations] [out_dir]
//! ```
//!
//! Defaults to 2000 iterations with no checkpoint output. With an output
//! directory, the final model checkpoint, resumable state, and loss CSV
//! land there.

use std::path::PathBuf;
use std::time::Instant;

use meldit::model::ModelConfig;
use meldit::score::{build_corpus, CorpusParams, TOY_GEOMETRY};
use meldit::trainer::{train, write_loss_csv, TrainConfig};

fn main() -> meldit::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args
        .next()
        .map(|s| s.parse().expect("iterations must be a number"))
        .unwrap_or(2000);
    let out_dir: Option<PathBuf> = args.next().map(PathBuf::from);

    let corpus_params = CorpusParams {
        seed: 0,
        n_groups: 8,
        melodies_per_group: 5,
        variants_per_melody: 10,
        holdout_fraction: 0.2,
        max_chars: 3,
        phoneme_vocab: 8,
        geometry: TOY_GEOMETRY,
    };
    let (train_half, test_half) = build_corpus(&corpus_params)?;
    println!(
        "corpus: {} train / {} held-out samples, {} melodies",
        train_half.samples.len(),
        test_half.samples.len(),
        train_half.melody_bank.len()
    );

    let cfg = ModelConfig::preset("tiny")?;
    let tcfg = TrainConfig {
        iterations,
        seed: 0,
        ..TrainConfig::default()
    };

    let started = Instant::now();
    let state = train(&cfg, &train_half, &tcfg, out_dir.as_deref())?;
    let elapsed = started.elapsed().as_secs_f64();

    let window = 100.min(state.loss_history.len().max(1));
    let mean = |pts: &[meldit::trainer::LossPoint]| {
        pts.iter().map(|p| p.loss).sum::<f64>() / pts.len().max(1) as f64
    };
    let first = mean(&state.loss_history[..window]);
    let last = mean(&state.loss_history[state.loss_history.len().saturating_sub(window)..]);
    println!(
        "{} steps in {elapsed:.1} s ({:.2} s/step)",
        state.step,
        elapsed / state.step.max(1) as f64
    );
    println!("first-{window} mean loss {first:.4}, final-{window} mean loss {last:.4}");

    if let Some(dir) = out_dir {
        write_loss_csv(&dir.join("loss.csv"), &state.loss_history)?;
        println!("checkpoints and loss.csv written to {}", dir.display());
    }
    Ok(())
}
