//! Trains the single-head model on the synthetic needle task and compares the
//! result with the best accuracy reachable without looking at the image.
//!
//! `cargo run --release --example train_synthetic -- [n] [epochs] [seed]`

use std::time::Instant;

use vqa_core::attention::AttentionConfig;
use vqa_core::data::{make_synthetic, question_only_bayes_accuracy, SyntheticSpec};
use vqa_core::harness::{train, TrainConfig, TrainInputs};

fn main() -> vqa_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(2500) as usize;
    let epochs = args.get(1).copied().unwrap_or(60) as usize;
    let seed = args.get(2).copied().unwrap_or(0);

    let data = make_synthetic(&SyntheticSpec::single(seed, n))?;
    let mut cfg = TrainConfig {
        seed,
        epochs,
        patience: 15,
        ..Default::default()
    };
    cfg.model.answers = data.answers.len();
    cfg.model.attention = AttentionConfig::a3(cfg.model.attention.width);

    let start = Instant::now();
    let out = train(&cfg, &TrainInputs::from_synthetic(&data), None)?;
    println!("epoch  loss      train   val");
    for m in out.record.epochs.iter().step_by(5) {
        println!(
            "{:>5}  {:.5}  {:.4}  {:.4}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.val_acc.unwrap_or(f64::NAN)
        );
    }
    println!(
        "best val accuracy {:.4} at epoch {} ({:.1}s)",
        out.record.best_val_acc,
        out.record.best_epoch,
        start.elapsed().as_secs_f64()
    );
    println!(
        "question-only ceiling on val: {:.4}",
        question_only_bayes_accuracy(&data.val, data.answers.len())
    );
    Ok(())
}
