//! Compares one softmax head with two on the two-region task, where the answer
//! depends on two regions at once and a single softmax tends to commit to one.
//!
//! `cargo run --release --example dual_attention -- [seeds] [epochs]`

use vqa_core::attention::AttentionConfig;
use vqa_core::data::{make_synthetic, SyntheticSpec};
use vqa_core::harness::{train, TrainConfig, TrainInputs};

fn main() -> vqa_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1).filter_map(|a| a.parse::<usize>().ok());
    let seeds = args.next().unwrap_or(3) as u64;
    let epochs = args.next().unwrap_or(40);

    println!("seed   A3      A3x2    one-row ceiling");
    let mut totals = [0.0, 0.0];
    for seed in 0..seeds {
        let data = make_synthetic(&SyntheticSpec::dual(seed, 1500))?;
        let ceiling = data.one_row_bayes_accuracy(&data.val)?;
        let inputs = TrainInputs::from_synthetic(&data);
        let mut accs = [0.0; 2];
        for (slot, att) in [AttentionConfig::a3(64), AttentionConfig::a3x2(64)]
            .into_iter()
            .enumerate()
        {
            let mut cfg = TrainConfig {
                seed,
                epochs,
                patience: 15,
                ..Default::default()
            };
            cfg.model.answers = data.answers.len();
            cfg.model.fusion_width = 64;
            cfg.model.classifier_width = 64;
            cfg.model.attention = att;
            accs[slot] = train(&cfg, &inputs, None)?.record.best_val_acc;
            totals[slot] += accs[slot];
        }
        println!("{seed:>4}   {:.4}  {:.4}  {ceiling:.4}", accs[0], accs[1]);
    }
    let n = seeds as f64;
    println!("mean   {:.4}  {:.4}", totals[0] / n, totals[1] / n);
    Ok(())
}
