//! Greedy per-axis search over a small space on synthetic data. Each axis is
//! tuned in turn with the others held at their best value so far.
//!
//! `cargo run --release --example greedy_search`

use vqa_core::data::{make_synthetic, SyntheticSpec};
use vqa_core::harness::{greedy_search, train, SearchAxis, SearchSpace, TrainConfig, TrainInputs};

fn main() -> vqa_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let data = make_synthetic(&SyntheticSpec::single(3, 600))?;
    let inputs = TrainInputs::from_synthetic(&data);
    let mut base = TrainConfig {
        seed: 3,
        epochs: 15,
        ..Default::default()
    };
    base.model.answers = data.answers.len();
    base.model.hidden = 32;
    base.model.fusion_width = 64;
    base.model.classifier_width = 64;
    base.model.attention.width = 64;

    let axis = |field: &str, values: Vec<toml::Value>| SearchAxis {
        field: field.into(),
        candidates: values,
    };
    let space = SearchSpace {
        axes: vec![
            axis(
                "model.activation",
                vec!["relu".into(), "leaky_relu".into(), "tanh".into()],
            ),
            axis("optimizer.lr", vec![1e-3.into(), 5e-3.into()]),
            axis("model.weight_norm", vec![true.into(), false.into()]),
        ],
        budget: None,
    };

    let outcome = greedy_search(&base, &space, |cfg| {
        let r = train(cfg, &inputs, None)?.record;
        Ok((r.best_val_acc, r.best_epoch))
    })?;
    for t in &outcome.trials {
        println!(
            "{:<18} {:<12} seed {:>20}  val {:.4}",
            t.axis,
            t.candidate.to_string(),
            t.seed,
            t.rank_score()
        );
    }
    println!(
        "\nbest: activation {}, lr {}, weight_norm {} (val {:.4}, {} runs)",
        outcome.best.model.activation.name(),
        outcome.best.optimizer.lr,
        outcome.best.model.weight_norm,
        outcome.best_score,
        outcome.trials.len()
    );
    Ok(())
}
