//! Trains on a 3×3 region grid, then exports the attention of a few
//! validation questions as text rows and PGM graymaps.
//!
//! `cargo run --release --example heatmap_export -- [out_dir]`

use std::path::PathBuf;

use vqa_core::data::{make_synthetic, SyntheticSpec};
use vqa_core::harness::{evaluate, export_heatmap, train, Heatmap, TrainConfig, TrainInputs};

fn main() -> vqa_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("vqa_heatmaps"));

    let spec = SyntheticSpec {
        regions: 9,
        num_keys: 9,
        feature_dim: 20,
        ..SyntheticSpec::single(1, 1200)
    };
    let data = make_synthetic(&spec)?;
    let mut cfg = TrainConfig {
        seed: 1,
        epochs: 25,
        ..Default::default()
    };
    cfg.model.answers = data.answers.len();
    cfg.model.regions = 9;
    cfg.model.feature_dim = 20;
    cfg.model.attention = vqa_core::attention::AttentionConfig::a3x2(64);
    let model = train(&cfg, &TrainInputs::from_synthetic(&data), None)?.model;

    let report = evaluate(&model, &data.val[..4], &data.features, 4)?;
    for (i, row) in report.rows.iter().enumerate() {
        let truth = data.val_truth[i].rows[0];
        println!(
            "\"{}\" -> {} (score {}), queried region {truth}",
            row.question, row.answer, row.score
        );
        let hm = Heatmap::from_prediction(&row.prediction);
        for line in hm.to_text().lines() {
            println!("  {line}");
        }
        for f in export_heatmap(&hm, &out, &format!("val{i}"))? {
            println!("  wrote {}", f.display());
        }
    }
    Ok(())
}
