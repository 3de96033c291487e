//! Finite-difference check of the full model's gradients on a tiny random
//! instance, for a handful of seeds and every activation.
//!
//! `cargo run --release --example gradient_check -- [seeds]`

use vqa_core::harness::{run_gradcheck, GradcheckConfig};
use vqa_core::tensor::Activation;

fn main() -> vqa_core::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    for activation in [Activation::LeakyRelu, Activation::Relu, Activation::Tanh] {
        let mut worst = 0.0f64;
        let mut worst_coord = 0.0f64;
        let mut failed = Vec::new();
        for seed in 0..seeds {
            let cfg = GradcheckConfig {
                seed,
                activation,
                ..Default::default()
            };
            let s = run_gradcheck(&cfg, None)?;
            worst = worst.max(s.max_error);
            worst_coord = worst_coord.max(s.coordinate_max_error);
            if !s.passed {
                failed.push(seed);
            }
        }
        println!(
            "{:<10} seeds 0..{seeds}: worst group error {worst:.2e}, worst single coordinate {worst_coord:.2e}, failed {failed:?}",
            activation.name()
        );
    }

    let cfg = GradcheckConfig::default();
    let s = run_gradcheck(&cfg, None)?;
    println!("\nseed 0 by parameter group ({} coordinates):", s.coordinates);
    for (group, err) in &s.groups {
        println!("  {group:<16} {err:.3e}");
    }

    let broken = run_gradcheck(
        &cfg,
        Some(&|g: &mut vqa_core::autodiff::Gradients| {
            if let Some(w) = g.get_mut("cls.l1.weight") {
                w.data_mut()[0] += 1e-2;
            }
        }),
    )?;
    println!(
        "\nwith a perturbed classifier gradient: max error {:.3e}, passed = {}",
        broken.max_error, broken.passed
    );
    Ok(())
}
