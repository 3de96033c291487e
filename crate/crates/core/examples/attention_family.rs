//! Runs every attention preset over the same random regions and question and
//! prints the per-head and combined weights.
//!
//! Softmax heads sum to one, sigmoid heads do not, and multi-head variants add
//! their heads up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_core::attention::{attend, pool, AttentionConfig, AttentionParams};
use vqa_core::tensor::{Act, Activation, Tensor};

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn main() -> vqa_core::Result<()> {
    let (k, dv, h, width) = (6, 8, 10, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let features = Tensor::matrix(k, dv, (0..k * dv).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let question = Tensor::vector((0..h).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let act = Act::new(Activation::LeakyRelu, 0.1);

    for name in ["A3", "A3S", "A3x2", "A3x3", "A3Sx2"] {
        let cfg = AttentionConfig::named(name, width)?;
        let params = AttentionParams::random(&cfg, dv, h, true, &mut rng);
        let out = attend(&cfg, act, &params, &features, &question)?;
        println!("{name} ({:?}, {} head(s))", cfg.normalization, cfg.heads);
        for (i, w) in out.head_weights.iter().enumerate() {
            println!("  head{i}:    {}  (sum {:.3})", fmt(w.data()), w.sum());
        }
        println!("  combined: {}  (sum {:.3})", fmt(out.alpha.data()), out.alpha.sum());
        let check = pool(&features, &out.alpha)?;
        println!("  pooled:   {}", fmt(check.data()));
    }
    Ok(())
}
