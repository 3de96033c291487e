//! Question-guided attention over image region features.
//!
//! Each head scores region `i` as `w · f_c(f_a(v_i) ∘ f_b(q)) + b`, where every
//! `f_x` is a fully connected layer followed by a non-linearity. Scores are
//! normalized per head (softmax or sigmoid) and the per-head weights are summed
//! without renormalization. The summed weights pool the region features.
//!
//! Parameter layout under a prefix `p`, for head `h`:
//! `p.head{h}.fa`, `p.head{h}.fb`, optional `p.head{h}.fc`, and the scalar
//! score layer `p.head{h}.score` (`weight [1×W]`, `bias [1]`). Heads never share
//! parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::layers::{dense, dense_act, init_dense};
use crate::tensor::{self, Act, Activation, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Softmax,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub normalization: Normalization,
    /// Output width of `f_a`, `f_b` and `f_c`.
    pub width: usize,
    pub use_fc: bool,
    /// Divide the summed weights by the head count. Off by default.
    #[serde(default)]
    pub renormalize: bool,
    /// Overrides the model-wide activation for the attention layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

impl AttentionConfig {
    fn preset(heads: usize, normalization: Normalization, width: usize) -> Self {
        AttentionConfig {
            heads,
            normalization,
            width,
            use_fc: true,
            renormalize: false,
            activation: None,
        }
    }

    pub fn a3(width: usize) -> Self {
        Self::preset(1, Normalization::Softmax, width)
    }

    pub fn a3s(width: usize) -> Self {
        Self::preset(1, Normalization::Sigmoid, width)
    }

    pub fn a3x2(width: usize) -> Self {
        Self::preset(2, Normalization::Softmax, width)
    }

    pub fn a3x3(width: usize) -> Self {
        Self::preset(3, Normalization::Softmax, width)
    }

    pub fn a3sx2(width: usize) -> Self {
        Self::preset(2, Normalization::Sigmoid, width)
    }

    /// Looks up a named preset: `A3`, `A3S`, `A3x2`, `A3x3`, `A3Sx2`.
    pub fn named(name: &str, width: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "a3" => Ok(Self::a3(width)),
            "a3s" => Ok(Self::a3s(width)),
            "a3x2" => Ok(Self::a3x2(width)),
            "a3x3" => Ok(Self::a3x3(width)),
            "a3sx2" => Ok(Self::a3sx2(width)),
            _ => Err(Error::Config(format!("unknown attention preset `{name}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        if self.width == 0 {
            return Err(Error::Config("attention width must be >= 1".into()));
        }
        Ok(())
    }

    /// The activation used by the attention layers, given the model default.
    pub fn act(&self, model: Act) -> Act {
        match self.activation {
            Some(kind) => Act::new(kind, model.slope),
            None => model,
        }
    }
}

/// Result of attending: everything needed for heatmaps plus the pooled vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// Raw scores, one `[K]` row per head.
    pub scores: Vec<Tensor>,
    /// Normalized weights, one `[K]` row per head.
    pub head_weights: Vec<Tensor>,
    /// Combined weights `[K]`.
    pub alpha: Tensor,
    /// Pooled feature vector `[Dv]`.
    pub pooled: Tensor,
}

/// Attention parameters for every head, stored by name.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub store: ParamStore,
    pub prefix: String,
}

pub fn head_prefix(prefix: &str, head: usize) -> String {
    format!("{prefix}.head{head}")
}

/// Initializes every head of `cfg` into `store` under `prefix`.
pub fn init_attention<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    feature_dim: usize,
    question_dim: usize,
    weight_norm: bool,
    rng: &mut R,
) {
    for h in 0..cfg.heads {
        let hp = head_prefix(prefix, h);
        init_dense(store, &format!("{hp}.fa"), feature_dim, cfg.width, weight_norm, rng);
        init_dense(store, &format!("{hp}.fb"), question_dim, cfg.width, weight_norm, rng);
        if cfg.use_fc {
            init_dense(store, &format!("{hp}.fc"), cfg.width, cfg.width, weight_norm, rng);
        }
        init_dense(store, &format!("{hp}.score"), cfg.width, 1, weight_norm, rng);
    }
}

impl AttentionParams {
    pub fn random<R: Rng + ?Sized>(
        cfg: &AttentionConfig,
        feature_dim: usize,
        question_dim: usize,
        weight_norm: bool,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        init_attention(&mut store, "att", cfg, feature_dim, question_dim, weight_norm, rng);
        AttentionParams {
            store,
            prefix: "att".into(),
        }
    }
}

/// Graph nodes produced by one attention block over a batch.
#[derive(Clone, Debug)]
pub struct AttentionNodes {
    /// `[B×K]` per head.
    pub scores: Vec<NodeId>,
    /// `[B×K]` per head.
    pub head_weights: Vec<NodeId>,
    /// `[B×K]`.
    pub alpha: NodeId,
    /// `[B×Dv]`.
    pub pooled: NodeId,
}

/// Scores of one head for a batch: `features [(B·K)×Dv]`, `question [B×H]` → `[B×K]`.
#[allow(clippy::too_many_arguments)]
pub fn head_scores_node(
    g: &mut Graph,
    store: &ParamStore,
    head_prefix: &str,
    cfg: &AttentionConfig,
    act: Act,
    features: NodeId,
    question: NodeId,
    regions: usize,
) -> Result<NodeId> {
    if regions == 0 {
        return Err(Error::Data("attention over zero regions".into()));
    }
    let fa = dense_act(g, store, &format!("{head_prefix}.fa"), features, act.kind, act.slope)?;
    let fb = dense_act(g, store, &format!("{head_prefix}.fb"), question, act.kind, act.slope)?;
    let mut joint = g.broadcast_mul(fa, fb, regions)?;
    if cfg.use_fc {
        joint = dense_act(g, store, &format!("{head_prefix}.fc"), joint, act.kind, act.slope)?;
    }
    let s = dense(g, store, &format!("{head_prefix}.score"), joint)?;
    let batch = g.value(question).rows();
    g.reshape(s, &[batch, regions])
}

pub fn normalize_node(g: &mut Graph, scores: NodeId, kind: Normalization) -> Result<NodeId> {
    match kind {
        Normalization::Softmax => g.softmax_rows(scores),
        Normalization::Sigmoid => Ok(g.sigmoid(scores)),
    }
}

pub fn combine_node(g: &mut Graph, weights: &[NodeId], renormalize: bool) -> Result<NodeId> {
    let (&first, rest) = weights
        .split_first()
        .ok_or_else(|| Error::Config("combine needs at least one head".into()))?;
    let mut acc = first;
    for &w in rest {
        acc = g.add(acc, w)?;
    }
    if renormalize && weights.len() > 1 {
        acc = g.scale(acc, 1.0 / weights.len() as f64);
    }
    Ok(acc)
}

/// Full attention block on a batch.
#[allow(clippy::too_many_arguments)]
pub fn attend_nodes(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    act: Act,
    features: NodeId,
    question: NodeId,
    regions: usize,
) -> Result<AttentionNodes> {
    cfg.validate()?;
    let mut scores = Vec::with_capacity(cfg.heads);
    let mut head_weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let s = head_scores_node(g, store, &head_prefix(prefix, h), cfg, act, features, question, regions)?;
        scores.push(s);
        head_weights.push(normalize_node(g, s, cfg.normalization)?);
    }
    let alpha = combine_node(g, &head_weights, cfg.renormalize)?;
    let pooled = g.weighted_pool(alpha, features)?;
    Ok(AttentionNodes {
        scores,
        head_weights,
        alpha,
        pooled,
    })
}

fn single_inputs(g: &mut Graph, features: &Tensor, question: &Tensor) -> Result<(NodeId, NodeId, usize)> {
    if features.rank() != 2 {
        return Err(Error::dim("attention features", features.shape(), &[0, 0]));
    }
    let k = features.rows();
    if k == 0 {
        return Err(Error::Data("attention over zero regions".into()));
    }
    let v = g.constant(features.clone());
    let q = g.constant(question.reshape(&[1, question.len()])?);
    Ok((v, q, k))
}

fn row_of(g: &Graph, id: NodeId) -> Tensor {
    Tensor::vector(g.value(id).data().to_vec())
}

/// Scores `[K]` of head `head` for one example (`features [K×Dv]`, `question [H]`).
pub fn head_scores(
    cfg: &AttentionConfig,
    act: Act,
    params: &AttentionParams,
    head: usize,
    features: &Tensor,
    question: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (v, q, k) = single_inputs(&mut g, features, question)?;
    let s = head_scores_node(
        &mut g,
        &params.store,
        &head_prefix(&params.prefix, head),
        cfg,
        act,
        v,
        q,
        k,
    )?;
    Ok(row_of(&g, s))
}

/// Softmax yields a simplex; sigmoid yields independent weights in (0, 1).
pub fn normalize(scores: &Tensor, kind: Normalization) -> Result<Tensor> {
    match kind {
        Normalization::Softmax => tensor::softmax(scores),
        Normalization::Sigmoid => Ok(tensor::sigmoid(scores)),
    }
}

/// Elementwise sum of per-head weights.
pub fn combine_heads(weights: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = weights
        .split_first()
        .ok_or_else(|| Error::Config("combine needs at least one head".into()))?;
    let mut acc = first.clone();
    for w in rest {
        acc = acc.zip_map(w, "combine_heads", |a, b| a + b)?;
    }
    Ok(acc)
}

/// `Σ_i alpha_i · features_i`.
pub fn pool(features: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 || features.rows() != alpha.len() {
        return Err(Error::dim("pool", features.shape(), alpha.shape()));
    }
    let mut g = Graph::new();
    let a = g.constant(alpha.reshape(&[1, alpha.len()])?);
    let v = g.constant(features.clone());
    let p = g.weighted_pool(a, v)?;
    Ok(row_of(&g, p))
}

/// Attention for one example.
pub fn attend(
    cfg: &AttentionConfig,
    act: Act,
    params: &AttentionParams,
    features: &Tensor,
    question: &Tensor,
) -> Result<AttentionOutput> {
    let mut g = Graph::new();
    let (v, q, k) = single_inputs(&mut g, features, question)?;
    let nodes = attend_nodes(&mut g, &params.store, &params.prefix, cfg, act, v, q, k)?;
    Ok(AttentionOutput {
        scores: nodes.scores.iter().map(|&s| row_of(&g, s)).collect(),
        head_weights: nodes.head_weights.iter().map(|&w| row_of(&g, w)).collect(),
        alpha: row_of(&g, nodes.alpha),
        pooled: row_of(&g, nodes.pooled),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LEAKY: Act = Act {
        kind: Activation::LeakyRelu,
        slope: 0.1,
    };

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn randomize(params: &mut AttentionParams, rng: &mut ChaCha8Rng) {
        for (_, t) in params.store.iter_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }

    fn dense_oracle(store: &ParamStore, prefix: &str, x: &[f64], act: Act) -> Vec<f64> {
        let w = store.get(&format!("{prefix}.weight")).unwrap();
        let b = store.get(&format!("{prefix}.bias")).unwrap();
        let gain = store.get(&format!("{prefix}.gain")).ok();
        let (dout, din) = (w.rows(), w.cols());
        (0..dout)
            .map(|o| {
                let row = &w.data()[o * din..(o + 1) * din];
                let scale = match gain {
                    Some(gn) => gn.data()[o] / row.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    None => 1.0,
                };
                let mut s = 0.0;
                for i in 0..din {
                    s += row[i] * scale * x[i];
                }
                act.kind.apply(s + b.data()[o], act.slope)
            })
            .collect()
    }

    /// Scalar evaluation of one head's score for every region.
    fn scores_oracle(p: &AttentionParams, cfg: &AttentionConfig, head: usize, v: &Tensor, q: &Tensor) -> Vec<f64> {
        let hp = head_prefix(&p.prefix, head);
        let fb = dense_oracle(&p.store, &format!("{hp}.fb"), q.data(), LEAKY);
        (0..v.rows())
            .map(|i| {
                let fa = dense_oracle(&p.store, &format!("{hp}.fa"), v.row(i), LEAKY);
                let mut joint: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| a * b).collect();
                if cfg.use_fc {
                    joint = dense_oracle(&p.store, &format!("{hp}.fc"), &joint, LEAKY);
                }
                dense_oracle(
                    &p.store,
                    &format!("{hp}.score"),
                    &joint,
                    Act::new(Activation::Linear, 0.0),
                )[0]
            })
            .collect()
    }

    #[test]
    fn constant_head_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AttentionConfig::a3(5);
        let mut p = AttentionParams::random(&cfg, 3, 2, false, &mut rng);
        p.store.insert("att.head0.score.weight", Tensor::zeros(&[1, 5]));
        p.store.insert("att.head0.score.bias", Tensor::vector(vec![3.0]));
        let s = head_scores(&cfg, LEAKY, &p, 0, &random(&[4, 3], &mut rng), &random(&[2], &mut rng)).unwrap();
        assert_eq!(s.data(), &[3.0; 4]);
    }

    #[test]
    fn annihilated_image_projection_gives_equal_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = AttentionConfig::a3(5);
        let mut p = AttentionParams::random(&cfg, 3, 2, false, &mut rng);
        randomize(&mut p, &mut rng);
        p.store.insert("att.head0.fa.weight", Tensor::zeros(&[5, 3]));
        p.store.insert("att.head0.fa.bias", Tensor::zeros(&[5]));
        let s = head_scores(&cfg, LEAKY, &p, 0, &random(&[4, 3], &mut rng), &random(&[2], &mut rng)).unwrap();
        assert!(s.data().iter().all(|&x| x == s.data()[0]));

        let mut nofc = cfg.clone();
        nofc.use_fc = false;
        let mut p2 = AttentionParams::random(&nofc, 3, 2, false, &mut rng);
        randomize(&mut p2, &mut rng);
        p2.store.insert("att.head0.fa.weight", Tensor::zeros(&[5, 3]));
        p2.store.insert("att.head0.fa.bias", Tensor::zeros(&[5]));
        let b = p2.store.get("att.head0.score.bias").unwrap().data()[0];
        let s = head_scores(
            &nofc,
            LEAKY,
            &p2,
            0,
            &random(&[4, 3], &mut rng),
            &random(&[2], &mut rng),
        )
        .unwrap();
        assert!(s.data().iter().all(|&x| x == b));
    }

    #[test]
    fn head_scores_match_scalar_oracle() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (cfg, wn) in [(AttentionConfig::a3(5), false), (AttentionConfig::a3x2(5), true)] {
                let mut p = AttentionParams::random(&cfg, 3, 2, wn, &mut rng);
                randomize(&mut p, &mut rng);
                let v = random(&[4, 3], &mut rng);
                let q = random(&[2], &mut rng);
                for h in 0..cfg.heads {
                    let got = head_scores(&cfg, LEAKY, &p, h, &v, &q).unwrap();
                    for (a, b) in got.data().iter().zip(scores_oracle(&p, &cfg, h, &v, &q)) {
                        assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn empty_regions_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttentionConfig::a3(4);
        let p = AttentionParams::random(&cfg, 3, 2, false, &mut rng);
        let err = head_scores(&cfg, LEAKY, &p, 0, &Tensor::zeros(&[0, 3]), &Tensor::zeros(&[2])).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn normalize_examples() {
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(normalize(&z, Normalization::Softmax).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(normalize(&z, Normalization::Sigmoid).unwrap().data(), &[0.5, 0.5]);
        let s = normalize(&Tensor::vector(vec![10.0, 10.0]), Normalization::Sigmoid).unwrap();
        // 1 / (1 + e^-10)
        for v in s.data() {
            assert!((v - 0.9999546021312976).abs() < 1e-15);
        }
        assert!((s.sum() - 2.0).abs() < 1e-4);
        let s = normalize(&Tensor::vector(vec![-1.0, 3.0]), Normalization::Sigmoid).unwrap();
        assert!((s.sum() - 1.0).abs() > 0.1);
        assert_eq!(s.data()[1], sigmoid_scalar(3.0));
    }

    #[test]
    fn combine_examples() {
        let a = Tensor::vector(vec![0.2, 0.3, 0.5]);
        assert_eq!(combine_heads(std::slice::from_ref(&a)).unwrap(), a);
        let b = Tensor::vector(vec![0.6, 0.1, 0.3]);
        assert!((combine_heads(&[a, b]).unwrap().sum() - 2.0).abs() < 1e-9);
        let e1 = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]);
        let e2 = Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(combine_heads(&[e1, e2]).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random(&[5, 3], &mut rng);
        let mut onehot = vec![0.0; 5];
        onehot[2] = 1.0;
        assert_eq!(pool(&v, &Tensor::vector(onehot)).unwrap().data(), v.row(2));

        let uniform = pool(&v, &Tensor::vector(vec![0.2; 5])).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..5).map(|r| v.row(r)[c]).sum::<f64>() / 5.0;
            assert!((uniform.data()[c] - mean).abs() < 1e-15);
        }

        let alpha = random(&[5], &mut rng);
        let got = pool(&v, &alpha).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for r in 0..5 {
                s += alpha.data()[r] * v.data()[r * 3 + c];
            }
            assert!((got.data()[c] - s).abs() <= 1e-12);
        }
    }

    #[test]
    fn saturated_softmax_selects_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttentionConfig::a3(4);
        let mut p = AttentionParams::random(&cfg, 3, 2, false, &mut rng);
        // make the score equal to a large multiple of the first feature coordinate
        let mut fa = Tensor::zeros(&[4, 3]);
        fa.data_mut()[0] = 1.0;
        p.store.insert("att.head0.fa.weight", fa);
        p.store.insert("att.head0.fa.bias", Tensor::zeros(&[4]));
        p.store.insert("att.head0.fb.weight", Tensor::zeros(&[4, 2]));
        p.store.insert("att.head0.fb.bias", Tensor::full(&[4], 1.0));
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        p.store.insert("att.head0.fc.weight", eye);
        let mut w = Tensor::zeros(&[1, 4]);
        w.data_mut()[0] = 50.0;
        p.store.insert("att.head0.score.weight", w);
        let v = Tensor::from_rows(&[vec![0.0, 0.3, 0.1], vec![1.0, -0.5, 0.9], vec![0.0, 0.2, 0.2]]);
        let out = attend(&cfg, LEAKY, &p, &v, &Tensor::vector(vec![0.4, -0.4])).unwrap();
        assert!((out.alpha.data()[1] - 1.0).abs() < 1e-9);
        assert!(out.pooled.max_abs_diff(&Tensor::vector(v.row(1).to_vec())) <= 1e-9);
    }

    #[test]
    fn duplicated_heads_double_the_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let single = AttentionConfig::a3(4);
        let mut p1 = AttentionParams::random(&single, 3, 2, true, &mut rng);
        randomize(&mut p1, &mut rng);
        let double = AttentionConfig::a3x2(4);
        let mut p2 = p1.clone();
        for (name, t) in p1.store.iter() {
            p2.store.insert(name.replace("head0", "head1"), t.clone());
        }
        let v = random(&[6, 3], &mut rng);
        let q = random(&[2], &mut rng);
        let o1 = attend(&single, LEAKY, &p1, &v, &q).unwrap();
        let o2 = attend(&double, LEAKY, &p2, &v, &q).unwrap();
        for (a, b) in o1.alpha.data().iter().zip(o2.alpha.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn attend_equals_manual_composition_bitwise() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for cfg in [
                AttentionConfig::a3x2(5),
                AttentionConfig::a3sx2(5),
                AttentionConfig::a3x3(3),
            ] {
                let mut p = AttentionParams::random(&cfg, 4, 3, true, &mut rng);
                randomize(&mut p, &mut rng);
                let v = random(&[6, 4], &mut rng);
                let q = random(&[3], &mut rng);
                let out = attend(&cfg, LEAKY, &p, &v, &q).unwrap();
                let weights: Vec<Tensor> = (0..cfg.heads)
                    .map(|h| {
                        let s = head_scores(&cfg, LEAKY, &p, h, &v, &q).unwrap();
                        normalize(&s, cfg.normalization).unwrap()
                    })
                    .collect();
                assert_eq!(weights, out.head_weights);
                let alpha = combine_heads(&weights).unwrap();
                assert_eq!(alpha, out.alpha);
                assert_eq!(pool(&v, &alpha).unwrap(), out.pooled);
            }
        }
    }

    #[test]
    fn presets() {
        assert_eq!(AttentionConfig::named("A3x2", 8).unwrap().heads, 2);
        assert_eq!(
            AttentionConfig::named("a3s", 8).unwrap().normalization,
            Normalization::Sigmoid
        );
        assert!(AttentionConfig::named("APD", 8).is_err());
        let mut bad = AttentionConfig::a3(4);
        bad.heads = 0;
        assert!(bad.validate().is_err());
    }
}
