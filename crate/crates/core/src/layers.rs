//! Fully connected layers stored by name in a [`ParamStore`].
//!
//! A layer under prefix `p` owns `p.weight` `[Dout×Din]` and `p.bias` `[Dout]`;
//! weight-normalized layers add `p.gain` `[Dout]` and treat `p.weight` as the
//! direction.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::Result;
use crate::tensor::{row_norm, Activation, Tensor};

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("shape matches data")
}

/// Adds a freshly initialized layer to `store`. With weight norm the gain
/// starts at each row's norm so the effective weight equals the direction.
pub fn init_dense<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    din: usize,
    dout: usize,
    weight_norm: bool,
    rng: &mut R,
) {
    let w = glorot_uniform(dout, din, rng);
    if weight_norm {
        let gains = (0..dout).map(|i| row_norm(w.row(i))).collect();
        store.insert(format!("{prefix}.gain"), Tensor::vector(gains));
    }
    store.insert(format!("{prefix}.weight"), w);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]));
}

/// Affine part of a layer: `x · Wᵀ + b`, with `W` weight-normalized when the
/// layer has a gain.
pub fn dense(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = weight_node(g, store, prefix)?;
    let b = g.param_from(store, &format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b))
}

/// `act(dense(x))`.
pub fn dense_act(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    act: Activation,
    slope: f64,
) -> Result<NodeId> {
    let y = dense(g, store, prefix, x)?;
    g.activation(y, act, slope)
}

/// The effective weight node of a layer.
pub fn weight_node(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<NodeId> {
    let w = g.param_from(store, &format!("{prefix}.weight"))?;
    let gain_name = format!("{prefix}.gain");
    if store.contains(&gain_name) {
        let gain = g.param_from(store, &gain_name)?;
        g.weight_norm(w, gain)
    } else {
        Ok(w)
    }
}

/// Effective weight of a layer evaluated outside any graph.
pub fn effective_weight(store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = weight_node(&mut g, store, prefix)?;
    Ok(g.value(w).clone())
}
