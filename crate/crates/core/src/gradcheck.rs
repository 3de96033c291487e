//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar function of a parameter store with an analytic gradient.
pub trait Objective {
    fn value(&mut self, params: &ParamStore) -> Result<f64>;
    fn value_and_grad(&mut self, params: &ParamStore) -> Result<(f64, Gradients)>;
}

/// Wraps a graph-building closure as an [`Objective`]. The closure registers
/// whatever parameters it needs from the store and returns the scalar loss node.
pub struct GraphObjective<F>(pub F);

impl<F> Objective for GraphObjective<F>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    fn value(&mut self, params: &ParamStore) -> Result<f64> {
        let mut g = Graph::new();
        let loss = (self.0)(&mut g, params)?;
        g.value(loss).item()
    }

    fn value_and_grad(&mut self, params: &ParamStore) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let loss = (self.0)(&mut g, params)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item()?, grads))
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// The same ratio on whole vectors, with Euclidean norms in place of `|·|`.
pub fn vector_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / f64::max(1e-8, scale)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Worst coordinate-wise relative error for each parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    /// Worst coordinate-wise relative error overall.
    pub max_error: f64,
    pub coordinates: usize,
    pub analytic: Gradients,
    pub numeric: Gradients,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error < tolerance
    }

    /// Vector relative error of each group of parameters, where `group` maps
    /// a parameter name to its group name.
    pub fn grouped(&self, group: impl Fn(&str) -> String) -> BTreeMap<String, f64> {
        let mut parts: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (name, a) in self.analytic.iter() {
            let n = self.numeric.get(name).expect("numeric gradient for every analytic one");
            let e = parts.entry(group(name)).or_default();
            e.0.extend_from_slice(a.data());
            e.1.extend_from_slice(n.data());
        }
        parts
            .into_iter()
            .map(|(g, (a, n))| (g, vector_relative_error(&a, &n)))
            .collect()
    }
}

/// Perturbs every coordinate of every parameter with an analytic gradient by
/// `±eps` and compares the central difference with the analytic value.
pub fn grad_check<O: Objective + ?Sized>(objective: &mut O, params: &ParamStore, eps: f64) -> Result<GradCheckReport> {
    let (_, analytic) = objective.value_and_grad(params)?;
    grad_check_against(objective, params, &analytic, eps)
}

/// Like [`grad_check`] but with caller-supplied analytic gradients.
pub fn grad_check_against<O: Objective + ?Sized>(
    objective: &mut O,
    params: &ParamStore,
    analytic: &Gradients,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (name, grad) in analytic.iter() {
        let len = params.get(name)?.len();
        if grad.len() != len {
            return Err(Error::dim("grad_check", grad.shape(), params.get(name)?.shape()));
        }
        let mut worst: f64 = 0.0;
        let mut numeric_grad = Tensor::zeros(grad.shape());
        for i in 0..len {
            let original = params.get(name)?.data()[i];
            set(&mut work, name, i, original + eps);
            let plus = objective.value(&work)?;
            set(&mut work, name, i, original - eps);
            let minus = objective.value(&work)?;
            set(&mut work, name, i, original);
            let numeric = (plus - minus) / (2.0 * eps);
            numeric_grad.data_mut()[i] = numeric;
            let err = relative_error(grad.data()[i], numeric);
            if err.is_nan() {
                return Err(Error::Numeric(format!("NaN gradient comparison at {name}[{i}]")));
            }
            worst = worst.max(err);
            report.coordinates += 1;
        }
        report.max_error = report.max_error.max(worst);
        report.per_param.insert(name.clone(), worst);
        report.analytic.insert(name.clone(), grad.clone());
        report.numeric.insert(name.clone(), numeric_grad);
    }
    Ok(report)
}

fn set(store: &mut ParamStore, name: &str, i: usize, value: f64) {
    if let Some(t) = store.get_mut(name) {
        t.data_mut()[i] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Activation, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![3.0]));
        let mut obj = GraphObjective(|g: &mut Graph, p: &ParamStore| {
            let w = g.param_from(p, "w")?;
            let sq = g.mul(w, w)?;
            Ok(g.sum(sq))
        });
        let report = grad_check(&mut obj, &store, 1e-5).unwrap();
        assert!(report.max_error < 1e-9, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![3.0, -1.0]));
        let mut obj = GraphObjective(|g: &mut Graph, p: &ParamStore| {
            g.param_from(p, "w")?;
            let c = g.constant(Tensor::scalar(4.0));
            Ok(g.sum(c))
        });
        let report = grad_check(&mut obj, &store, 1e-5).unwrap();
        assert_eq!(report.max_error, 0.0);
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.insert("w1", random(&[5, 3], &mut rng));
            store.insert("b1", random(&[5], &mut rng));
            store.insert("w2", random(&[2, 5], &mut rng));
            store.insert("g2", random(&[2], &mut rng));
            store.insert("b2", random(&[2], &mut rng));
            let x = random(&[4, 3], &mut rng);
            let y = Tensor::new(vec![4, 2], (0..8).map(|i| [0.0, 0.3, 1.0][i % 3]).collect()).unwrap();
            let mut obj = GraphObjective(|g: &mut Graph, p: &ParamStore| {
                let xi = g.constant(x.clone());
                let w1 = g.param_from(p, "w1")?;
                let b1 = g.param_from(p, "b1")?;
                let h = g.linear(xi, w1, Some(b1))?;
                let h = g.activation(h, Activation::Tanh, 0.0)?;
                let w2 = g.param_from(p, "w2")?;
                let g2 = g.param_from(p, "g2")?;
                let w = g.weight_norm(w2, g2)?;
                let b2 = g.param_from(p, "b2")?;
                let o = g.linear(h, w, Some(b2))?;
                let pr = g.sigmoid(o);
                g.bce(pr, y.clone())
            });
            let report = grad_check(&mut obj, &store, 1e-5).unwrap();
            assert!(report.max_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn every_op_passes_gradient_check() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParamStore::new();
            store.insert("a", random(&[6, 3], &mut rng));
            store.insert("b", random(&[3, 3], &mut rng));
            store.insert("q", random(&[2, 3], &mut rng));
            store.insert("table", random(&[5, 3], &mut rng));
            store.insert("s", random(&[1, 3], &mut rng));
            let mask: Vec<f64> = (0..18).map(|i| if i % 4 == 0 { 0.0 } else { 1.25 }).collect();
            let mut obj = GraphObjective(|g: &mut Graph, p: &ParamStore| {
                let a = g.param_from(p, "a")?;
                let b = g.param_from(p, "b")?;
                let q = g.param_from(p, "q")?;
                let t = g.param_from(p, "table")?;
                let m = g.matmul(a, b)?;
                let m = g.activation(m, Activation::Tanh, 0.0)?;
                let m = g.dropout_with_mask(m, mask.clone())?;
                let e = g.gather_rows(t, vec![0, 4, 4, 2, 1, 3])?;
                let m = g.add(m, e)?;
                let bm = g.broadcast_mul(m, q, 3)?;
                let s = g.sigmoid(bm);
                let om = g.one_minus(s);
                let th = g.tanh(om);
                let d = g.sub(th, a)?;
                let w = g.matmul(d, b)?;
                let sw = g.param_from(p, "s")?;
                let scores = g.linear(w, sw, None)?;
                let scores = g.reshape(scores, &[2, 3])?;
                let alpha = g.softmax_rows(scores)?;
                let alpha = g.scale(alpha, 1.5);
                let pooled = g.weighted_pool(alpha, a)?;
                let blended = g.blend_rows(pooled, q, vec![true, false])?;
                let sq = g.mul(blended, blended)?;
                Ok(g.sum(sq))
            });
            let report = grad_check(&mut obj, &store, 1e-5).unwrap();
            assert!(report.max_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn activations_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..2.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![3, 4], data).unwrap());
        for kind in [
            Activation::Relu,
            Activation::LeakyRelu,
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Linear,
        ] {
            let mut obj = GraphObjective(|g: &mut Graph, p: &ParamStore| {
                let x = g.param_from(p, "x")?;
                let y = g.activation(x, kind, 0.1)?;
                let y2 = g.mul(y, y)?;
                let y3 = g.mul(y2, x)?;
                Ok(g.sum(y3))
            });
            let report = grad_check(&mut obj, &store, 1e-5).unwrap();
            assert!(report.max_error < 1e-6, "{kind:?}: {report:?}");
        }
    }
}
