//! Adamax: Adam with the second moment replaced by an exponentially weighted
//! infinity norm.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        AdamaxConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl AdamaxConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted: it freezes the model, which is a useful control run.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamaxState {
    pub m: BTreeMap<String, Tensor>,
    pub u: BTreeMap<String, Tensor>,
    pub t: u64,
}

#[derive(Clone, Debug)]
pub struct Adamax {
    pub config: AdamaxConfig,
    pub state: AdamaxState,
}

impl Adamax {
    pub fn new(config: AdamaxConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adamax {
            config,
            state: AdamaxState::default(),
        })
    }

    /// Applies one update to every parameter that has a gradient. Parameters are
    /// left untouched if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim("adamax", p.shape(), g.shape()));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Optimizer {
                    param: name.clone(),
                    reason: format!("non-finite gradient {} at coordinate {i}", g.data()[i]),
                });
            }
        }

        let AdamaxConfig { lr, beta1, beta2 } = self.config;
        self.state.t += 1;
        let bias_correction = 1.0 - beta1.powi(self.state.t.min(i32::MAX as u64) as i32);
        for (name, g) in grads.iter() {
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let u = self
                .state
                .u
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let theta = params.get_mut(name).expect("checked above");
            for (((th, mi), ui), &gi) in theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(u.data_mut())
                .zip(g.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *ui = f64::max(beta2 * *ui, gi.abs());
                if *ui > 0.0 {
                    *th -= lr * (*mi / (bias_correction * *ui));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![w]));
        s
    }

    fn grads(g: f64) -> Gradients {
        let mut gr = Gradients::default();
        gr.insert("w", Tensor::vector(vec![g]));
        gr
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let g: f64 = rng.gen_range(-1e3..1e3);
            let lr: f64 = rng.gen_range(1e-4..1.0);
            if g == 0.0 {
                continue;
            }
            let mut p = store(0.0);
            let mut opt = Adamax::new(AdamaxConfig {
                lr,
                ..Default::default()
            })
            .unwrap();
            opt.step(&mut p, &grads(g)).unwrap();
            let moved = p.get("w").unwrap().data()[0];
            assert_eq!(moved, -lr * g.signum(), "g = {g}, lr = {lr}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(1.5);
        let mut opt = Adamax::new(AdamaxConfig::default()).unwrap();
        for _ in 0..50 {
            opt.step(&mut p, &grads(0.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut p = store(0.0);
        let mut opt = Adamax::new(AdamaxConfig {
            lr: 0.05,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..200 {
            let w = p.get("w").unwrap().data()[0];
            opt.step(&mut p, &grads(2.0 * (w - 3.0))).unwrap();
        }
        let w = p.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn infinity_norm_accumulator_is_monotone_max() {
        let mut p = store(0.0);
        let mut opt = Adamax::new(AdamaxConfig::default()).unwrap();
        let seq = [0.5, -2.0, 0.1, 0.0, 3.0];
        let mut expected = 0.0f64;
        for g in seq {
            opt.step(&mut p, &grads(g)).unwrap();
            expected = f64::max(0.999 * expected, g.abs());
            assert_eq!(opt.state.u["w"].data()[0], expected);
            assert!(expected >= 0.0);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = store(0.0);
        let mut opt = Adamax::new(AdamaxConfig::default()).unwrap();
        match opt.step(&mut p, &grads(f64::NAN)) {
            Err(Error::Optimizer { param, .. }) => assert_eq!(param, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.0);
        assert_eq!(opt.state.t, 0);
    }

    #[test]
    fn rejects_bad_betas() {
        let cfg = AdamaxConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(matches!(Adamax::new(cfg), Err(Error::Config(_))));
    }
}
