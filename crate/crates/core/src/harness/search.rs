//! Greedy one-axis-at-a-time hyperparameter search.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::TrainConfig;

/// One tunable field and the values to try, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchAxis {
    /// Dotted path into the run config, e.g. `model.hidden`.
    pub field: String,
    pub candidates: Vec<toml::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub axes: Vec<SearchAxis>,
    /// Maximum number of runs; the search stops early with a warning when the
    /// axes need more.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
}

impl SearchSpace {
    /// Weight norm, activation, classifier dropout, encoder width, learning rate.
    pub fn default_axes() -> Self {
        use toml::Value::{Boolean, Float, Integer, String as Str};
        let axis = |field: &str, candidates: Vec<toml::Value>| SearchAxis {
            field: field.into(),
            candidates,
        };
        SearchSpace {
            axes: vec![
                axis("model.weight_norm", vec![Boolean(true), Boolean(false)]),
                axis(
                    "model.activation",
                    vec![Str("relu".into()), Str("leaky_relu".into()), Str("tanh".into())],
                ),
                axis(
                    "model.dropout_classifier",
                    vec![Float(0.0), Float(0.2), Float(0.3), Float(0.5)],
                ),
                axis("model.hidden", vec![Integer(32), Integer(64), Integer(128)]),
                axis("optimizer.lr", vec![Float(1e-3), Float(2e-3), Float(5e-3)]),
            ],
            budget: None,
        }
    }

    pub fn total_candidates(&self) -> usize {
        self.axes.iter().map(|a| a.candidates.len()).sum()
    }

    /// Every axis names a real field and every candidate is accepted by it.
    pub fn validate(&self, base: &TrainConfig) -> Result<()> {
        for a in &self.axes {
            if a.candidates.is_empty() {
                return Err(Error::Config(format!("search axis `{}` has no candidates", a.field)));
            }
            for c in &a.candidates {
                base.with_field(&a.field, c)?;
            }
        }
        Ok(())
    }
}

/// Seed of the run for `candidate` on `axis`, derived from the base seed.
pub fn trial_seed(base: u64, axis: usize, candidate: usize) -> u64 {
    let mut x = base;
    for v in [axis as u64, candidate as u64] {
        x = splitmix64(x ^ splitmix64(v.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    x
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial<R> {
    pub axis: String,
    pub candidate: toml::Value,
    pub seed: u64,
    /// `None` marks a failed run, ranked below every finished one.
    pub score: Option<f64>,
    pub error: Option<String>,
    pub record: Option<R>,
}

impl<R> Trial<R> {
    pub fn rank_score(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome<R> {
    pub best: TrainConfig,
    pub best_score: f64,
    pub trials: Vec<Trial<R>>,
    /// True when the budget ran out before every axis was searched.
    pub truncated: bool,
}

/// Tunes each axis in order with every other field at its current best,
/// keeping the highest scoring candidate (the earlier one on ties).
///
/// `run` receives the candidate config, whose `seed` has already been replaced
/// by [`trial_seed`], and returns a score plus a record to keep. Errors count
/// as failed runs.
pub fn greedy_search<R, F>(base: &TrainConfig, space: &SearchSpace, mut run: F) -> Result<SearchOutcome<R>>
where
    F: FnMut(&TrainConfig) -> Result<(f64, R)>,
{
    space.validate(base)?;
    let budget = space.budget.unwrap_or(usize::MAX);
    if budget < space.total_candidates() {
        warn!(
            "search budget {budget} is below the {} candidate runs; the search will be truncated",
            space.total_candidates()
        );
    }
    let mut current = base.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut trials = Vec::new();
    let mut truncated = false;

    'axes: for (ai, axis) in space.axes.iter().enumerate() {
        let mut axis_best: Option<(f64, TrainConfig)> = None;
        for (ci, cand) in axis.candidates.iter().enumerate() {
            if trials.len() >= budget {
                truncated = true;
                if let Some((score, cfg)) = axis_best.take() {
                    best_score = score;
                    current = cfg;
                }
                break 'axes;
            }
            let mut cfg = current.with_field(&axis.field, cand)?;
            cfg.seed = trial_seed(base.seed, ai, ci);
            let trial = match run(&cfg) {
                Ok((score, record)) if !score.is_nan() => Trial {
                    axis: axis.field.clone(),
                    candidate: cand.clone(),
                    seed: cfg.seed,
                    score: Some(score),
                    error: None,
                    record: Some(record),
                },
                Ok(_) => failed(axis, cand, cfg.seed, "score is NaN".into()),
                Err(e) => failed(axis, cand, cfg.seed, e.to_string()),
            };
            info!(
                "{} = {cand}: {}",
                axis.field,
                trial.score.map_or_else(
                    || format!("failed ({})", trial.error.as_deref().unwrap_or("")),
                    |s| s.to_string()
                )
            );
            let s = trial.rank_score();
            if axis_best.as_ref().is_none_or(|(b, _)| s > *b) {
                // Keep the candidate value but restore the base seed for later axes.
                cfg.seed = base.seed;
                axis_best = Some((s, cfg));
            }
            trials.push(trial);
        }
        let (score, cfg) = axis_best.expect("validated non-empty axis");
        best_score = score;
        current = cfg;
    }
    if truncated {
        warn!("search stopped after {} runs (budget)", trials.len());
    }
    Ok(SearchOutcome {
        best: current,
        best_score,
        trials,
        truncated,
    })
}

fn failed<R>(axis: &SearchAxis, cand: &toml::Value, seed: u64, error: String) -> Trial<R> {
    Trial {
        axis: axis.field.clone(),
        candidate: cand.clone(),
        seed,
        score: None,
        error: Some(error),
        record: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use toml::Value;

    fn space(axes: &[(&str, Vec<Value>)]) -> SearchSpace {
        SearchSpace {
            axes: axes
                .iter()
                .map(|(f, c)| SearchAxis {
                    field: f.to_string(),
                    candidates: c.clone(),
                })
                .collect(),
            budget: None,
        }
    }

    fn ints(v: &[i64]) -> Vec<Value> {
        v.iter().map(|&i| Value::Integer(i)).collect()
    }

    #[test]
    fn greedy_not_grid() {
        let s = space(&[("model.hidden", ints(&[8, 16, 32])), ("epochs", ints(&[1, 2, 3, 4]))]);
        let mut runs = 0;
        let out = greedy_search(&TrainConfig::default(), &s, |c| {
            runs += 1;
            Ok((
                -((c.model.hidden as f64) - 16.0).abs() - (c.epochs as f64 - 3.0).abs(),
                (),
            ))
        })
        .unwrap();
        assert_eq!(runs, 7);
        assert_eq!(out.trials.len(), 7);
        assert_eq!((out.best.model.hidden, out.best.epochs), (16, 3));
        assert_eq!(out.best.seed, 0);
    }

    #[test]
    fn ties_keep_the_earlier_candidate() {
        let s = space(&[("model.hidden", ints(&[8, 16, 32]))]);
        let out = greedy_search(&TrainConfig::default(), &s, |_| Ok((1.0, ()))).unwrap();
        assert_eq!(out.best.model.hidden, 8);
    }

    #[test]
    fn failures_are_recorded_and_lose() {
        let s = space(&[("model.hidden", ints(&[8, 16, 32]))]);
        let out = greedy_search(&TrainConfig::default(), &s, |c| {
            if c.model.hidden == 8 {
                Err(Error::Numeric("diverged".into()))
            } else {
                Ok((-(c.model.hidden as f64), ()))
            }
        })
        .unwrap();
        assert_eq!(out.trials.len(), 3);
        assert_eq!(out.trials[0].score, None);
        assert!(out.trials[0].error.as_deref().unwrap().contains("diverged"));
        assert_eq!(out.best.model.hidden, 16);
    }

    #[test]
    fn all_failed_axis_still_fixes_first_candidate() {
        let s = space(&[("model.hidden", ints(&[8, 16]))]);
        let out = greedy_search::<(), _>(&TrainConfig::default(), &s, |_| Err(Error::Numeric("x".into()))).unwrap();
        assert_eq!(out.best.model.hidden, 8);
        assert_eq!(out.best_score, f64::NEG_INFINITY);
    }

    #[test]
    fn budget_truncates() {
        let mut s = space(&[("model.hidden", ints(&[8, 16, 32])), ("epochs", ints(&[1, 2]))]);
        s.budget = Some(4);
        let out = greedy_search(&TrainConfig::default(), &s, |c| {
            Ok((c.epochs as f64 + c.model.hidden as f64, ()))
        })
        .unwrap();
        assert!(out.truncated);
        assert_eq!(out.trials.len(), 4);
        assert_eq!((out.best.model.hidden, out.best.epochs), (32, 1));
    }

    #[test]
    fn trial_seeds_differ_and_are_stable() {
        let mut seen = std::collections::HashSet::new();
        for a in 0..5 {
            for c in 0..5 {
                assert!(seen.insert(trial_seed(7, a, c)));
            }
        }
        assert_eq!(trial_seed(7, 1, 2), trial_seed(7, 1, 2));
        assert_ne!(trial_seed(7, 1, 2), trial_seed(8, 1, 2));
    }

    #[test]
    fn bad_axes_are_config_errors() {
        let s = space(&[("model.hiden", ints(&[8]))]);
        assert!(matches!(
            greedy_search(&TrainConfig::default(), &s, |_| Ok((0.0, ()))),
            Err(Error::Config(_))
        ));
        let s = space(&[("model.hidden", vec![])]);
        assert!(greedy_search(&TrainConfig::default(), &s, |_| Ok((0.0, ()))).is_err());
        SearchSpace::default_axes().validate(&TrainConfig::default()).unwrap();
        assert_eq!(SearchSpace::default_axes().total_candidates(), 15);
    }
}
