//! Run orchestration: configs, training, evaluation, search, heatmaps and
//! the gradient-check entry point.

pub mod check;
pub mod config;
pub mod heatmap;
pub mod search;
pub mod synth;
pub mod train;

pub use check::{run_gradcheck, GradcheckConfig, GradcheckSummary};
pub use config::{DataPaths, TrainConfig};
pub use heatmap::{export_heatmap, Heatmap};
pub use search::{greedy_search, SearchAxis, SearchOutcome, SearchSpace};
pub use train::{evaluate, train, EvalReport, RunRecord, TrainInputs, TrainOutcome};
