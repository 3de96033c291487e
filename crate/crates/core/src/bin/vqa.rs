use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use vqa_core::data::{load_dataset, make_synthetic, AnswerVocabulary, FeatureStore, NeedleTask, SyntheticSpec};
use vqa_core::harness::search::SearchOutcome;
use vqa_core::harness::synth::{write_synthetic, CONFIG_FILE};
use vqa_core::harness::train::{resolve_out_dir, CHECKPOINT_FILE};
use vqa_core::harness::{
    evaluate, export_heatmap, greedy_search, run_gradcheck, train, GradcheckConfig, Heatmap, RunRecord, SearchSpace,
    TrainConfig, TrainInputs,
};
use vqa_core::model::VqaModel;
use vqa_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vqa", version, about = "Train and inspect top-down attention VQA models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Single,
    Dual,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best validation checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write per-example predictions.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Greedy per-axis hyperparameter search.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient on a tiny random model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Check this many consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate a synthetic needle dataset and a matching run config.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<Task>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Export attention weights of one example as text rows and graymaps.
    Heatmap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Checkpoint, split and features for `eval` and `heatmap`.
fn load_for_inspection(
    cfg: &TrainConfig,
    out_dir: &Path,
    checkpoint: Option<PathBuf>,
    split: Split,
) -> Result<(VqaModel, Vec<vqa_core::data::VqaExample>, FeatureStore)> {
    let ckpt = checkpoint.unwrap_or_else(|| out_dir.join(CHECKPOINT_FILE));
    let model = VqaModel::load(&ckpt)?;
    let answers = AnswerVocabulary::from_list(model.answers.clone())?;
    let path = match split {
        Split::Train => &cfg.paths.train,
        Split::Val => &cfg.paths.val,
    };
    let examples = load_dataset(path, &model.vocab, &answers, model.config.max_question_len)?;
    let features = FeatureStore::load(&cfg.paths.features, &cfg.paths.feature_index)?;
    model.check_features(&features)?;
    Ok((model, examples, features))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out_dir } => {
            let cfg = load_config(&config, seed)?;
            let out = resolve_out_dir(&cfg, out_dir.as_deref())?;
            let inputs = TrainInputs::load(&cfg)?;
            let outcome = train(&cfg, &inputs, Some(&out))?;
            let r = &outcome.record;
            println!(
                "best val accuracy {} at epoch {} ({} epochs, {:.1}s); outputs in {}",
                r.best_val_acc,
                r.best_epoch,
                r.epochs.len(),
                r.wall_time_secs,
                out.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            seed,
            out_dir,
        } => {
            let cfg = load_config(&config, seed)?;
            let out = resolve_out_dir(&cfg, out_dir.as_deref())?;
            let (model, examples, features) = load_for_inspection(&cfg, &out, checkpoint, split)?;
            let report = evaluate(&model, &examples, &features, cfg.batch_size)?;
            fs::create_dir_all(&out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
            let p = out.join("predictions.csv");
            fs::write(&p, report.to_csv()).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            write_json(
                &out.join("eval.json"),
                &serde_json::json!({"accuracy": report.accuracy, "loss": report.loss, "examples": report.rows.len()}),
            )?;
            println!("accuracy {} over {} examples", report.accuracy, report.rows.len());
        }
        Command::Search { config, seed, out_dir } => {
            let base = load_config(&config, seed)?;
            let out = resolve_out_dir(&base, out_dir.as_deref())?;
            let space = base.search.clone().unwrap_or_else(SearchSpace::default_axes);
            let inputs = TrainInputs::load(&base)?;
            let mut n = 0;
            let outcome: SearchOutcome<RunRecord> = greedy_search(&base, &space, |cfg| {
                n += 1;
                let dir = out.join(format!("trial{n:03}"));
                let o = train(cfg, &inputs, Some(&dir))?;
                Ok((o.record.best_val_acc, o.record))
            })?;
            fs::create_dir_all(&out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
            write_json(&out.join("search.json"), &outcome)?;
            outcome.best.save(out.join("best.toml"))?;
            println!(
                "{} runs; best score {}; best config in {}",
                outcome.trials.len(),
                outcome.best_score,
                out.join("best.toml").display()
            );
        }
        Command::Gradcheck {
            config,
            seed,
            seeds,
            out_dir,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    toml::from_str::<GradcheckConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => GradcheckConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let first = cfg.seed;
            let mut summaries = Vec::new();
            for s in first..first + seeds.max(1) {
                cfg.seed = s;
                let summary = run_gradcheck(&cfg, None)?;
                println!("seed {s}: max relative error {:e}", summary.max_error);
                for (group, err) in &summary.groups {
                    let mark = if *err < cfg.tolerance { "ok" } else { "FAIL" };
                    println!("  {group:<16} {err:e} {mark}");
                }
                summaries.push(summary);
            }
            if let Some(out) = out_dir {
                fs::create_dir_all(&out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
                write_json(&out.join("gradcheck.json"), &summaries)?;
            }
            let failed: Vec<u64> = summaries.iter().filter(|s| !s.passed).map(|s| s.seed).collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!(
                    "gradient check failed at tolerance {} for seeds {failed:?}",
                    cfg.tolerance
                )));
            }
        }
        Command::SynthData {
            config,
            task,
            n,
            seed,
            out_dir,
        } => {
            let mut spec = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    toml::from_str::<SyntheticSpec>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(t) = task {
                let (seed, n) = (spec.seed, spec.n);
                spec = match t {
                    Task::Single => SyntheticSpec::single(seed, n),
                    Task::Dual => SyntheticSpec::dual(seed, n),
                };
            }
            if let Some(n) = n {
                spec.n = n;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = make_synthetic(&spec)?;
            write_synthetic(&data, &out_dir)?;
            let kind = match spec.task {
                NeedleTask::Single => "single",
                NeedleTask::Dual => "dual",
            };
            println!(
                "{kind} task: {} train / {} val examples, {} answers; run config {}",
                data.train.len(),
                data.val.len(),
                data.answers.len(),
                out_dir.join(CONFIG_FILE).display()
            );
        }
        Command::Heatmap {
            config,
            checkpoint,
            split,
            example,
            seed,
            out_dir,
        } => {
            let cfg = load_config(&config, seed)?;
            let out = resolve_out_dir(&cfg, out_dir.as_deref())?;
            let (model, examples, features) = load_for_inspection(&cfg, &out, checkpoint, split)?;
            let ex = examples
                .get(example)
                .ok_or_else(|| Error::Data(format!("example {example} out of range ({} examples)", examples.len())))?;
            let report = evaluate(&model, std::slice::from_ref(ex), &features, 1)?;
            let row = &report.rows[0];
            let heatmap = Heatmap::from_prediction(&row.prediction);
            let files = export_heatmap(&heatmap, &out.join("heatmaps"), &format!("example{example}"))?;
            println!("question: {}", ex.question_text);
            println!("answer: {} (score {})", row.answer, row.score);
            print!("{}", heatmap.to_text());
            for f in files {
                info!("wrote {}", f.display());
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
