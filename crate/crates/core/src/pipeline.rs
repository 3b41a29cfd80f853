//! Orchestration of a full run and its on-disk layout.
//!
//! A run directory holds:
//!
//! | file            | written by          | content                          |
//! |-----------------|---------------------|----------------------------------|
//! | `config.toml`   | every stage         | effective configuration snapshot |
//! | `metrics.jsonl` | every stage         | per-epoch records (appended)     |
//! | `teacher.ckpt`  | strategy generation | full-precision model             |
//! | `search.ckpt`   | strategy generation | weights after the search         |
//! | `strategy.txt`  | strategy generation | the mixed-precision strategy     |
//! | `student.ckpt`  | post-training       | final quantized-training weights |
//! | `summary.json`  | post-training       | accuracies and costs             |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::cost::{model_size_bytes, total_bitops, wcr};
use crate::data::{gen_dataset, Dataset};
use crate::error::{Result, SdqError};
use crate::metrics::MetricsSink;
use crate::model::{build_model, Model, QuantPlan};
use crate::phase1::{run_phase1, Phase1Outcome};
use crate::phase2::{run_phase2, strategy_plan, Phase2Epoch};
use crate::strategy::MpqStrategy;
use crate::train::{train_full_precision, FpEpoch};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const SEARCH_CKPT: &str = "search.ckpt";
pub const STRATEGY_FILE: &str = "strategy.txt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    gen_dataset(&cfg.data)
}

pub fn train_teacher(cfg: &RunConfig, train: &Dataset) -> Result<(Model, Vec<FpEpoch>)> {
    let mut model = build_model(&cfg.model_spec()?, cfg.seeds().init);
    let log = train_full_precision(&mut model, train, &cfg.teacher)?;
    Ok((model, log))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SdqError::io(dir, e))
}

pub fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let p = dir.join(CONFIG_FILE);
    std::fs::write(&p, cfg.to_toml()).map_err(|e| SdqError::io(&p, e))
}

pub struct StrategyRun {
    pub teacher: Model,
    pub searched: Model,
    pub outcome: Phase1Outcome,
    pub teacher_log: Vec<FpEpoch>,
}

/// Trains the teacher, runs the bitwidth search from the teacher's weights,
/// and writes the strategy-generation artifacts into `dir`.
pub fn generate_strategy(cfg: &RunConfig, dir: &Path) -> Result<StrategyRun> {
    ensure_dir(dir)?;
    write_config(cfg, dir)?;
    let (train, _) = datasets(cfg)?;
    let mut sink = MetricsSink::create(&dir.join(METRICS_FILE))?;
    let (teacher, teacher_log) = train_teacher(cfg, &train)?;
    sink.emit_all(&teacher_log)?;
    checkpoint::save(&teacher, &dir.join(TEACHER_CKPT))?;

    let mut searched = teacher.clone();
    let outcome = run_phase1(&mut searched, &train, &cfg.strategy, false)?;
    sink.emit_all(&outcome.epochs)?;
    checkpoint::save(&searched, &dir.join(SEARCH_CKPT))?;
    outcome.strategy.save(&dir.join(STRATEGY_FILE))?;
    Ok(StrategyRun {
        teacher,
        searched,
        outcome,
        teacher_log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub phase: String,
    pub model: String,
    pub seed: u64,
    pub fp_accuracy: f64,
    pub quantized_accuracy: f64,
    pub avg_weight_bits: f64,
    pub activation_bits: u32,
    pub wcr: f64,
    pub bitops: f64,
    pub size_bytes: f64,
    pub layer_bits: Vec<u32>,
}

/// Post-trains `init` at `strategy` with `teacher`, writes the student
/// checkpoint and the summary, and appends metrics.
pub fn post_train(
    cfg: &RunConfig,
    dir: &Path,
    strategy: &MpqStrategy,
    teacher: &Model,
    init: &Model,
) -> Result<(Model, Vec<Phase2Epoch>, Summary)> {
    ensure_dir(dir)?;
    if strategy.model != cfg.run.model {
        return Err(SdqError::Config(format!(
            "strategy is for model '{}' but the config runs '{}'",
            strategy.model, cfg.run.model
        )));
    }
    let (train, test) = datasets(cfg)?;
    let mut student = init.clone();
    let log = run_phase2(&mut student, teacher, strategy, &train, &cfg.train)?;
    let mut sink = MetricsSink::append(&dir.join(METRICS_FILE))?;
    sink.emit_all(&log)?;
    checkpoint::save(&student, &dir.join(STUDENT_CKPT))?;

    let metas = student.layer_metas();
    let plan = strategy_plan(&student, strategy, cfg.train.normalize)?;
    let summary = Summary {
        phase: "summary".into(),
        model: cfg.run.model.clone(),
        seed: cfg.run.seed,
        fp_accuracy: teacher.accuracy(&test.x, &test.y, &QuantPlan::FullPrecision)?,
        quantized_accuracy: student.accuracy(&test.x, &test.y, &plan)?,
        avg_weight_bits: strategy.avg_weight_bits(),
        activation_bits: strategy.activation_bits,
        wcr: wcr(strategy),
        bitops: total_bitops(strategy, &metas)?,
        size_bytes: model_size_bytes(strategy, &metas)?,
        layer_bits: strategy.layers.iter().map(|l| l.bits).collect(),
    };
    sink.emit(&summary)?;
    let p = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    std::fs::write(&p, text).map_err(|e| SdqError::io(&p, e))?;
    Ok((student, log, summary))
}

/// Both stages back to back in `dir`.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path) -> Result<Summary> {
    let s = generate_strategy(cfg, dir)?;
    let (_, _, summary) = post_train(cfg, dir, &s.outcome.strategy, &s.teacher, &s.searched)?;
    Ok(summary)
}

/// `dir` or the configured output directory.
pub fn resolve_dir(cfg: &RunConfig, dir: Option<PathBuf>) -> PathBuf {
    dir.unwrap_or_else(|| cfg.run.out_dir.clone())
}
