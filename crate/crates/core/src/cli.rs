//! Command-line front end.
//!
//! Every command prints `key=value` lines on stdout. Failures print a single
//! line on stderr, `error kind=<kind> msg="<message>"`, and exit with
//!
//! | code | meaning                                               |
//! |------|-------------------------------------------------------|
//! | 0    | success                                               |
//! | 1    | usage, config, parse, i/o or contract error           |
//! | 2    | numerical abort (non-finite loss or value)            |
//! | 3    | `selftest` ran and at least one suite failed          |

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{RunConfig, ENV_OUT_DIR, ENV_SEED};
use crate::cost::{hw_round, load_layer_table, model_size_bytes, resnet18_layer_table, total_bitops, wcr, LayerMeta};
use crate::error::{Result, SdqError};
use crate::model::{Model, ModelSpec, QuantPlan};
use crate::oracles::run_selftest;
use crate::phase2::strategy_plan;
use crate::pipeline::{self, CONFIG_FILE, SEARCH_CKPT, STRATEGY_FILE, TEACHER_CKPT};
use crate::report::write_reports;
use crate::strategy::MpqStrategy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_SELFTEST_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sdq", version, about = "Mixed-precision quantization with learned bitwidths")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; defaults to `run.out_dir` of the config.
    #[arg(long, env = ENV_OUT_DIR)]
    pub out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, env = ENV_SEED)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the full-precision teacher and search a bitwidth strategy.
    GenerateStrategy(RunArgs),
    /// Post-train at a strategy with distillation.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Strategy file; defaults to `strategy.txt` in the run directory.
        #[arg(long)]
        strategy: Option<PathBuf>,
    },
    /// Test accuracy of a checkpoint, optionally quantized at a strategy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        strategy: Option<PathBuf>,
        /// Defaults to `config.toml` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// BitOPs, size and compression rate of a strategy.
    Cost {
        #[arg(long)]
        strategy: PathBuf,
        /// Layer table file, or `resnet18` for the built-in table. Defaults
        /// to the layers of the strategy's model id.
        #[arg(long)]
        layers: Option<String>,
        /// Supported bitwidths, e.g. `2,4,8,16`; also reports the rounded-up
        /// deployment.
        #[arg(long, value_delimiter = ',')]
        hw: Option<Vec<u32>>,
    },
    /// CSV trajectories and histograms from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle suites.
    Selftest,
}

fn load_run(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    let dir = pipeline::resolve_dir(&cfg, args.out.clone());
    cfg.run.out_dir = dir.clone();
    Ok((cfg, dir))
}

fn load_checkpoint_for(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let m = checkpoint::load(path)?;
    if m.spec.id != cfg.run.model {
        return Err(SdqError::Config(format!(
            "{} holds model '{}' but the config runs '{}'",
            path.display(),
            m.spec.id,
            cfg.run.model
        )));
    }
    Ok(m)
}

fn kv(out: &mut dyn Write, key: &str, value: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{key}={value}").map_err(|e| SdqError::io("<stdout>", e))
}

fn cost_metas(strategy: &MpqStrategy, layers: Option<&str>) -> Result<Vec<LayerMeta>> {
    match layers {
        Some("resnet18") => Ok(resnet18_layer_table()),
        Some(p) => load_layer_table(Path::new(p)),
        None if strategy.model == "resnet18" => Ok(resnet18_layer_table()),
        None => ModelSpec::parse(&strategy.model).map(|s| s.layer_metas()).map_err(|_| {
            SdqError::Config(format!(
                "no layer table for model '{}'; pass --layers",
                strategy.model
            ))
        }),
    }
}

/// Executes a parsed command, writing results to `out`.
pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::GenerateStrategy(args) => {
            let (cfg, dir) = load_run(&args)?;
            let s = pipeline::generate_strategy(&cfg, &dir)?;
            let st = &s.outcome.strategy;
            kv(out, "strategy", dir.join(STRATEGY_FILE).display())?;
            kv(out, "avg_weight_bits", st.avg_weight_bits())?;
            let bits: Vec<String> = st.layers.iter().map(|l| l.bits.to_string()).collect();
            kv(out, "layer_bits", bits.join(","))?;
        }
        Command::Train { run, strategy } => {
            let (cfg, dir) = load_run(&run)?;
            std::fs::create_dir_all(&dir).map_err(|e| SdqError::io(&dir, e))?;
            pipeline::write_config(&cfg, &dir)?;
            let st = MpqStrategy::load(&strategy.unwrap_or_else(|| dir.join(STRATEGY_FILE)))?;
            let teacher_path = dir.join(TEACHER_CKPT);
            let teacher = if teacher_path.is_file() {
                load_checkpoint_for(&cfg, &teacher_path)?
            } else {
                let (train, _) = pipeline::datasets(&cfg)?;
                let (t, log) = pipeline::train_teacher(&cfg, &train)?;
                crate::metrics::MetricsSink::append(&dir.join(pipeline::METRICS_FILE))?.emit_all(&log)?;
                checkpoint::save(&t, &teacher_path)?;
                t
            };
            let search_path = dir.join(SEARCH_CKPT);
            let init = if search_path.is_file() {
                load_checkpoint_for(&cfg, &search_path)?
            } else {
                teacher.clone()
            };
            let (_, _, s) = pipeline::post_train(&cfg, &dir, &st, &teacher, &init)?;
            kv(out, "fp_accuracy", s.fp_accuracy)?;
            kv(out, "quantized_accuracy", s.quantized_accuracy)?;
            kv(out, "avg_weight_bits", s.avg_weight_bits)?;
            kv(out, "wcr", s.wcr)?;
            kv(out, "bitops", s.bitops)?;
        }
        Command::Eval {
            checkpoint: ckpt,
            strategy,
            config,
        } => {
            let config = config.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE));
            let cfg = RunConfig::load(&config)?;
            let model = load_checkpoint_for(&cfg, &ckpt)?;
            let (_, test) = pipeline::datasets(&cfg)?;
            let plan = match &strategy {
                Some(p) => strategy_plan(&model, &MpqStrategy::load(p)?, cfg.train.normalize)?,
                None => QuantPlan::FullPrecision,
            };
            kv(out, "samples", test.len())?;
            kv(out, "accuracy", model.accuracy(&test.x, &test.y, &plan)?)?;
        }
        Command::Cost { strategy, layers, hw } => {
            let st = MpqStrategy::load(&strategy)?;
            let metas = cost_metas(&st, layers.as_deref())?;
            kv(out, "avg_weight_bits", st.avg_weight_bits())?;
            kv(out, "wcr", wcr(&st))?;
            kv(out, "bitops", total_bitops(&st, &metas)?)?;
            kv(out, "size_bytes", model_size_bytes(&st, &metas)?)?;
            if let Some(hw) = hw {
                let r = hw_round(&st, &hw)?;
                kv(out, "deployed_avg_weight_bits", r.deployed_avg_bits)?;
                kv(out, "deployed_wcr", r.deployed_wcr)?;
                kv(out, "deployed_bitops", total_bitops(&r.strategy, &metas)?)?;
                kv(out, "deployed_size_bytes", model_size_bytes(&r.strategy, &metas)?)?;
            }
        }
        Command::Report { run, out: dest } => {
            let dest = dest.unwrap_or_else(|| run.clone());
            for p in write_reports(&run, &dest)? {
                kv(out, "wrote", p.display())?;
            }
        }
        Command::Selftest => {
            let results = run_selftest();
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                let tag = if r.passed { "PASS" } else { "FAIL" };
                writeln!(out, "{tag} {} {}", r.name, r.detail).map_err(|e| SdqError::io("<stdout>", e))?;
            }
            if !ok {
                return Ok(EXIT_SELFTEST_FAILED);
            }
        }
    }
    Ok(EXIT_OK)
}

/// The single stderr line for `e`.
pub fn error_line(e: &SdqError) -> String {
    let msg = serde_json::to_string(&e.to_string()).expect("string serializes");
    format!("error kind={} msg={msg}", e.kind())
}

pub fn exit_code(e: &SdqError) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_ERROR
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            // clap's own exit code 2 would read as a numerical abort
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            let msg = serde_json::to_string(first).expect("string serializes");
            let _ = writeln!(err, "error kind=usage msg={msg}");
            return EXIT_ERROR;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(&e));
            exit_code(&e)
        }
    }
}
