use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use invdyn::config::{self, ConfigError};
use invdyn::{checkpoint, io as csvio, verify};
use invdyn_core::data::{build_direct, build_indirect, build_joint, DataSource};
use invdyn_core::experiment::{
    aggregate, run_learning_resolved, ExperimentConfig, GroupField, LearningOutcome, Tuning,
};

/// Iterative task-specific learning of inverse dynamics error models on a
/// simulated 2D system.
#[derive(Parser)]
#[command(name = "invdyn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omit to use the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override config keys, e.g. `--set tuning.policy_kp=30`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one learning experiment and write its metrics.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dump the per-iteration training datasets as CSV.
        #[arg(long)]
        dump_datasets: bool,
        /// Dump per-step episode traces as CSV.
        #[arg(long)]
        trace: bool,
    },
    /// Run a full sweep grid, one run directory per cell.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate sweep results into per-group learning curves.
    Aggregate {
        /// Sweep output directory (contains index.csv and runs/).
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated group key fields
        /// (controller,gain,source,noise,friction,stiction,epochs).
        #[arg(long, default_value = "controller,gain,source")]
        group_by: String,
    },
    /// Emit plottable per-group curve files from an aggregate CSV.
    PlotData {
        /// Aggregate CSV produced by the aggregate command.
        #[arg(long)]
        aggregate: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in verification checks.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Run {
            cfg,
            out,
            seed,
            dump_datasets,
            trace,
        } => cmd_run(cfg, &out, seed, dump_datasets, trace),
        Command::Sweep { cfg, out } => cmd_sweep(cfg, &out),
        Command::Aggregate {
            runs,
            out,
            group_by,
        } => cmd_aggregate(&runs, &out, &group_by),
        Command::PlotData { aggregate, out } => cmd_plot_data(&aggregate, &out),
        Command::Verify { cfg, json } => cmd_verify(cfg, json),
    }
}

fn parse_group_fields(spec: &str) -> Result<Vec<GroupField>, ConfigError> {
    spec.split(',')
        .filter(|s| !s.is_empty())
        .map(|name| match name.trim() {
            "controller" => Ok(GroupField::Controller),
            "gain" => Ok(GroupField::Gain),
            "source" => Ok(GroupField::DataSource),
            "noise" => Ok(GroupField::NoiseLevel),
            "friction" => Ok(GroupField::FrictionLevel),
            "stiction" => Ok(GroupField::StictionLevel),
            "epochs" => Ok(GroupField::Epochs),
            other => Err(ConfigError::Invalid(format!(
                "unknown group field `{other}` (valid: controller, gain, source, noise, \
friction, stiction, epochs)"
            ))),
        })
        .collect()
}

/// Execute one cell, optionally dumping datasets and traces into `run_dir`.
fn execute_run(
    cell: &ExperimentConfig,
    tuning: &Tuning,
    run_dir: &Path,
    dump_datasets: bool,
    dump_trace: bool,
) -> anyhow::Result<LearningOutcome> {
    let rc = cell.resolve(tuning);
    let dim = rc.dim();
    let data_dir = run_dir.join("datasets");
    let trace_dir = run_dir.join("trace");
    if dump_datasets {
        std::fs::create_dir_all(&data_dir)?;
    }
    if dump_trace {
        std::fs::create_dir_all(&trace_dir)?;
    }
    let mut dump_err = None;
    let source = rc.data_source;
    let outcome = run_learning_resolved(&rc, Some(cell.clone()), |k, trace| {
        if dump_err.is_some() {
            return;
        }
        let dump = || -> std::io::Result<()> {
            if dump_trace {
                csvio::write_trace_csv(&trace_dir.join(format!("episode_{k:02}.csv")), trace, dim)?;
            }
            if dump_datasets {
                let indirect = build_indirect(trace, k);
                let direct = build_direct(trace, k);
                let dataset = match source {
                    DataSource::Indirect => indirect,
                    DataSource::Direct => direct,
                    DataSource::Joint => build_joint(&indirect, &direct).expect("same iteration"),
                };
                csvio::write_dataset_csv(
                    &data_dir.join(format!("{}_{k:02}.csv", dataset.source_label.name())),
                    &dataset,
                    dim,
                )?;
            }
            Ok(())
        };
        if let Err(e) = dump() {
            dump_err = Some(e);
        }
    });
    if let Some(e) = dump_err {
        return Err(e.into());
    }
    csvio::write_metrics_csv(&run_dir.join("metrics.csv"), &outcome.metrics.records)?;
    Ok(outcome)
}

fn cmd_run(
    cfg: ConfigArgs,
    out: &Path,
    seed: Option<u64>,
    dump_datasets: bool,
    trace: bool,
) -> anyhow::Result<ExitCode> {
    let mut file = config::load_run_file(cfg.config.as_deref(), &cfg.set)?;
    if let Some(seed) = seed {
        file.seed = seed;
    }
    let (cell, tuning) = file.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved.toml"), config::echo_toml(&file))?;

    let outcome = execute_run(&cell, &tuning, out, dump_datasets, trace)?;
    checkpoint::save(&out.join("model.ckpt"), &outcome.final_model)?;

    let metrics = &outcome.metrics;
    let last = metrics.records.last();
    println!(
        "run complete: {} iterations, final pos err {:.4}, converged {}",
        metrics.records.len(),
        last.map(|r| r.pos_err_mean).unwrap_or(f64::NAN),
        last.map(|r| r.converged).unwrap_or(false)
    );
    if metrics.aborted {
        eprintln!("run aborted: simulation diverged; see metrics.csv");
        return Ok(ExitCode::from(EXIT_RUNTIME));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(cfg: ConfigArgs, out: &Path) -> anyhow::Result<ExitCode> {
    let file = config::load_sweep_file(cfg.config.as_deref(), &cfg.set)?;
    let (grid, tuning) = file.grid()?;
    std::fs::create_dir_all(out.join("runs"))?;
    std::fs::write(out.join("resolved.toml"), config::echo_toml(&file))?;

    let mut index = String::from(csvio::INDEX_HEADER);
    index.push('\n');
    let total = grid.len();
    let mut aborted_count = 0usize;
    for (i, cell) in grid.iter().enumerate() {
        let run_id = format!(
            "{:04}_{}_{}_{}_{}_{}_{}_ep{}_s{}",
            i,
            cell.noise_level.name(),
            cell.friction_level.name(),
            cell.stiction_level.name(),
            cell.controller.name(),
            cell.gain_setting.name(),
            cell.data_source.name(),
            cell.epochs,
            cell.seed
        );
        let run_dir = out.join("runs").join(&run_id);
        std::fs::create_dir_all(&run_dir)?;
        std::fs::write(
            run_dir.join("resolved.toml"),
            config::echo_toml(&run_file_for_cell(cell, &tuning)),
        )?;
        let outcome = execute_run(cell, &tuning, &run_dir, false, false)?;
        if outcome.metrics.aborted {
            aborted_count += 1;
        }
        index.push_str(&csvio::index_row(&run_id, cell, outcome.metrics.aborted));
        index.push('\n');
        eprintln!(
            "[{}/{}] {} {}",
            i + 1,
            total,
            run_id,
            if outcome.metrics.aborted { "ABORTED" } else { "ok" }
        );
    }
    std::fs::write(out.join("index.csv"), index)?;
    println!("sweep complete: {total} runs, {aborted_count} aborted");
    Ok(ExitCode::SUCCESS)
}

fn run_file_for_cell(cell: &ExperimentConfig, tuning: &Tuning) -> config::RunFile {
    use invdyn_core::experiment::{ControllerKind, GainSetting, NoiseLevel};
    config::RunFile {
        noise_level: match cell.noise_level {
            NoiseLevel::Low => config::NoiseLevelCfg::Low,
            NoiseLevel::Medium => config::NoiseLevelCfg::Medium,
            NoiseLevel::High => config::NoiseLevelCfg::High,
            NoiseLevel::VeryHigh => config::NoiseLevelCfg::VeryHigh,
        },
        friction_level: if cell.friction_level.name() == "high" {
            config::TwoLevelCfg::High
        } else {
            config::TwoLevelCfg::Medium
        },
        stiction_level: if cell.stiction_level.name() == "high" {
            config::TwoLevelCfg::High
        } else {
            config::TwoLevelCfg::Medium
        },
        controller: match cell.controller {
            ControllerKind::Pid => config::ControllerCfg::Pid,
            ControllerKind::Adaptive => config::ControllerCfg::Adaptive,
        },
        gain_setting: match cell.gain_setting {
            GainSetting::Low => config::GainCfg::Low,
            GainSetting::High => config::GainCfg::High,
        },
        data_source: match cell.data_source {
            DataSource::Indirect => config::SourceCfg::Indirect,
            DataSource::Direct => config::SourceCfg::Direct,
            DataSource::Joint => config::SourceCfg::Joint,
        },
        epochs: cell.epochs,
        n_iterations: cell.n_iterations,
        seed: cell.seed,
        horizon: cell.horizon,
        tuning: config::TuningFile::from_tuning(tuning),
    }
}

fn cmd_aggregate(runs: &Path, out: &Path, group_by: &str) -> anyhow::Result<ExitCode> {
    let fields = parse_group_fields(group_by)?;
    let metrics = csvio::read_sweep_dir(runs)?;
    let groups = aggregate(&metrics, &fields).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    std::fs::create_dir_all(out)?;
    csvio::write_aggregate_csv(&out.join("aggregate.csv"), &groups)?;
    println!(
        "aggregated {} runs into {} groups -> {}",
        metrics.len(),
        groups.len(),
        out.join("aggregate.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot_data(aggregate_path: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    let groups = csvio::read_aggregate_csv(aggregate_path)?;
    if groups.is_empty() {
        return Err(ConfigError::Invalid("aggregate file has no groups".into()).into());
    }
    std::fs::create_dir_all(out)?;
    let files = csvio::write_plot_data(out, &groups)?;
    for f in &files {
        println!("wrote {}", out.join(f).display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(cfg: ConfigArgs, json: bool) -> anyhow::Result<ExitCode> {
    let file = config::load_run_file(cfg.config.as_deref(), &cfg.set)?;
    let (_, tuning) = file.validate()?;
    let results = verify::run_checks(&tuning);
    if json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        for r in &results {
            println!(
                "{} {} - {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.detail
            );
        }
    }
    if results.iter().all(|r| r.passed) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_VERIFY))
    }
}
