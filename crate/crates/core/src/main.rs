use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use affect_core::config::{env_overrides, parse_value};
use affect_core::dataio::SplitName;
use affect_core::harness;
use affect_core::types::Task;
use affect_core::{Error, ExperimentConfig, Result};

/// Affect recognition experiments: valence/arousal regression, expression
/// ensembles and action unit detection.
#[derive(Parser)]
#[command(name = "affect", version, after_help = AFTER_HELP)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Task selector; picks the default config when no file is given.
    #[arg(long, global = true)]
    task: Option<Task>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Compute device; only `cpu` is supported.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Use generated data instead of `data_root`.
    #[arg(long, global = true)]
    synthetic: bool,
    /// Extra config override, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

const AFTER_HELP: &str = "Config keys can also be overridden with AFFECT_<KEY>=<value> environment \
variables. Precedence: file < environment < --set < dedicated flags.\n\
Exit codes: 0 success, 2 config or checkpoint error, 3 data error, 4 training failure.";

#[derive(Subcommand)]
enum Command {
    /// Train the configured task and write checkpoints plus a run manifest.
    Train,
    /// Evaluate checkpoints on a split and persist the metric report.
    Eval(ModelArgs),
    /// Write per-frame predictions for a split as JSON.
    Predict(ModelArgs),
    /// Write per-video prediction files for a split.
    Export(ModelArgs),
    /// Evaluate the config once per value of one key.
    Sweep {
        /// Config key to vary.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
    /// Write generated train and validation splits in the on-disk layout.
    Synth,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Checkpoint file, ensemble manifest or run directory; repeatable for ensembles.
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "val")]
    split: SplitName,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = env_overrides();
    for raw in &cli.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| Error::config(raw.as_str(), "expected key=value"))?;
        overrides.push((k.trim().to_string(), parse_value(v.trim())));
    }
    if let Some(task) = cli.task {
        overrides.push(("task".into(), toml::Value::String(task.to_string())));
    }
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::config("seed", "must fit in a signed 64-bit integer"))?;
        overrides.push(("seed".into(), toml::Value::Integer(seed)));
    }
    if cli.synthetic {
        overrides.push(("synthetic".into(), toml::Value::Boolean(true)));
    }
    match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ExperimentConfig::from_toml_str(&text, &overrides)
        }
        None => {
            let task = cli
                .task
                .ok_or_else(|| Error::config("task", "pass --task or --config"))?;
            ExperimentConfig::from_toml_str(&format!("task = \"{task}\"\n"), &overrides)
        }
    }
}

/// Default output location for model commands: the run directory holding
/// the first checkpoint.
fn model_out_dir(cli: &Cli, args: &ModelArgs) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    let first = &args.checkpoints[0];
    if first.is_dir() {
        return first.clone();
    }
    let parent = first.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(name) if name == "checkpoints" => parent.parent().unwrap_or(Path::new(".")).to_path_buf(),
        _ => parent.to_path_buf(),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.device != "cpu" {
        return Err(Error::config("device", format!("unsupported device `{}`", cli.device)));
    }
    match &cli.command {
        Command::Train => {
            let config = build_config(cli)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(config.task.as_str()));
            let manifest = harness::run_train(&config, &out)?;
            print!("{}", manifest.to_text());
            println!("run written to {}", out.display());
        }
        Command::Eval(args) => {
            let out = model_out_dir(cli, args);
            let report = harness::run_eval(&args.checkpoints, args.split, cli.task, Some(&out))?;
            print!("{}", report.to_text());
        }
        Command::Predict(args) => {
            let out = model_out_dir(cli, args);
            let path = harness::run_predict(&args.checkpoints, args.split, cli.task, &out)?;
            println!("predictions written to {}", path.display());
        }
        Command::Export(args) => {
            let out = cli.out.clone().unwrap_or_else(|| model_out_dir(cli, args).join("export"));
            let files = harness::run_export(&args.checkpoints, args.split, cli.task, &out)?;
            println!("{} files written to {}", files.len(), out.display());
        }
        Command::Sweep { param, values } => {
            let config = build_config(cli)?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-sweep-{param}", config.task)));
            let values: Vec<toml::Value> = values.iter().map(|v| parse_value(v)).collect();
            let rows = harness::run_sweep(&config, param, &values, &out)?;
            println!("{param}\theadline");
            for r in rows {
                println!("{}\t{}", r.value, r.report.headline());
            }
        }
        Command::Synth => {
            let config = build_config(cli)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data").join(config.task.as_str()));
            harness::run_synth(&config, &out)?;
            println!("dataset written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
