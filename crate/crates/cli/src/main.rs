use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rotq_cli::{cmd_bench, cmd_eval, cmd_extract, cmd_train, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(
    name = "rotq",
    version,
    about = "Rotation-augmented nearest-neighbour digit classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the CNN on the training split and write a checkpoint.
    Train(Common),
    /// Write the training split's emissions to a feature store.
    Extract(Common),
    /// Classify the test split with and without rotation episodes.
    Eval(Common),
    /// Train, extract and evaluate over a list of seeds.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the split, training and episode seeds together.
    #[arg(long)]
    seed: Option<u64>,
    /// oracle, all, or margin:<tau>.
    #[arg(long)]
    selection: Option<String>,
    /// Margin threshold; implies margin selection.
    #[arg(long)]
    tau: Option<f64>,
    /// raw or l2.
    #[arg(long)]
    norm: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated seed list (default 1,2,3).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

impl Common {
    fn into_config(self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        if let Some(sel) = &self.selection {
            cfg.set("selection", sel)?;
        }
        if let Some(tau) = self.tau {
            cfg.set("selection.tau", &tau.to_string())?;
        }
        if let Some(norm) = &self.norm {
            cfg.set("norm", norm)?;
            cfg.set("bench.norms", norm)?;
        }
        if let Some(out) = self.out {
            cfg.out = out;
        }
        if let Some(p) = self.checkpoint {
            cfg.checkpoint = Some(p);
        }
        if let Some(p) = self.store {
            cfg.store = Some(p);
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => cmd_train(&c.into_config()?).map(drop),
        Command::Extract(c) => cmd_extract(&c.into_config()?).map(drop),
        Command::Eval(c) => cmd_eval(&c.into_config()?).map(drop),
        Command::Bench(b) => {
            let mut cfg = b.common.into_config()?;
            if !b.seeds.is_empty() {
                cfg.bench_seeds = b.seeds;
            }
            cmd_bench(&cfg).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rotq: {e}");
            e.to_exit()
        }
    }
}
