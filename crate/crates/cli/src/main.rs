use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mirl_cli::{commands, RunConfig};

#[derive(Parser)]
#[command(name = "mirl", version, about = "Masked inverse reward learning experiments")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lambda=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training objective: masked_irl, explicit_mask or lc_rl.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Annotation provider: oracle, mock, replay or live.
    #[arg(long, global = true)]
    provider: Option<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory with banks and raw datasets (defaults to the output directory).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate trajectory banks and raw demonstration datasets.
    GenData,
    /// Attach masks, clarifying ambiguous instructions first.
    Annotate,
    /// Train a reward model.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the trained model on the held-out bank.
    Eval {
        /// Score a stand-in reward instead of the checkpoint. Only `gt` is known.
        #[arg(long, value_name = "KIND")]
        stub: Option<String>,
    },
    /// Merge evaluation records from several runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
}

impl Cli {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let quoted = |k: &str, v: &str| format!("{k}=\"{v}\"");
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        if let Some(m) = &self.mode {
            out.push(quoted("train.mode", m));
        }
        if let Some(p) = &self.provider {
            out.push(quoted("annotation.provider", p));
        }
        if let Some(o) = &self.out {
            out.push(quoted("out", &o.to_string_lossy()));
        }
        if let Some(d) = &self.data {
            out.push(quoted("data", &d.to_string_lossy()));
        }
        out.extend(self.set.iter().cloned());
        out
    }
}

fn run(cli: Cli) -> Result<(), mirl_cli::CliError> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides())?;
    match cli.command {
        Command::GenData => commands::gen_data(&config),
        Command::Annotate => commands::annotate(&config),
        Command::Train { resume } => commands::train(&config, resume),
        Command::Eval { stub } => {
            let gt = match stub.as_deref() {
                None => false,
                Some("gt") => true,
                Some(other) => return Err(mirl_cli::CliError::Config(format!("unknown stub {other:?}"))),
            };
            commands::eval(&config, gt).map(|_| ())
        }
        Command::Report { inputs } => commands::report(&inputs, &config.out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
