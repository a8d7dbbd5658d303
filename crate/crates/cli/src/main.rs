use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use unlearnlab::error::{Error, Result};
use unlearnlab::judge::Judge;
use unlearnlab::runner::{self, preset_for, RunConfig, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "unlearnlab", version, about = "Desk-scale LLM unlearning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config merged over the subcommand's preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Judge backend for `eval`.
    #[arg(long, global = true, value_enum)]
    judge: Option<JudgeMode>,
    /// Input checkpoint; repeat (or pass a directory) for `eval`.
    #[arg(long, global = true)]
    checkpoint: Vec<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic QA corpus.
    GenCorpus,
    /// Train on every split; the final checkpoint is the unlearning reference.
    Finetune,
    /// Train on retain and holdout only.
    Retrain,
    /// Unlearn the forget split starting from --checkpoint.
    Unlearn,
    /// Evaluate checkpoints into metrics and sweep.csv.
    Eval,
    /// One-step kernel decomposition check.
    Dynamics,
    /// Likelihood band traces under unlearning from --checkpoint.
    Squeeze,
    /// Unlearning runs over a hyperparameter grid from --checkpoint.
    Sweep,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum JudgeMode {
    Mock,
    Http,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Finetune => "finetune",
            Command::Retrain => "retrain",
            Command::Unlearn => "unlearn",
            Command::Eval => "eval",
            Command::Dynamics => "dynamics",
            Command::Squeeze => "squeeze",
            Command::Sweep => "sweep",
        }
    }
}

fn one_checkpoint(cli: &Cli) -> Result<&PathBuf> {
    match cli.checkpoint.as_slice() {
        [p] => Ok(p),
        [] => Err(Error::Config(format!("{} needs --checkpoint", cli.command.name()))),
        _ => Err(Error::Config(format!("{} takes a single --checkpoint", cli.command.name()))),
    }
}

fn optional_checkpoint(cli: &Cli) -> Result<Option<&PathBuf>> {
    match cli.checkpoint.as_slice() {
        [] => Ok(None),
        _ => one_checkpoint(cli).map(Some),
    }
}

fn run(cli: &Cli) -> Result<RunManifest> {
    let preset = preset_for(cli.command.name());
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(preset, p)?,
        None => RunConfig::preset(preset),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.out_dir = cli.out.clone();
    let judge = match cli.judge {
        Some(JudgeMode::Http) => {
            cfg.judge.endpoint.validate()?;
            Some(Judge::Http(cfg.judge.endpoint.clone()))
        }
        Some(JudgeMode::Mock) => Some(Judge::Mock),
        None => None,
    };
    if judge.is_some() && cli.command != Command::Eval {
        return Err(Error::Config("--judge applies to eval only".into()));
    }
    match cli.command {
        Command::GenCorpus => runner::run_gen_corpus(&cfg),
        Command::Finetune => runner::run_finetune(&cfg, optional_checkpoint(cli)?.map(|p| p.as_path())),
        Command::Retrain => runner::run_retrain(&cfg),
        Command::Unlearn => runner::run_unlearn(&cfg, one_checkpoint(cli)?),
        Command::Eval => {
            if cli.checkpoint.is_empty() {
                return Err(Error::Config("eval needs --checkpoint".into()));
            }
            runner::run_eval(&cfg, &cli.checkpoint, judge.as_ref())
        }
        Command::Dynamics => runner::run_dynamics(&cfg, optional_checkpoint(cli)?.map(|p| p.as_path())),
        Command::Squeeze => runner::run_squeeze(&cfg, one_checkpoint(cli)?).map(|(m, _)| m),
        Command::Sweep => runner::run_sweep(&cfg, one_checkpoint(cli)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(m) => {
            println!("{}: wrote {}", m.command, cli.out.join(runner::MANIFEST_FILE).display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
