use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use racoln::config::RunConfig;
use racoln::corpus::StyleLabel;
use racoln::eval::embed::Targets;
use racoln::pipeline::{self, EvalRequest};
use racoln::Result;

#[derive(Parser, Debug)]
#[command(name = "racoln", version, about = "Text style transfer with reverse attention and conditional layer norm")]
struct Cli {
    /// TOML run configuration; unspecified keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from a built-in configuration instead of the defaults.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Overrides `paths.data_dir`.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Overrides `paths.work_dir`.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Published hyperparameters.
    Paper,
    /// Small dimensions for a single CPU core.
    Desk,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the vocabulary, pretrain the marker and classifiers, fit the language model.
    Pretrain,
    /// Train the generator.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_reverse_attention: bool,
        #[arg(long)]
        no_stylizer: bool,
        #[arg(long)]
        no_content_loss: bool,
    },
    /// Rewrite every line of a file in the target style.
    Transfer {
        #[arg(long, value_enum)]
        target: Target,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<input>.transferred.txt`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score transferred outputs against their inputs.
    Eval {
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long, value_enum)]
        target: Target,
        /// `input<TAB>reference` lines aligned with the inputs.
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Evaluation classifier checkpoint.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Also write the key=value report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write content and style vectors of a corpus split as TSV.
    ExportEmb {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        output: PathBuf,
        /// One row per style instead of one towards the opposite style.
        #[arg(long)]
        both_targets: bool,
    },
    /// Generate the templated two-style corpus.
    MakeSynthetic {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Target {
    Pos,
    Neg,
}

impl From<Target> for StyleLabel {
    fn from(t: Target) -> Self {
        match t {
            Target::Pos => StyleLabel::Positive,
            Target::Neg => StyleLabel::Negative,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(Preset::Desk)) => RunConfig::desk(),
        (None, _) => RunConfig::default(),
    };
    if cli.config.is_none() {
        cfg.apply_env()?;
    }
    if let Some(d) = &cli.data_dir {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &cli.work_dir {
        cfg.paths.work_dir = d.clone();
    }
    Ok(cfg)
}

fn write_report(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| racoln::Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Pretrain => {
            let s = pipeline::cmd_pretrain(&cfg)?;
            println!("vocabulary: {} types", s.vocab_size);
            for (role, path, acc) in &s.classifiers {
                println!("{role}: {} (held-out accuracy {acc:.2}%)", path.display());
            }
            println!("language model: {}", s.lm.display());
        }
        Command::Train {
            epochs,
            no_reverse_attention,
            no_stylizer,
            no_content_loss,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.ablation.no_reverse_attention |= no_reverse_attention;
            cfg.ablation.no_stylizer |= no_stylizer;
            cfg.ablation.no_content_loss |= no_content_loss;
            let r = pipeline::cmd_train(&cfg)?;
            if let Some(last) = r.epoch_losses.last() {
                println!(
                    "trained {} steps; final epoch total loss {:.4}",
                    r.steps, last.total
                );
            }
        }
        Command::Transfer { target, input, output } => {
            let path = pipeline::cmd_transfer(&cfg, &input, target.into(), output.as_deref())?;
            println!("{}", path.display());
        }
        Command::Eval {
            inputs,
            outputs,
            target,
            references,
            lm,
            classifier,
            report,
        } => {
            let req = EvalRequest {
                inputs,
                outputs,
                target: target.into(),
                references,
                lm,
                classifier,
            };
            let r = pipeline::cmd_eval(&cfg, &req)?;
            print!("{}\n{}", r.to_table(), r.to_key_values());
            if let Some(path) = report {
                write_report(&path, &r.to_key_values())?;
            }
        }
        Command::ExportEmb {
            split,
            output,
            both_targets,
        } => {
            let targets = if both_targets { Targets::Both } else { Targets::Flipped };
            let n = pipeline::cmd_export_embeddings(&cfg, &split, &output, targets)?;
            println!("{n} rows written to {}", output.display());
        }
        Command::MakeSynthetic { seed, size, out } => {
            for p in pipeline::cmd_make_synthetic(seed, size, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
