//! Command-line entry points: train, generate, eval, ablate, inspect.
//!
//! Exit codes: 0 success, 2 user error (bad config, unreadable input,
//! malformed checkpoint), 3 numeric failure (aborted training step or
//! generation).

use clap::{Parser, Subcommand};
use gpvlm::checkpoint::load_checkpoint;
use gpvlm::config::RunConfig;
use gpvlm::data::{detokenize, tokenize};
use gpvlm::pipeline::{
    describe_checkpoint, generate_once, instance_from_checkpoint, run_ablate, run_eval, run_train,
    PipelineError,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gpvlm", version, about = "GP-latent language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model named in the config and write checkpoints plus a
    /// JSON-lines training log.
    Train {
        #[arg(long)]
        config: String,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Generate a continuation from a checkpoint and a prompt file.
    Generate {
        #[arg(long)]
        ckpt: String,
        /// Prompt file (raw bytes).
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        lgen: usize,
        /// Latent mode override: ar, nonar, or tf.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        temperature: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate checkpoints over a generation-length grid and emit
    /// diagnostics records.
    Eval {
        /// Checkpoint path (repeatable).
        #[arg(long, required = true)]
        ckpt: Vec<String>,
        /// Prompt file, one prompt per line.
        #[arg(long)]
        prompts: String,
        /// Comma-separated generation lengths.
        #[arg(long, default_value = "32,64,128")]
        lgen: String,
        /// Transformer checkpoint used as the scoring judge; defaults to the
        /// first transformer among --ckpt.
        #[arg(long)]
        judge: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Train the three controlled configurations on one data stream and
    /// emit the comparison report.
    Ablate {
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Print a checkpoint summary.
    Inspect {
        #[arg(long)]
        ckpt: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn read_prompt_file(path: &str) -> Result<Vec<u8>, PipelineError> {
    std::fs::read(path)
        .map_err(|source| PipelineError::Io { path: path.to_string(), source })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = run_train(&cfg, &out)?;
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("log: {} ({} rows)", outcome.log.display(), outcome.final_rows);
            Ok(())
        }
        Command::Generate { ckpt, prompt, lgen, mode, temperature, seed, out } => {
            if lgen == 0 {
                return Err(PipelineError::User("--lgen must be >= 1".into()));
            }
            let bytes = read_prompt_file(&prompt)?;
            if bytes.is_empty() {
                return Err(PipelineError::User(format!("prompt file {prompt} is empty")));
            }
            let ck = load_checkpoint(&ckpt)?;
            let (cfg, instance) = instance_from_checkpoint(&ck, mode.as_deref())?;
            let prompt_tokens = tokenize(&bytes);
            let temp = temperature.unwrap_or(cfg.temperature);
            let s = seed.unwrap_or(cfg.seed);
            let (tokens, _) = generate_once(&cfg, &instance, &prompt_tokens, lgen, temp, s)?;
            let out_bytes = detokenize(&tokens);
            match out {
                Some(p) => {
                    std::fs::write(&p, &out_bytes).map_err(|source| PipelineError::Io {
                        path: p.display().to_string(),
                        source,
                    })?;
                }
                None => {
                    use std::io::Write;
                    std::io::stdout().write_all(&out_bytes).map_err(|source| {
                        PipelineError::Io { path: "<stdout>".into(), source }
                    })?;
                }
            }
            Ok(())
        }
        Command::Eval { ckpt, prompts, lgen, judge, seed, out } => {
            let text = read_prompt_file(&prompts)?;
            let prompt_list: Vec<Vec<u32>> = text
                .split(|&b| b == b'\n')
                .filter(|line| !line.is_empty())
                .map(tokenize)
                .collect();
            if prompt_list.is_empty() {
                return Err(PipelineError::User(format!("no prompts in {prompts}")));
            }
            let grid: Vec<usize> = lgen
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| PipelineError::User(format!("bad --lgen entry {s:?}")))
                })
                .collect::<Result<_, _>>()?;
            let seed = seed.unwrap_or(0);
            let out_path = out.join("eval.jsonl");
            let records =
                run_eval(&ckpt, &prompt_list, &grid, judge.as_deref(), seed, &out_path)?;
            println!("{} records written to {}", records.len(), out_path.display());
            Ok(())
        }
        Command::Ablate { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = run_ablate(&cfg, &out)?;
            println!("report: {}", outcome.report_md.display());
            println!("records: {}", outcome.report_jsonl.display());
            Ok(())
        }
        Command::Inspect { ckpt } => {
            let ck = load_checkpoint(Path::new(&ckpt))?;
            print!("{}", describe_checkpoint(&ck));
            Ok(())
        }
    }
}
