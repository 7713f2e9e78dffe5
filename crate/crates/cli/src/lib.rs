//! Command-line driver for the n-gram transformer: `train`, `eval`,
//! `decode`, `grad-check` and `bench`.
//!
//! Exit codes: 0 success, 1 gradient check failed or runtime failure,
//! 2 invalid configuration, arguments or inputs, 3 training diverged.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{RunConfig, Settings};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "ngram",
    version,
    about = "Train, evaluate and benchmark n-gram masked transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint.bin, loss.csv, dev_evals.csv and train_summary.json.
    Train(Common),
    /// Evaluate a checkpoint and write eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Greedy-decode one source sequence.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Source token ids, separated by spaces or commas.
        #[arg(long, allow_hyphen_values = true)]
        source: String,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck(Common),
    /// Time incremental decoding with ring-buffer and full caches.
    Bench(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c) | Command::GradCheck(c) | Command::Bench(c) => c,
            Command::Eval { common, .. } | Command::Decode { common, .. } => common,
        }
    }
}

/// Configuration from `--config`, then `--set` overrides, then `--seed`.
pub fn load_config(common: &Common) -> Result<(RunConfig, Settings), CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    let settings = cfg.resolve()?;
    Ok((cfg, settings))
}

fn execute(cli: &Cli) -> Result<String, CliError> {
    let common = cli.command.common();
    let (cfg, settings) = load_config(common)?;
    let out = &common.out;
    match &cli.command {
        Command::Train(_) => {
            let s = commands::cmd_train(&cfg, &settings, out)?;
            Ok(format!(
                "trained {} steps: loss {:.4} -> {:.4}; best dev at step {}: accuracy {:.4}, log-perplexity {:.4}\nwrote {}",
                s.steps,
                s.first_loss,
                s.final_loss,
                s.best_step,
                s.best_dev.token_accuracy,
                s.best_dev.log_perplexity,
                out.display()
            ))
        }
        Command::Eval { checkpoint, .. } => {
            let r = commands::cmd_eval(&settings, checkpoint, out)?;
            Ok(commands::format_eval_table(&r))
        }
        Command::Decode {
            checkpoint, source, ..
        } => {
            let tokens = commands::parse_tokens(source)?;
            let d = commands::cmd_decode(&settings, checkpoint, &tokens)?;
            let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            let mut text = format!("output   {}", join(&d.output));
            if let Some(e) = &d.expected {
                text.push_str(&format!("\nexpected {}", join(e)));
            }
            Ok(text)
        }
        Command::GradCheck(_) => {
            let r = commands::cmd_grad_check(&settings)?;
            Ok(format!(
                "gradient check passed: {} samples, max relative error {:.3e} at {}[{}]",
                r.samples, r.max_relative_error, r.worst_parameter, r.worst_index
            ))
        }
        Command::Bench(_) => {
            let r = bench::cmd_bench(&settings, out)?;
            let mut text = String::from("t\tn\tpath\tpeak_cache\tattn_growth\tattn_speedup\n");
            for s in &r.summary {
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{:.3}\t{:.3}\n",
                    s.t, s.n, s.path, s.peak_cache_entries, s.attn_growth, s.attn_speedup
                ));
            }
            Ok(text)
        }
    }
}

/// Parse `args` (program name first), run the subcommand and return the
/// exit code. Results go to stdout and errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(text) => {
            println!("{}", text.trim_end());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
