//! `bgad` command-line front end.
//!
//! Settings come from, in increasing precedence: built-in defaults, the
//! `--config` file, `--set key=value` pairs, then the dedicated flags.
//! Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use bgad_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "bgad", version, about = "Boundary-guided anomaly detection on feature maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Train one flow per level; with a test manifest also score and evaluate.
    Train,
    /// Write image scores and anomaly maps for the test manifest.
    Score,
    /// Compute image AUROC, pixel AUROC and PRO from written scores and maps.
    Eval,
    /// Synthesize cut-and-paste anomalies from the train manifest.
    Augment,
    /// Report both sides of the margin-error bound on the train manifest.
    BoundReport,
    /// Write synthetic train and test feature sets with manifests.
    Synth,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Score => "score",
            Command::Eval => "eval",
            Command::Augment => "augment",
            Command::BoundReport => "bound-report",
            Command::Synth => "synth",
        }
    }
}

#[derive(Args, Debug)]
struct Flags {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// The manifest the command reads: train_manifest for train, augment and
    /// bound-report; test_manifest for score and eval.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Image score CSV read by eval.
    #[arg(long, global = true)]
    scores: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn build_config(command: Command, flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for pair in &flags.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got '{pair}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = flags.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = flags.threads {
        cfg.train.threads = t;
    }
    if let Some(o) = &flags.out {
        cfg.out = o.clone();
    }
    if let Some(m) = &flags.manifest {
        match command {
            Command::Score | Command::Eval => cfg.test_manifest = Some(m.clone()),
            _ => cfg.train_manifest = Some(m.clone()),
        }
    }
    if let Some(c) = &flags.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(s) = &flags.scores {
        cfg.scores = Some(s.clone());
    }
    Ok(cfg)
}

fn execute(command: Command, cfg: &RunConfig) -> Result<String> {
    use commands::*;
    Ok(match command {
        Command::Train => {
            let s = cmd_train(cfg)?;
            let mut msg = format!(
                "trained {} level(s) for {} epochs; checkpoint at {}\n",
                s.checkpoint.models.len(),
                s.checkpoint.epoch,
                cfg.checkpoint_dir().display()
            );
            if let Some(m) = s.metrics {
                msg.push_str(&m.to_text());
            }
            msg
        }
        Command::Score => {
            let r = cmd_score(cfg)?;
            format!(
                "scored {} sample(s) into {}\n",
                r.ids.len(),
                cfg.scores_path().display()
            )
        }
        Command::Eval => cmd_eval(cfg)?.to_text(),
        Command::Augment => {
            let m = cmd_augment(cfg)?;
            format!(
                "wrote {} record(s) to {}\n",
                m.records.len(),
                cfg.out.join(AUGMENT_MANIFEST).display()
            )
        }
        Command::BoundReport => cmd_bound_report(cfg)?.to_text(),
        Command::Synth => {
            let (a, b) = cmd_synth(cfg)?;
            format!("wrote {} and {}\n", a.display(), b.display())
        }
    })
}

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = build_config(cli.command, &cli.flags).and_then(|cfg| execute(cli.command, &cfg));
    match result {
        Ok(msg) => {
            print!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("bgad {}: {}", cli.command.name(), describe(&e));
            exit_code(&e)
        }
    }
}

fn describe(e: &Error) -> String {
    match e {
        Error::Manifest(items) => {
            let mut s = format!("{} problem(s)", items.len());
            for i in items {
                s.push_str("\n  - ");
                s.push_str(i);
            }
            s
        }
        other => other.to_string(),
    }
}
