//! `deim` command-line front end.
//!
//! ```text
//! deim prep-vocab --train FILE --out vocab.txt [--task snli] [--min-count 1]
//! deim train   [--config FILE] [--out DIR] [--KEY VALUE ...]
//! deim eval    --checkpoint DIR --data FILE [--task T] [--include-no-answer]
//! deim predict --checkpoint DIR --data FILE [--output FILE]
//! deim ablate  [--config FILE] [--out DIR] [--seeds 1,2,3] [--KEY VALUE ...]
//! ```
//!
//! Any configuration key can be overridden as `--key value` (`--flag` alone
//! means `true`). Without `--out`, runs go under `$DEIM_OUTPUT_ROOT` (default
//! `runs`). Exit codes: 0 success, 1 usage or configuration, 2 data,
//! 3 numerical abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deim::checkpoint::Checkpoint;
use deim::data::{build_vocab, read_dataset};
use deim::trainer::{ablation_matrix, ablation_text, evaluate, load_corpus, load_split, model_from_checkpoint, predict_lines, train};
use deim::{Error, Task, TrainConfig};

#[derive(Parser)]
#[command(name = "deim", version, about = "Sentence-pair matching: train, evaluate, predict, ablate")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file from a training split.
    PrepVocab {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "snli")]
        task: Task,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
    },
    /// Train a model and write checkpoints and history.
    Train(RunArgs),
    /// Score a labelled split with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Must match the checkpoint's task when given.
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        include_no_answer: bool,
    },
    /// Write per-pair predictions.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and evaluate the seven ablation variants.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `--key value` configuration overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Diverged { .. } | Error::Numerical { .. } => 3,
        _ => 2,
    }
}

fn parse_overrides(tokens: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let Some(flag) = tokens[i].strip_prefix("--") else {
            return Err(Failure::Usage(format!("expected `--key value`, found `{}`", tokens[i])));
        };
        if let Some((k, v)) = flag.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else if tokens.get(i + 1).is_some_and(|next| !next.starts_with("--")) {
            out.push((flag.to_string(), tokens[i + 1].clone()));
            i += 2;
        } else {
            out.push((flag.to_string(), "true".into()));
            i += 1;
        }
    }
    Ok(out)
}

/// Resolved configuration plus the output directory.
fn resolve(run: &RunArgs, kind: &str) -> CliResult<(TrainConfig, PathBuf)> {
    let mut config = run.config.clone();
    let mut out = run.out.clone();
    let mut overrides = Vec::new();
    for (k, v) in parse_overrides(&run.overrides)? {
        match k.as_str() {
            "config" => config = Some(v.into()),
            "out" => out = Some(v.into()),
            _ => overrides.push((k, v)),
        }
    }
    let mut cfg = match &config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    let dir = out.unwrap_or_else(|| {
        let root = std::env::var_os("DEIM_OUTPUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        let fp = cfg.fingerprint();
        let hash = fp.rsplit('@').next().unwrap_or_default();
        root.join(format!("{kind}-{}-{}-seed{}-{hash}", cfg.task, cfg.ablation.fingerprint(), cfg.seed))
    });
    Ok((cfg, dir))
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    Ok(())
}

fn cmd_train(run: &RunArgs) -> CliResult {
    let (cfg, dir) = resolve(run, "train")?;
    create_dir(&dir)?;
    write(&dir.join("config.txt"), &cfg.to_text())?;
    let corpus = load_corpus(&cfg)?;
    log::info!("{} train pairs, {} dev pairs, vocab {}", corpus.train.len(), corpus.dev.len(), corpus.vocab.len());
    let outcome = train(&cfg, &corpus)?;
    write(&dir.join("history.txt"), &outcome.history_text())?;
    outcome.best.save(&dir.join("checkpoint"))?;
    outcome.last.save(&dir.join("last"))?;
    let model = model_from_checkpoint(&outcome.best)?;
    let split = if corpus.dev.is_empty() { &corpus.train } else { &corpus.dev };
    let report = evaluate(&model, split, &cfg)?;
    println!("output={}", dir.display());
    println!("epochs={} best_epoch={} stopped_early={}", outcome.history.len(), outcome.best.epoch, outcome.stopped_early);
    println!("split={}", if corpus.dev.is_empty() { "train" } else { "dev" });
    println!("{report}");
    Ok(())
}

fn load_checkpoint(dir: &Path) -> CliResult<Checkpoint> {
    if !dir.join("manifest.txt").is_file() {
        return Err(Failure::Usage(format!("no checkpoint at {}", dir.display())));
    }
    Ok(Checkpoint::load(dir)?)
}

fn cmd_eval(checkpoint: &Path, data: &Path, task: Option<Task>, include_no_answer: bool) -> CliResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if let Some(t) = task {
        if t != cfg.task {
            return Err(Failure::Usage(format!("checkpoint was trained for {}, not {t}", cfg.task)));
        }
    }
    cfg.include_no_answer |= include_no_answer;
    let model = model_from_checkpoint(&ckpt)?;
    let pairs = load_split(data, &cfg, &model.vocab, 0)?;
    println!("{}", evaluate(&model, &pairs, &cfg)?);
    Ok(())
}

fn cmd_predict(checkpoint: &Path, data: &Path, output: Option<&Path>) -> CliResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = model_from_checkpoint(&ckpt)?;
    let pairs = load_split(data, &ckpt.config, &model.vocab, 0)?;
    let mut text = predict_lines(&model, &pairs, ckpt.config.task)?.join("\n");
    text.push('\n');
    match output {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_prep_vocab(train: &Path, out: &Path, task: Task, min_count: usize) -> CliResult {
    let ds = read_dataset(train, task)?;
    let vocab = build_vocab(&ds.pairs, min_count);
    vocab.save(out)?;
    println!("tokens={} pairs={} output={}", vocab.len(), ds.pairs.len(), out.display());
    Ok(())
}

fn cmd_ablate(run: &RunArgs, seeds: &[u64]) -> CliResult {
    let (cfg, dir) = resolve(run, "ablate")?;
    if cfg.ablation.fingerprint() != "full" {
        return Err(Failure::Usage("ablate varies the ablation flags itself; leave them unset".into()));
    }
    create_dir(&dir)?;
    write(&dir.join("config.txt"), &cfg.to_text())?;
    let corpus = load_corpus(&cfg)?;
    let text = ablation_text(&ablation_matrix(&cfg, &corpus, seeds)?);
    write(&dir.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::PrepVocab {
            train,
            out,
            task,
            min_count,
        } => cmd_prep_vocab(train, out, *task, *min_count),
        Command::Train(run) => cmd_train(run),
        Command::Eval {
            checkpoint,
            data,
            task,
            include_no_answer,
        } => cmd_eval(checkpoint, data, *task, *include_no_answer),
        Command::Predict { checkpoint, data, output } => cmd_predict(checkpoint, data, output.as_deref()),
        Command::Ablate { run, seeds } => cmd_ablate(run, seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
