//! Command-line surface of the `stlm` binary. Every subcommand is a plain
//! function over parsed arguments, so the binary stays a thin shell and the
//! commands can be driven from tests.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::audit::{count_params, render_report, ReportFormat};
use crate::config::{load_config, RunConfig};
use crate::data::{load_corpus, load_documents, Checkpoint, MetricsLogger, Trainer};
use crate::error::{config_err, file_err, Result};
use crate::eval::{byte_perplexity, load_mc_items, score_mc, EvalReport, ModelScorer};
use crate::generate::{generate, Sampling};
use crate::model::LanguageModel;
use crate::tokenizer::{train_bpe, MergeTable};

#[derive(Debug, Parser)]
#[command(name = "stlm", version, about = "Super tiny language model laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a byte-level BPE merge table from a corpus.
    TokenizerTrain(TokenizerTrainArgs),
    /// Train a model as described by the run configuration.
    Train(TrainArgs),
    /// Byte-level perplexity of a checkpoint on a text file.
    Eval(EvalArgs),
    /// Multiple-choice accuracy of a checkpoint on a JSONL item file.
    EvalMc(EvalMcArgs),
    /// Parameter breakdown of a configuration, without building the model.
    Audit(AuditArgs),
    /// Continue a prompt with a trained checkpoint.
    Generate(GenerateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TokenizerTrain(_) => "tokenizer-train",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::EvalMc(_) => "eval-mc",
            Command::Audit(_) => "audit",
            Command::Generate(_) => "generate",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; omitted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `model.dropout=0`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = load_config(self.config.as_deref(), &self.overrides)?;
        cfg.apply_env()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TokenizerTrainArgs {
    /// Text file or directory of documents.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Tokenizer vocabulary size (bytes plus merges), without the separator.
    #[arg(long, default_value_t = 50256)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from a checkpoint; its model, merges and schedule are used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in this invocation.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub text: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalMcArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL with `context`, `options` and `gold` per line.
    #[arg(long)]
    pub items: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[arg(long, default_value_t = 200)]
    pub max_new_bytes: usize,
    /// Zero selects greedy decoding.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs a parsed command, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::TokenizerTrain(a) => tokenizer_train(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::EvalMc(a) => eval_mc(a, out),
        Command::Audit(a) => audit(a, out),
        Command::Generate(a) => generate_cmd(a, out),
    }
}

fn tokenizer_train(a: &TokenizerTrainArgs, out: &mut dyn Write) -> Result<()> {
    let text = load_documents(&a.corpus)?.concat();
    let merges = train_bpe(&text, a.vocab_size)?;
    merges.save(&a.out)?;
    writeln!(
        out,
        "wrote {} merges (vocabulary {}, model vocab_size {}) to {}",
        merges.merges().len(),
        merges.vocab_size(),
        merges.vocab_size() + 1,
        a.out.display()
    )?;
    Ok(())
}

fn load_merges(path: &Path) -> Result<MergeTable> {
    if path.as_os_str().is_empty() {
        Ok(MergeTable::byte_level())
    } else {
        MergeTable::load(path)
    }
}

fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt-{iteration:06}.stlm"))
}

/// Name of the checkpoint rewritten after every save.
pub const LATEST_CHECKPOINT: &str = "latest.stlm";

fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<()> {
    let ckpt = Checkpoint::from_trainer(trainer);
    ckpt.save(checkpoint_path(dir, trainer.iteration))?;
    ckpt.save(dir.join(LATEST_CHECKPOINT))
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.config.resolve()?;
    let mut trainer = match &a.resume {
        Some(path) => Checkpoint::load(path)?.into_trainer()?,
        None => {
            let merges = load_merges(&cfg.paths.merges)?;
            let model = LanguageModel::new(cfg.model.clone(), cfg.bytepool().cloned(), cfg.train.seed)?;
            Trainer::new(model, merges, cfg.train.clone())?
        }
    };
    let corpus = load_corpus(&cfg.paths.corpus, &trainer.merges, trainer.config.val_fraction)?;
    let dir = &cfg.paths.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(file_err(dir))?;
    let dump = dir.join("config.toml");
    std::fs::write(&dump, cfg.dump()?).map_err(file_err(&dump))?;
    let mut logger = match &a.resume {
        Some(_) => MetricsLogger::append(&cfg.paths.metrics)?,
        None => MetricsLogger::create(&cfg.paths.metrics)?,
    };

    let total = trainer.config.total_iters;
    let budget = a.max_steps.unwrap_or(usize::MAX);
    let mut done = 0;
    while trainer.iteration < total && done < budget {
        let mut m = trainer.step(&corpus.train)?;
        done += 1;
        let every = trainer.config.eval_every;
        let last = trainer.iteration == total || done == budget;
        if !corpus.val.is_empty() && ((every > 0 && trainer.iteration % every == 0) || last) {
            m.val_byte_ppl = Some(trainer.evaluate(&corpus.val)?);
        }
        logger.log(&m)?;
        let ce = trainer.config.checkpoint_every;
        if ce > 0 && trainer.iteration % ce == 0 {
            save_checkpoint(&trainer, dir)?;
        }
    }
    save_checkpoint(&trainer, dir)?;
    writeln!(
        out,
        "trained to step {} of {}; checkpoint {}",
        trainer.iteration,
        total,
        dir.join(LATEST_CHECKPOINT).display()
    )?;
    Ok(())
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.build_model()?;
    let text = std::fs::read(&a.text).map_err(file_err(&a.text))?;
    let scorer = ModelScorer::new(&model, &ckpt.merges)?;
    let report = EvalReport {
        model: a.checkpoint.display().to_string(),
        byte_perplexity: Some(byte_perplexity(&scorer, &text)?),
        n_bytes: Some(text.len()),
        dataset: Some(a.text.display().to_string()),
        accuracy: None,
        accuracy_normalized: None,
        n_items: None,
    };
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

fn eval_mc(a: &EvalMcArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.build_model()?;
    let items = load_mc_items(&a.items)?;
    let scorer = ModelScorer::new(&model, &ckpt.merges)?;
    let result = score_mc(&scorer, &items)?;
    let report = EvalReport {
        model: a.checkpoint.display().to_string(),
        byte_perplexity: None,
        n_bytes: None,
        dataset: Some(a.items.display().to_string()),
        accuracy: Some(result.accuracy),
        accuracy_normalized: Some(result.accuracy_normalized),
        n_items: Some(result.n_items),
    };
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

fn audit(a: &AuditArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.config.resolve()?;
    let report = count_params(&cfg.model, cfg.bytepool())?;
    let format = if a.json { ReportFormat::Json } else { ReportFormat::Text };
    writeln!(out, "{}", render_report(&report, format))?;
    Ok(())
}

fn generate_cmd(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    if a.max_new_bytes == 0 {
        return Err(config_err("--max-new-bytes must be positive"));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.build_model()?;
    let sampling = Sampling::from_temperature(a.temperature)?;
    let bytes = generate(&model, &ckpt.merges, a.prompt.as_bytes(), a.max_new_bytes, sampling, a.seed)?;
    out.write_all(&bytes)?;
    writeln!(out)?;
    Ok(())
}
