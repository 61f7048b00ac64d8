use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use readvqa::cli::{
    cmd_eval, cmd_ingest, cmd_predict, cmd_retrieve, cmd_train, render_eval_table, Profile,
    RunConfig,
};
use readvqa::error::Result;
use readvqa::model::TaskMode;

#[derive(Parser)]
#[command(
    name = "readvqa",
    about = "Question answering over scene descriptions and knowledge facts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run-config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// open_ended | multiple_choice | span
    #[arg(long)]
    mode: Option<TaskMode>,
    /// desk | full
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    val_dataset: Option<PathBuf>,
    #[arg(long)]
    facts: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Context word limit.
    #[arg(long)]
    limit: Option<usize>,
    /// Retrieval depth.
    #[arg(long)]
    k: Option<usize>,
    /// Answer-class count for open-ended ingest/train.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    finetune_from: Option<PathBuf>,
    /// Stop once train top-1 reaches 1.0.
    #[arg(long)]
    stop_at_perfect_train: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.profile {
            cfg.profile = v;
        }
        if self.dataset.is_some() {
            cfg.dataset = self.dataset.clone();
        }
        if self.val_dataset.is_some() {
            cfg.val_dataset = self.val_dataset.clone();
        }
        if self.facts.is_some() {
            cfg.facts = self.facts.clone();
        }
        if self.embeddings.is_some() {
            cfg.embeddings = self.embeddings.clone();
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.limit {
            cfg.context_limit = v;
        }
        if let Some(v) = self.k {
            cfg.retrieval_k = v;
        }
        if let Some(v) = self.classes {
            cfg.answer_classes = v;
        }
        if self.finetune_from.is_some() {
            cfg.finetune_from = self.finetune_from.clone();
        }
        if self.stop_at_perfect_train {
            cfg.stop_at_perfect_train = true;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a raw JSONL dataset and write processed files.
    Ingest {
        /// Raw dataset (JSONL, one example per line).
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model and write checkpoint + trace into the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a trained model directory on a dataset.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        mode: Option<TaskMode>,
        /// Emit JSON only (otherwise the table prints before the JSON).
        #[arg(long)]
        json: bool,
    },
    /// Answer one question with a trained model.
    Predict {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        question: String,
        /// Context sentence; repeat for multiple sentences.
        #[arg(long = "context")]
        context: Vec<String>,
        /// Candidate answer (multiple-choice mode); repeat exactly 4 times.
        #[arg(long = "choice")]
        choices: Vec<String>,
        #[arg(long)]
        facts: Option<PathBuf>,
        /// Visual concept; repeatable.
        #[arg(long = "concept")]
        concepts: Vec<String>,
        /// Retrieval depth when --facts is given.
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        json: bool,
    },
    /// Rank supporting facts for a question.
    Retrieve {
        #[arg(long)]
        facts: PathBuf,
        #[arg(long)]
        question: String,
        /// Visual concept; repeatable.
        #[arg(long = "concept")]
        concepts: Vec<String>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 500)]
        limit: usize,
        #[arg(long)]
        json: bool,
    },
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest { input, config } => {
            let cfg = config.resolve()?;
            let report = cmd_ingest(&cfg, &input)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Train { config } => {
            let cfg = config.resolve()?;
            let report = cmd_train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Eval {
            model_dir,
            dataset,
            mode,
            json,
        } => {
            let out = cmd_eval(&model_dir, &dataset, mode)?;
            if !json {
                print!("{}", render_eval_table(&out));
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Predict {
            model_dir,
            question,
            context,
            choices,
            facts,
            concepts,
            k,
            json,
        } => {
            let out = cmd_predict(
                &model_dir,
                &context,
                &question,
                &choices,
                facts.as_deref(),
                &concepts,
                k,
            )?;
            if json {
                println!("{}", serde_json::to_string_pretty(&out)?);
            } else {
                println!("# seed={} mode={}", out.seed, out.mode.as_str());
                for a in &out.answers {
                    match &a.source_sentence {
                        Some(src) => println!("{} ({:.2})  [from: {src}]", a.text, a.probability),
                        None => println!("{} ({:.2})", a.text, a.probability),
                    }
                }
            }
        }
        Command::Retrieve {
            facts,
            question,
            concepts,
            k,
            limit,
            json,
        } => {
            let out = cmd_retrieve(&facts, &question, &concepts, k, limit)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&out)?);
            } else {
                for f in &out.facts {
                    println!("{}. [score {}] {}", f.rank, f.score, f.sentence);
                }
                if out.facts.is_empty() {
                    println!("(no matching facts)");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}] {}", e.category(), e);
            ExitCode::FAILURE
        }
    }
}
