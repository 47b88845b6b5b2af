//! `cqgen`: contrastive multi-document question generation pipeline.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime error.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use pipeline::{BaselineKind, Model, Protocol};

#[derive(Parser)]
#[command(
    name = "cqgen",
    version,
    about = "Contrastive multi-document question generation: data, training, decoding, evaluation"
)]
struct Cli {
    /// Key=value config file; flags and --set override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set seed=7 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Document-question scorer: bm25 or mock-constant.
    #[arg(long, global = true, value_parser = ["bm25", "mock-constant"])]
    ranker: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic contrastive dataset and question corpus.
    GenData,
    /// Train the per-document generator and write its checkpoint.
    TrainGenerator,
    /// Train the coordinator with policy gradient + regularizers.
    TrainCoordinator {
        /// Drop negative-set attention during generation (ablation).
        #[arg(long)]
        null_neg: bool,
        /// Policy-gradient baseline: oracle or self.
        #[arg(long)]
        critic: Option<String>,
    },
    /// Decode questions for the held-out split.
    Generate {
        /// mscqg, msqg, or oracle.
        #[arg(long, default_value = "mscqg")]
        model: String,
    },
    /// Rank documents with the decoded questions and report metrics.
    EvalRetrieval {
        #[arg(long, default_value = "mscqg")]
        model: String,
        /// out-sample, augmented, or both.
        #[arg(long, default_value = "both")]
        protocol: String,
    },
    /// BLEU/ROUGE-L of decoded questions against the oracle questions.
    EvalText {
        #[arg(long, default_value = "mscqg")]
        model: String,
    },
    /// Run a baseline end to end: top-tfidf, top-frequent, or msqg.
    Baseline {
        #[arg(value_parser = ["top-tfidf", "top-frequent", "msqg"])]
        which: String,
    },
    /// Dump per-step attention weights and eta for decoded questions.
    InspectWeights {
        /// Restrict to one instance id.
        #[arg(long)]
        instance: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };

    let mut overrides = cli.set.clone();
    if let Some(r) = &cli.ranker {
        overrides.push(format!("ranker={r}"));
    }
    if let Command::TrainCoordinator { null_neg, critic } = &cli.command {
        if *null_neg {
            overrides.push("ablate.null_neg=true".into());
        }
        if let Some(c) = critic {
            overrides.push(format!("reward.critic={c}"));
        }
    }

    let cfg = match RunConfig::load(cli.config.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(1);
        }
    };

    let result = match &cli.command {
        Command::GenData => pipeline::gen_data(&cfg),
        Command::TrainGenerator => pipeline::train_generator_cmd(&cfg),
        Command::TrainCoordinator { .. } => pipeline::train_coordinator_cmd(&cfg),
        Command::Generate { model } => {
            Model::parse(model).and_then(|m| pipeline::generate_cmd(&cfg, m))
        }
        Command::EvalRetrieval { model, protocol } => Model::parse(model).and_then(|m| {
            Protocol::parse(protocol).and_then(|p| pipeline::eval_retrieval_cmd(&cfg, m, p))
        }),
        Command::EvalText { model } => {
            Model::parse(model).and_then(|m| pipeline::eval_text_cmd(&cfg, m))
        }
        Command::Baseline { which } => {
            let kind = match which.as_str() {
                "top-tfidf" => BaselineKind::TopTfidf,
                "top-frequent" => BaselineKind::TopFrequent,
                _ => BaselineKind::Msqg,
            };
            pipeline::baseline_cmd(&cfg, kind)
        }
        Command::InspectWeights { instance } => {
            pipeline::inspect_weights_cmd(&cfg, instance.as_deref())
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
