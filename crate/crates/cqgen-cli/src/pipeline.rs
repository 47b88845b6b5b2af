//! Command implementations wiring the library pipeline together.

use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use cqgen_core::checkpoint::{
    load_coordinator, load_generator, save_coordinator, save_generator,
};
use cqgen_core::coordinator::{decode_common, DecodeOptions, DecodeTrace};
use cqgen_core::corpus::{
    generate_synthetic, load_dataset, write_dataset, ContrastiveInstance, Document,
    Vocabulary,
};
use cqgen_core::generator::train_generator;
use cqgen_core::nn::AdamW;
use cqgen_core::objectives::train_coordinator_step;
use cqgen_core::ranker::{Bm25Scorer, ConstantScorer, CorpusStats, DocQuestionScorer};
use cqgen_core::report::{
    write_metric_reports, write_text_metrics, write_training_log, write_weights_trace,
    MetricRow, TextMetricsRow, TrainingLogRow, WeightsTraceRow,
};
use cqgen_core::retrieval::{
    augmented_eval, out_sample_eval, top_frequent_at_k, top_tfidf_at_k, uniform_avg_decode,
    InvertedIndex, QuestionCorpus, QuestionEntry,
};
use cqgen_core::rng::substream;
use cqgen_core::textmetrics::{bleu, rouge_l};
use cqgen_core::{Coordinator, Generator, Scalar};

use crate::config::{RankerChoice, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Model {
    Mscqg,
    Msqg,
    Oracle,
}

impl Model {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mscqg" => Ok(Model::Mscqg),
            "msqg" => Ok(Model::Msqg),
            "oracle" => Ok(Model::Oracle),
            other => bail!("unknown model '{other}' (expected mscqg, msqg, or oracle)"),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Model::Mscqg => "mscqg",
            Model::Msqg => "msqg",
            Model::Oracle => "oracle",
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

struct Corpus {
    train: Vec<ContrastiveInstance>,
    eval: Vec<ContrastiveInstance>,
    vocab: Vocabulary,
}

/// Loads both splits and rebuilds the vocabulary deterministically over all
/// document texts and oracle questions of both. Stages rely on this instead
/// of persisting the vocabulary: identical inputs yield identical ids.
fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let train = load_dataset(&cfg.data_train)
        .with_context(|| format!("loading {}", cfg.data_train.display()))?;
    let eval = load_dataset(&cfg.data_eval)
        .with_context(|| format!("loading {}", cfg.data_eval.display()))?;
    let mut texts: Vec<String> = Vec::new();
    for inst in train.iter().chain(eval.iter()) {
        for doc in inst.docs() {
            texts.push(doc.text.clone());
        }
        texts.extend(inst.oracle_pos_question.iter().cloned());
        texts.extend(inst.oracle_neg_question.iter().cloned());
    }
    let vocab = Vocabulary::build(&texts, cfg.vocab_max_size)?;
    let mut corpus = Corpus { train, eval, vocab };
    for inst in corpus.train.iter_mut().chain(corpus.eval.iter_mut()) {
        inst.attach_tokens(&corpus.vocab)?;
    }
    Ok(corpus)
}

fn load_generator_ckpt(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Generator> {
    let path = cfg.generator_ckpt();
    if !path.exists() {
        bail!(
            "generator checkpoint {} not found; run `cqgen train-generator` first",
            path.display()
        );
    }
    let gen = load_generator::<Scalar>(&path)?;
    if gen.vocab_size != vocab.size() {
        bail!(
            "checkpoint vocabulary size {} does not match the dataset's {}; \
             regenerate the checkpoint for this dataset",
            gen.vocab_size,
            vocab.size()
        );
    }
    Ok(gen)
}

fn load_coordinator_ckpt(cfg: &RunConfig) -> Result<Coordinator> {
    let path = cfg.coordinator_ckpt();
    if !path.exists() {
        bail!(
            "coordinator checkpoint {} not found; run `cqgen train-coordinator` first",
            path.display()
        );
    }
    Ok(load_coordinator::<Scalar>(&path)?)
}

fn scorer_over<'a>(
    cfg: &RunConfig,
    docs: impl IntoIterator<Item = &'a Document>,
) -> Box<dyn DocQuestionScorer> {
    match cfg.ranker {
        RankerChoice::Bm25 => {
            let mut scorer = Bm25Scorer::new(CorpusStats::build(docs));
            scorer.bm25 = cfg.bm25_params();
            scorer.squash = cfg.squash();
            Box::new(scorer)
        }
        RankerChoice::MockConstant => Box::new(ConstantScorer {
            value: cfg.mock_score,
        }),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synthetic_spec();
    let instances = generate_synthetic(&spec)?;
    let (train, eval) = instances.split_at(cfg.synth_train_pairs.min(instances.len()));

    ensure_parent(&cfg.data_train)?;
    ensure_parent(&cfg.data_eval)?;
    ensure_parent(&cfg.data_questions)?;
    write_dataset(&cfg.data_train, train)?;
    write_dataset(&cfg.data_eval, eval)?;

    let mut questions = std::fs::File::create(&cfg.data_questions)?;
    let mut n_questions = 0usize;
    for inst in &instances {
        for (suffix, q) in [
            ("pos", &inst.oracle_pos_question),
            ("neg", &inst.oracle_neg_question),
        ] {
            if let Some(text) = q {
                let entry = QuestionEntry {
                    id: format!("q-{}-{}", inst.id, suffix),
                    text: text.clone(),
                    tokens: vec![],
                };
                serde_json::to_writer(&mut questions, &entry)?;
                questions.write_all(b"\n")?;
                n_questions += 1;
            }
        }
    }

    println!(
        "wrote {} training and {} held-out instances ({} documents), {} questions",
        train.len(),
        eval.len(),
        instances.len() * 2 * cfg.synth_docs_per_set,
        n_questions
    );
    println!("  {}", cfg.data_train.display());
    println!("  {}", cfg.data_eval.display());
    println!("  {}", cfg.data_questions.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-generator
// ---------------------------------------------------------------------------

pub fn train_generator_cmd(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    // Fine-tune on every (document, its set's oracle question) pair of the
    // training split. Held-out pairs stay unseen: their keywords are still
    // in-vocabulary because the synthetic lexicon is shared corpus-wide.
    let mut pairs: Vec<(Document, String)> = Vec::new();
    for inst in corpus.train.iter() {
        if let Some(q) = &inst.oracle_pos_question {
            for doc in &inst.positive_docs {
                pairs.push((doc.clone(), q.clone()));
            }
        }
        if let Some(q) = &inst.oracle_neg_question {
            for doc in &inst.negative_docs {
                pairs.push((doc.clone(), q.clone()));
            }
        }
    }

    let gen_cfg = cfg.generator_config();
    println!(
        "training generator on {} pairs (V={}, H={}, {} layers, {} epochs)",
        pairs.len(),
        corpus.vocab.size(),
        gen_cfg.hidden_dim,
        gen_cfg.layers,
        gen_cfg.epochs
    );
    let (params, report) = train_generator::<Scalar>(&pairs, &gen_cfg, &corpus.vocab)?;
    if report.truncated_sequences > 0 {
        eprintln!(
            "warning: {} sequences exceeded the context window; document heads were truncated",
            report.truncated_sequences
        );
    }
    println!(
        "cross-entropy {:.4} -> {:.4} over {} epochs",
        report.initial_loss,
        report.final_loss,
        report.epoch_losses.len()
    );

    let path = cfg.generator_ckpt();
    ensure_parent(&path)?;
    save_generator(&path, &params)?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-coordinator
// ---------------------------------------------------------------------------

pub fn train_coordinator_cmd(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let gen = load_generator_ckpt(cfg, &corpus.vocab)?;
    if corpus.train.is_empty() {
        bail!("training split {} is empty", cfg.data_train.display());
    }

    let coord_cfg = cfg.coordinator_config();
    let mut coord = Coordinator::init(&coord_cfg, &mut substream(cfg.seed, "coordinator-init"))?;
    let mut opt: AdamW<Scalar> = AdamW::new(cfg.coord_learning_rate, cfg.coord_weight_decay);
    let scorer = scorer_over(cfg, corpus.train.iter().flat_map(|i| i.docs()));
    let settings = cfg.step_settings();
    let mut rollout_rng = substream(cfg.seed, "rollout");

    println!(
        "training coordinator for {} steps on {} instances (critic={}, lambdas={:?}{})",
        cfg.coord_steps,
        corpus.train.len(),
        cfg.reward_critic,
        settings.lambdas,
        if settings.flags.null_neg { ", null-neg" } else { "" }
    );

    let mut log_rows = Vec::with_capacity(cfg.coord_steps);
    for step in 0..cfg.coord_steps {
        let inst = &corpus.train[step % corpus.train.len()];
        let out = train_coordinator_step(
            inst,
            &gen,
            &mut coord,
            scorer.as_ref(),
            &settings,
            &mut opt,
            &mut rollout_rng,
            &corpus.vocab,
        )?;
        log_rows.push(TrainingLogRow {
            step,
            reward: out.reward.reward,
            baseline: out.reward.baseline,
            l_pg: out.losses.pg,
            l_scr: out.losses.scr,
            l_h: out.losses.entropy,
            l_total: out.losses.total,
            gate_rate: out.gate_rate,
            fallback_rate: out.fallback_rate,
        });
        if (step + 1) % 200 == 0 || step + 1 == cfg.coord_steps {
            let window = &log_rows[log_rows.len().saturating_sub(100)..];
            let mean_r: f64 =
                window.iter().map(|r| r.reward).sum::<f64>() / window.len() as f64;
            let mean_adv: f64 = window
                .iter()
                .map(|r| r.reward - r.baseline)
                .sum::<f64>()
                / window.len() as f64;
            println!(
                "step {:>6}: mean R {:.4}, mean advantage {:+.4}",
                step + 1,
                mean_r,
                mean_adv
            );
        }
    }

    let log_path = cfg.report_path("training_log.csv");
    ensure_parent(&log_path)?;
    write_training_log(&log_path, &log_rows)?;
    println!("wrote {}", log_path.display());

    let path = cfg.coordinator_ckpt();
    ensure_parent(&path)?;
    save_coordinator(&path, &coord)?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Decoding helpers
// ---------------------------------------------------------------------------

fn decode_for_model(
    model: Model,
    inst: &ContrastiveInstance,
    gen: &Generator,
    coord: Option<&Coordinator>,
    vocab: &Vocabulary,
    cfg: &RunConfig,
) -> Result<(Vec<cqgen_core::corpus::TokenId>, String)> {
    match model {
        Model::Oracle => {
            let text = inst.oracle_pos_question.clone().with_context(|| {
                format!("instance {} has no oracle positive question", inst.id)
            })?;
            Ok((vocab.tokenize(&text), text))
        }
        Model::Msqg => {
            let trace = uniform_avg_decode(gen, inst, vocab, cfg.coord_max_gen_len)?;
            let text = vocab.detokenize(&trace.question);
            Ok((trace.question, text))
        }
        Model::Mscqg => {
            let coord = coord.expect("coordinator loaded for mscqg");
            let opts = DecodeOptions {
                max_len: cfg.coord_max_gen_len,
                null_neg: cfg.null_neg,
                ..DecodeOptions::default()
            };
            let mut rng = substream(cfg.seed, "decode");
            let trace = decode_common(gen, coord, inst, vocab, &opts, &mut rng)?;
            let text = vocab.detokenize(&trace.question);
            Ok((trace.question, text))
        }
    }
}

pub fn generate_cmd(cfg: &RunConfig, model: Model) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let gen = load_generator_ckpt(cfg, &corpus.vocab)?;
    let coord = match model {
        Model::Mscqg => Some(load_coordinator_ckpt(cfg)?),
        _ => None,
    };

    let out_path = cfg.report_path(&format!("generated_{}.jsonl", model.name()));
    ensure_parent(&out_path)?;
    let mut file = std::fs::File::create(&out_path)?;
    for inst in &corpus.eval {
        let (_, text) =
            decode_for_model(model, inst, &gen, coord.as_ref(), &corpus.vocab, cfg)?;
        let line = serde_json::json!({ "id": inst.id, "question": text });
        serde_json::to_writer(&mut file, &line)?;
        file.write_all(b"\n")?;
        println!("{}: {}", inst.id, text);
    }
    println!("wrote {}", out_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-retrieval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    OutSample,
    Augmented,
    Both,
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "out-sample" => Ok(Protocol::OutSample),
            "augmented" => Ok(Protocol::Augmented),
            "both" => Ok(Protocol::Both),
            other => bail!("unknown protocol '{other}' (out-sample, augmented, or both)"),
        }
    }
}

fn corpus_index(corpus: &Corpus) -> Result<InvertedIndex> {
    let docs: Vec<(String, Vec<cqgen_core::corpus::TokenId>)> = corpus
        .train
        .iter()
        .chain(corpus.eval.iter())
        .flat_map(|i| i.docs())
        .map(|d| (d.id.clone(), d.tokens.clone()))
        .collect();
    Ok(InvertedIndex::build(&docs)?)
}

fn eval_questions(
    cfg: &RunConfig,
    corpus: &Corpus,
    questions: &[(String, Vec<cqgen_core::corpus::TokenId>)],
    model_name: &str,
    protocol: Protocol,
) -> Result<Vec<MetricRow>> {
    let scorer = scorer_over(cfg, corpus.eval.iter().flat_map(|i| i.docs()));
    let index = corpus_index(corpus)?;
    let bm25 = cfg.bm25_params();

    let mut rows = Vec::new();
    for (inst, (_, q_tokens)) in corpus.eval.iter().zip(questions) {
        if matches!(protocol, Protocol::OutSample | Protocol::Both) {
            rows.push(MetricRow {
                instance_id: inst.id.clone(),
                model: model_name.to_string(),
                protocol: "out-sample".into(),
                report: out_sample_eval(q_tokens, inst, scorer.as_ref())?,
            });
        }
        if matches!(protocol, Protocol::Augmented | Protocol::Both) {
            rows.push(MetricRow {
                instance_id: inst.id.clone(),
                model: model_name.to_string(),
                protocol: "augmented".into(),
                report: augmented_eval(q_tokens, inst, &index, cfg.augmented_k, &bm25)?,
            });
        }
    }
    Ok(rows)
}

fn write_and_print_metrics(cfg: &RunConfig, rows: &[MetricRow]) -> Result<()> {
    let csv = cfg.report_path("metrics.csv");
    let json = cfg.report_path("metrics.json");
    ensure_parent(&csv)?;
    write_metric_reports(&csv, &json, rows)?;

    // Print the mean rows.
    let mut groups: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r.model.clone(), r.protocol.clone()))
        .collect();
    groups.sort();
    groups.dedup();
    for (model, protocol) in groups {
        let group: Vec<_> = rows
            .iter()
            .filter(|r| r.model == model && r.protocol == protocol)
            .map(|r| r.report)
            .collect();
        let mean = cqgen_core::retrieval::MetricReport::mean(&group);
        println!(
            "{model} [{protocol}] over {} instances: mAP {:.4}, RPrec {:.4}, MRR {:.4}, MRR@10 {:.4}, nDCG {:.4}, P@10 {:.4}",
            group.len(),
            mean.map,
            mean.rprec,
            mean.mrr,
            mean.mrr_at_10,
            mean.ndcg,
            mean.precision_at_k
        );
    }
    println!("wrote {}", csv.display());
    println!("wrote {}", json.display());
    Ok(())
}

pub fn eval_retrieval_cmd(cfg: &RunConfig, model: Model, protocol: Protocol) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    if corpus.eval.is_empty() {
        bail!("evaluation split {} is empty", cfg.data_eval.display());
    }
    let gen = load_generator_ckpt(cfg, &corpus.vocab)?;
    let coord = match model {
        Model::Mscqg => Some(load_coordinator_ckpt(cfg)?),
        _ => None,
    };

    let mut questions = Vec::with_capacity(corpus.eval.len());
    for inst in &corpus.eval {
        let (tokens, _text) =
            decode_for_model(model, inst, &gen, coord.as_ref(), &corpus.vocab, cfg)?;
        questions.push((inst.id.clone(), tokens));
    }
    let rows = eval_questions(cfg, &corpus, &questions, model.name(), protocol)?;
    write_and_print_metrics(cfg, &rows)
}

// ---------------------------------------------------------------------------
// eval-text
// ---------------------------------------------------------------------------

pub fn eval_text_cmd(cfg: &RunConfig, model: Model) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let gen = load_generator_ckpt(cfg, &corpus.vocab)?;
    let coord = match model {
        Model::Mscqg => Some(load_coordinator_ckpt(cfg)?),
        _ => None,
    };

    let mut rows = Vec::new();
    for inst in &corpus.eval {
        let Some(reference_text) = &inst.oracle_pos_question else {
            continue;
        };
        let reference = cqgen_core::corpus::split_words(reference_text);
        let (_, text) =
            decode_for_model(model, inst, &gen, coord.as_ref(), &corpus.vocab, cfg)?;
        let hypothesis = cqgen_core::corpus::split_words(&text);
        let bleu_scores =
            [1, 2, 3, 4].map(|n| bleu(&hypothesis, &reference, n).value);
        rows.push(TextMetricsRow {
            instance_id: inst.id.clone(),
            model: model.name().to_string(),
            bleu: bleu_scores,
            rouge_l: rouge_l(&hypothesis, &reference).value,
        });
    }

    let path = cfg.report_path("eval_text.csv");
    ensure_parent(&path)?;
    write_text_metrics(&path, &rows)?;
    let n = rows.len().max(1) as f64;
    println!(
        "{} [vs oracle] over {} instances: BL-1 {:.4}, BL-2 {:.4}, BL-3 {:.4}, BL-4 {:.4}, ROUGE_L {:.4}",
        model.name(),
        rows.len(),
        rows.iter().map(|r| r.bleu[0]).sum::<f64>() / n,
        rows.iter().map(|r| r.bleu[1]).sum::<f64>() / n,
        rows.iter().map(|r| r.bleu[2]).sum::<f64>() / n,
        rows.iter().map(|r| r.bleu[3]).sum::<f64>() / n,
        rows.iter().map(|r| r.rouge_l).sum::<f64>() / n,
    );
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// baselines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    TopTfidf,
    TopFrequent,
    Msqg,
}

pub fn baseline_cmd(cfg: &RunConfig, kind: BaselineKind) -> Result<()> {
    if kind == BaselineKind::Msqg {
        return eval_retrieval_cmd(cfg, Model::Msqg, Protocol::Both);
    }

    let corpus = load_corpus(cfg)?;
    if corpus.eval.is_empty() {
        bail!("evaluation split {} is empty", cfg.data_eval.display());
    }
    if !cfg.data_questions.exists() {
        bail!(
            "question corpus {} not found; run `cqgen gen-data` or point data.questions at one",
            cfg.data_questions.display()
        );
    }
    let questions_corpus = QuestionCorpus::load(&cfg.data_questions, &corpus.vocab)?;
    let bm25 = cfg.bm25_params();
    let k = cfg.baseline_k;
    let model_name = match kind {
        BaselineKind::TopTfidf => format!("top-tfidf@{k}"),
        BaselineKind::TopFrequent => format!("top-frequent@{k}"),
        BaselineKind::Msqg => unreachable!(),
    };

    let mut chosen = Vec::with_capacity(corpus.eval.len());
    for inst in &corpus.eval {
        let (_, text) = match kind {
            BaselineKind::TopTfidf => top_tfidf_at_k(inst, &questions_corpus, k, &bm25)?,
            BaselineKind::TopFrequent => top_frequent_at_k(inst, &questions_corpus, k, &bm25)?,
            BaselineKind::Msqg => unreachable!(),
        };
        println!("{}: {}", inst.id, text);
        chosen.push((inst.id.clone(), corpus.vocab.tokenize(&text)));
    }
    let rows = eval_questions(cfg, &corpus, &chosen, &model_name, Protocol::Both)?;
    write_and_print_metrics(cfg, &rows)
}

// ---------------------------------------------------------------------------
// inspect-weights
// ---------------------------------------------------------------------------

pub fn inspect_weights_cmd(cfg: &RunConfig, instance: Option<&str>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let gen = load_generator_ckpt(cfg, &corpus.vocab)?;
    let coord = load_coordinator_ckpt(cfg)?;

    let selected: Vec<&ContrastiveInstance> = match instance {
        Some(id) => {
            let inst = corpus
                .eval
                .iter()
                .chain(corpus.train.iter())
                .find(|i| i.id == id)
                .with_context(|| format!("no instance with id '{id}'"))?;
            vec![inst]
        }
        None => corpus.eval.iter().collect(),
    };

    let mut rows = Vec::new();
    for inst in selected {
        let opts = DecodeOptions {
            max_len: cfg.coord_max_gen_len,
            null_neg: cfg.null_neg,
            ..DecodeOptions::default()
        };
        let mut rng = substream(cfg.seed, "decode");
        let trace: DecodeTrace<Scalar> =
            decode_common(&gen, &coord, inst, &corpus.vocab, &opts, &mut rng)?;
        for (t, step) in trace.steps.iter().enumerate() {
            let token = corpus.vocab.token(step.chosen).to_string();
            for (i, w) in step.coord.w.iter().enumerate() {
                rows.push(WeightsTraceRow {
                    step: t,
                    token: token.clone(),
                    position_index: i,
                    set: "pos",
                    weight: *w,
                    eta: step.coord.eta,
                });
            }
            let p = step.coord.w.len();
            for (i, v) in step.coord.v.iter().enumerate() {
                rows.push(WeightsTraceRow {
                    step: t,
                    token: token.clone(),
                    position_index: p + i,
                    set: "neg",
                    weight: *v,
                    eta: step.coord.eta,
                });
            }
        }
    }

    let path = cfg.report_path("weights_trace.csv");
    ensure_parent(&path)?;
    write_weights_trace(&path, &rows)?;
    println!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}
