//! Run configuration: a flat key=value file with CLI `--set` overrides.
//!
//! Every field is validated before any stage runs; violations are collected
//! and reported together. Every ablation variant is expressible from config
//! alone (the loss switches plus the null-neg flag and critic choice).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cqgen_core::coordinator::CoordinatorConfig;
use cqgen_core::generator::GeneratorConfig;
use cqgen_core::objectives::{AblationFlags, Critic, RewardSpec, RewardStat, StepSettings};
use cqgen_core::ranker::{Bm25Params, LogisticSquash};
use cqgen_core::corpus::SyntheticSpec;

#[derive(Debug, Clone, PartialEq)]
pub enum RankerChoice {
    Bm25,
    MockConstant,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub run_id: String,
    pub data_train: PathBuf,
    pub data_eval: PathBuf,
    pub data_questions: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub vocab_max_size: usize,

    pub synth_train_pairs: usize,
    pub synth_eval_pairs: usize,
    pub synth_docs_per_set: usize,
    pub synth_sentences_per_doc: usize,
    pub synth_keywords_per_topic: usize,
    pub synth_overlap: f64,

    pub gen_hidden_dim: usize,
    pub gen_layers: usize,
    pub gen_heads: usize,
    pub gen_max_context: usize,
    pub gen_learning_rate: f64,
    pub gen_epochs: usize,

    pub coord_blocks: usize,
    pub coord_heads: usize,
    pub coord_ln_eps: f64,
    pub coord_init_std: f64,
    pub coord_max_gen_len: usize,
    pub coord_learning_rate: f64,
    pub coord_weight_decay: f64,
    pub coord_steps: usize,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub reward_statistic: String,
    pub reward_k: usize,
    pub reward_critic: String,
    pub temperature: f64,

    pub ranker: RankerChoice,
    pub ranker_a: f64,
    pub ranker_b: f64,
    pub mock_score: f64,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub augmented_k: usize,
    pub baseline_k: usize,

    pub enable_pg: bool,
    pub enable_scr: bool,
    pub enable_entropy: bool,
    pub null_neg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_id: "run".into(),
            data_train: "data/train.jsonl".into(),
            data_eval: "data/eval.jsonl".into(),
            data_questions: "data/questions.jsonl".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
            vocab_max_size: 4000,

            synth_train_pairs: 40,
            synth_eval_pairs: 10,
            synth_docs_per_set: 10,
            synth_sentences_per_doc: 3,
            synth_keywords_per_topic: 8,
            synth_overlap: 0.3,

            gen_hidden_dim: 64,
            gen_layers: 2,
            gen_heads: 4,
            gen_max_context: 96,
            gen_learning_rate: 1e-3,
            gen_epochs: 30,

            coord_blocks: 2,
            coord_heads: 4,
            coord_ln_eps: 1e-5,
            coord_init_std: 0.02,
            coord_max_gen_len: 20,
            coord_learning_rate: 1e-3,
            coord_weight_decay: 0.01,
            coord_steps: 2000,

            lambda1: 1.0,
            lambda2: 100.0,
            lambda3: 0.1,
            reward_statistic: "p@k".into(),
            reward_k: 10,
            reward_critic: "oracle".into(),
            temperature: 1.0,

            ranker: RankerChoice::Bm25,
            ranker_a: 0.5,
            ranker_b: -2.0,
            mock_score: 0.5,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            augmented_k: 100,
            baseline_k: 100,

            enable_pg: true,
            enable_scr: true,
            enable_entropy: true,
            null_neg: false,
        }
    }
}

impl RunConfig {
    /// Loads the optional config file, applies `--set key=value` overrides,
    /// and validates. All violations are reported together.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, String> {
        let mut pairs: BTreeMap<String, (String, String)> = BTreeMap::new(); // key -> (value, origin)
        let mut violations = Vec::new();

        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                match line.split_once('=') {
                    Some((k, v)) => {
                        pairs.insert(
                            k.trim().to_string(),
                            (v.trim().to_string(), format!("{}:{}", path.display(), lineno + 1)),
                        );
                    }
                    None => violations
                        .push(format!("{}:{}: expected key=value", path.display(), lineno + 1)),
                }
            }
        }
        for item in overrides {
            match item.split_once('=') {
                Some((k, v)) => {
                    pairs.insert(
                        k.trim().to_string(),
                        (v.trim().to_string(), "--set".to_string()),
                    );
                }
                None => violations.push(format!("--set {item}: expected key=value")),
            }
        }

        let mut cfg = RunConfig::default();
        for (key, (value, origin)) in &pairs {
            if let Err(msg) = cfg.apply(key, value) {
                violations.push(format!("{origin}: {msg}"));
            }
        }
        violations.extend(cfg.validate());

        if violations.is_empty() {
            Ok(cfg)
        } else {
            let mut msg = String::from("invalid configuration:\n");
            for v in &violations {
                let _ = writeln!(msg, "  - {v}");
            }
            Err(msg)
        }
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse::<T>()
                .map_err(|_| format!("{key}: cannot parse '{value}'"))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "run_id" => self.run_id = value.to_string(),
            "data.train" => self.data_train = value.into(),
            "data.eval" => self.data_eval = value.into(),
            "data.questions" => self.data_questions = value.into(),
            "dirs.checkpoints" => self.checkpoint_dir = value.into(),
            "dirs.reports" => self.report_dir = value.into(),
            "vocab.max_size" => self.vocab_max_size = parse(key, value)?,
            "synth.train_pairs" => self.synth_train_pairs = parse(key, value)?,
            "synth.eval_pairs" => self.synth_eval_pairs = parse(key, value)?,
            "synth.docs_per_set" => self.synth_docs_per_set = parse(key, value)?,
            "synth.sentences_per_doc" => self.synth_sentences_per_doc = parse(key, value)?,
            "synth.keywords_per_topic" => self.synth_keywords_per_topic = parse(key, value)?,
            "synth.overlap" => self.synth_overlap = parse(key, value)?,
            "gen.hidden_dim" => self.gen_hidden_dim = parse(key, value)?,
            "gen.layers" => self.gen_layers = parse(key, value)?,
            "gen.heads" => self.gen_heads = parse(key, value)?,
            "gen.max_context" => self.gen_max_context = parse(key, value)?,
            "gen.learning_rate" => self.gen_learning_rate = parse(key, value)?,
            "gen.epochs" => self.gen_epochs = parse(key, value)?,
            "coord.blocks" => self.coord_blocks = parse(key, value)?,
            "coord.heads" => self.coord_heads = parse(key, value)?,
            "coord.ln_eps" => self.coord_ln_eps = parse(key, value)?,
            "coord.init_std" => self.coord_init_std = parse(key, value)?,
            "coord.max_gen_len" => self.coord_max_gen_len = parse(key, value)?,
            "coord.learning_rate" => self.coord_learning_rate = parse(key, value)?,
            "coord.weight_decay" => self.coord_weight_decay = parse(key, value)?,
            "coord.steps" => self.coord_steps = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "lambda3" => self.lambda3 = parse(key, value)?,
            "reward.statistic" => self.reward_statistic = value.to_string(),
            "reward.k" => self.reward_k = parse(key, value)?,
            "reward.critic" => self.reward_critic = value.to_string(),
            "train.temperature" => self.temperature = parse(key, value)?,
            "ranker" => {
                self.ranker = match value {
                    "bm25" => RankerChoice::Bm25,
                    "mock-constant" => RankerChoice::MockConstant,
                    _ => return Err(format!("ranker: unknown choice '{value}'")),
                }
            }
            "ranker.a" => self.ranker_a = parse(key, value)?,
            "ranker.b" => self.ranker_b = parse(key, value)?,
            "ranker.mock_score" => self.mock_score = parse(key, value)?,
            "bm25.k1" => self.bm25_k1 = parse(key, value)?,
            "bm25.b" => self.bm25_b = parse(key, value)?,
            "eval.augmented_k" => self.augmented_k = parse(key, value)?,
            "baseline.k" => self.baseline_k = parse(key, value)?,
            "ablate.enable_pg" => self.enable_pg = parse(key, value)?,
            "ablate.enable_scr" => self.enable_scr = parse(key, value)?,
            "ablate.enable_entropy" => self.enable_entropy = parse(key, value)?,
            "ablate.null_neg" => self.null_neg = parse(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.vocab_max_size < 4 {
            v.push("vocab.max_size: must be at least 4".into());
        }
        if !(0.0..=1.0).contains(&self.synth_overlap) {
            v.push(format!(
                "synth.overlap: {} outside [0, 1]",
                self.synth_overlap
            ));
        }
        if self.gen_hidden_dim == 0 || self.gen_heads == 0 || self.gen_hidden_dim % self.gen_heads != 0 {
            v.push(format!(
                "gen.hidden_dim: {} must be a positive multiple of gen.heads {}",
                self.gen_hidden_dim, self.gen_heads
            ));
        }
        if self.coord_heads == 0 || self.gen_hidden_dim % self.coord_heads != 0 {
            v.push(format!(
                "coord.heads: generator hidden dim {} must be divisible by {}",
                self.gen_hidden_dim, self.coord_heads
            ));
        }
        if self.reward_k == 0
            || self.reward_k > self.synth_docs_per_set * 2
        {
            v.push(format!(
                "reward.k: {} must be in 1..={} (positive set plus negative set)",
                self.reward_k,
                self.synth_docs_per_set * 2
            ));
        }
        match self.reward_statistic.as_str() {
            "p@k" | "map" => {}
            other => v.push(format!("reward.statistic: unknown '{other}' (p@k or map)")),
        }
        match self.reward_critic.as_str() {
            "oracle" | "self" => {}
            other => v.push(format!("reward.critic: unknown '{other}' (oracle or self)")),
        }
        for (name, x) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("train.temperature", self.temperature),
        ] {
            if !x.is_finite() {
                v.push(format!("{name}: must be finite"));
            }
        }
        if self.temperature <= 0.0 {
            v.push("train.temperature: must be positive".into());
        }
        if !(0.0 < self.mock_score && self.mock_score < 1.0) {
            v.push("ranker.mock_score: must lie strictly inside (0, 1)".into());
        }
        if self.augmented_k == 0 || self.baseline_k == 0 {
            v.push("eval.augmented_k and baseline.k must be at least 1".into());
        }
        v
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            hidden_dim: self.gen_hidden_dim,
            layers: self.gen_layers,
            heads: self.gen_heads,
            max_context: self.gen_max_context,
            learning_rate: self.gen_learning_rate,
            epochs: self.gen_epochs,
            seed: self.seed,
        }
    }

    pub fn coordinator_config(&self) -> CoordinatorConfig {
        CoordinatorConfig {
            blocks: self.coord_blocks,
            heads: self.coord_heads,
            // The coordinator consumes generator hidden states, so the
            // dimension is tied to the generator's.
            hidden_dim: self.gen_hidden_dim,
            ln_eps: self.coord_ln_eps,
            init_std: self.coord_init_std,
            max_gen_len: self.coord_max_gen_len,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            pairs: self.synth_train_pairs + self.synth_eval_pairs,
            docs_per_set: self.synth_docs_per_set,
            sentences_per_doc: self.synth_sentences_per_doc,
            keywords_per_topic: self.synth_keywords_per_topic,
            overlap: self.synth_overlap,
            seed: self.seed,
        }
    }

    pub fn step_settings(&self) -> StepSettings {
        StepSettings {
            reward: RewardSpec {
                stat: match self.reward_statistic.as_str() {
                    "map" => RewardStat::MeanAveragePrecision,
                    _ => RewardStat::PrecisionAtK { k: self.reward_k },
                },
                critic: match self.reward_critic.as_str() {
                    "self" => Critic::SelfCritic,
                    _ => Critic::Oracle,
                },
            },
            lambdas: (self.lambda1, self.lambda2, self.lambda3),
            flags: AblationFlags {
                enable_pg: self.enable_pg,
                enable_scr: self.enable_scr,
                enable_entropy: self.enable_entropy,
                null_neg: self.null_neg,
            },
            temperature: self.temperature,
            max_len: self.coord_max_gen_len,
        }
    }

    pub fn bm25_params(&self) -> Bm25Params {
        Bm25Params {
            k1: self.bm25_k1,
            b: self.bm25_b,
        }
    }

    pub fn squash(&self) -> LogisticSquash {
        LogisticSquash {
            a: self.ranker_a,
            b: self.ranker_b,
        }
    }

    pub fn report_path(&self, file: &str) -> PathBuf {
        self.report_dir.join(&self.run_id).join(file)
    }

    pub fn generator_ckpt(&self) -> PathBuf {
        self.checkpoint_dir.join("generator.ckpt")
    }

    pub fn coordinator_ckpt(&self) -> PathBuf {
        self.checkpoint_dir.join("coordinator.ckpt")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.lambda2, 100.0);
        assert_eq!(cfg.coord_max_gen_len, 20);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_are_listed() {
        let cfg = RunConfig::load(None, &["seed=7".into(), "lambda2=0".into()]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lambda2, 0.0);

        let err = RunConfig::load(
            None,
            &["nonsense=1".into(), "synth.overlap=3".into()],
        )
        .unwrap_err();
        assert!(err.contains("unknown key 'nonsense'"));
        assert!(err.contains("synth.overlap"));
    }

    #[test]
    fn file_and_override_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nseed = 3\nrun_id = exp1\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["seed=9".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.run_id, "exp1");
    }
}
