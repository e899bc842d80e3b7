//! Run configuration: one flat key-value file per run.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::MaskMode;
use crate::data::SplitFractions;
use crate::error::{Error, Result};
use crate::moe::HeadMode;
use crate::routing::RouterKind;

/// Output combiner of every MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    #[default]
    Baseline,
    #[serde(alias = "similarity")]
    SimilarityAware,
    #[serde(alias = "attention")]
    AttentionAware,
}

impl Combiner {
    pub const ALL: [Combiner; 3] = [Combiner::Baseline, Combiner::SimilarityAware, Combiner::AttentionAware];

    /// Short label used in file names and CSV columns.
    pub fn label(self) -> &'static str {
        match self {
            Combiner::Baseline => "baseline",
            Combiner::SimilarityAware => "similarity",
            Combiner::AttentionAware => "attention",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Combiner::Baseline),
            "similarity" | "similarity_aware" => Ok(Combiner::SimilarityAware),
            "attention" | "attention_aware" => Ok(Combiner::AttentionAware),
            other => Err(Error::Usage(format!(
                "unknown variant '{other}', expected baseline, similarity or attention"
            ))),
        }
    }
}

/// What the model reads and predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Next-character prediction on a text corpus.
    #[default]
    Lm,
    /// Per-token cluster labels on synthetic point sequences.
    Clusters,
}

/// How the similarity temperature moves across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TauSchedule {
    #[default]
    Constant,
    Increasing,
    Decreasing,
}

/// Whether the first layer embeds token ids or reads vectors directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    #[default]
    Tokens,
    Vectors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_qk: usize,
    pub experts: usize,
    pub top_k: usize,
    pub d_ff: usize,
    pub router: RouterKind,
    pub combiner: Combiner,
    /// Learn `W_s` (initialized to the identity) instead of fixing it.
    pub similarity_trainable: bool,
    pub sigma: f64,
    pub head_mode: HeadMode,
    pub mask_mode: MaskMode,
    pub input: InputKind,
    /// Output classes; the vocabulary size for language modeling. `0` means "from the data".
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_qk: 16,
            experts: 8,
            top_k: 2,
            d_ff: 64,
            router: RouterKind::SoftmaxLinear,
            combiner: Combiner::Baseline,
            similarity_trainable: false,
            sigma: 1.0,
            head_mode: HeadMode::MinEntropyOnly,
            mask_mode: MaskMode::Causal,
            input: InputKind::Tokens,
            vocab_size: 0,
            max_seq_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_qk", self.d_qk),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        if self.top_k > self.experts {
            return Err(Error::Validation(format!(
                "top_k={} exceeds experts={}",
                self.top_k, self.experts
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Validation(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub tau_schedule: TauSchedule,
    /// Similarity temperature; the constant value or the schedule's first epoch.
    pub tau_start: f64,
    /// The schedule's last epoch; unused by the constant schedule.
    pub tau_end: f64,
    /// Sequences in the frozen evaluation set used for routing records.
    pub eval_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            seq_len: 32,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            tau_schedule: TauSchedule::Constant,
            tau_start: 1.0,
            tau_end: 1.0,
            eval_sequences: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_sequences == 0 {
            return Err(Error::Validation("batch_size, seq_len and eval_sequences must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Validation("invalid optimizer hyperparameters".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Validation("adam_eps must be positive and grad_clip nonnegative".into()));
        }
        if !(self.tau_start > 0.0) || !(self.tau_end > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature endpoints must be positive, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        Ok(())
    }
}

/// Similarity temperature used during `epoch` (zero-based) of `tcfg.epochs`.
///
/// Non-constant schedules interpolate geometrically between `tau_start` at the
/// first epoch and `tau_end` at the last; `Increasing` and `Decreasing` order the
/// endpoints so that the schedule moves in the named direction.
pub fn apply_tau_schedule(tcfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if !(tcfg.tau_start > 0.0) || !(tcfg.tau_end > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature endpoints must be positive, got {} and {}",
            tcfg.tau_start, tcfg.tau_end
        )));
    }
    let (lo, hi) = if tcfg.tau_start <= tcfg.tau_end {
        (tcfg.tau_start, tcfg.tau_end)
    } else {
        (tcfg.tau_end, tcfg.tau_start)
    };
    let (from, to) = match tcfg.tau_schedule {
        TauSchedule::Constant => return Ok(tcfg.tau_start),
        TauSchedule::Increasing => (lo, hi),
        TauSchedule::Decreasing => (hi, lo),
    };
    if tcfg.epochs <= 1 {
        return Ok(from);
    }
    let t = (epoch.min(tcfg.epochs - 1)) as f64 / (tcfg.epochs - 1) as f64;
    Ok(from * (to / from).powf(t))
}

/// Everything a run needs, read from one flat key-value file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    /// Text corpus for the language-modeling task.
    pub corpus: PathBuf,
    /// Use only this many leading characters of the corpus; `0` uses all.
    pub corpus_chars: usize,
    pub split_train: f64,
    pub split_valid: f64,
    pub split_test: f64,
    /// Fraction of test tokens replaced in the attacked evaluation.
    pub attack_fraction: f64,
    pub clusters: usize,
    pub per_cluster: usize,
    pub cluster_radius: f64,
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Lm,
            corpus: PathBuf::from("data/corpus.txt"),
            corpus_chars: 0,
            split_train: 0.8,
            split_valid: 0.1,
            split_test: 0.1,
            attack_fraction: 0.2,
            clusters: 4,
            per_cluster: 256,
            cluster_radius: 2.0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn splits(&self) -> SplitFractions {
        SplitFractions {
            train: self.split_train,
            valid: self.split_valid,
            test: self.split_test,
        }
    }

    /// Parses a config file's text. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let known: BTreeSet<String> = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("{e}")))?
            .keys()
            .cloned()
            .collect();
        if let Some(bad) = table.keys().find(|k| !known.contains(*k)) {
            return Err(Error::Config(format!("unknown key '{bad}'")));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        if !(0.0..=1.0).contains(&cfg.attack_fraction) {
            return Err(Error::Config(format!("attack_fraction {} outside [0, 1]", cfg.attack_fraction)));
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; for language modeling a relative corpus path is taken
    /// relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if cfg.task == Task::Lm && cfg.corpus.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.corpus = dir.join(&cfg.corpus);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }
}
