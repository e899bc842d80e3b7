//! Seeded training of the transformer-SMoE stack.
//!
//! A run reads one [`RunConfig`], prepares its [`TaskData`], and yields one
//! [`Checkpoint`] per epoch (epoch 0 is the initialization). Every checkpoint carries
//! the routing record of the same frozen evaluation batch, so records from different
//! epochs are aligned token by token.

mod checkpoint;
mod config;
mod model;
mod optim;

pub use checkpoint::{Checkpoint, TensorEntry, FORMAT_VERSION, MAGIC};
pub use config::{
    apply_tau_schedule, Combiner, InputKind, ModelConfig, RunConfig, TauSchedule, Task, TrainConfig,
};
pub use model::{build_model, parameter_count, Batch, BatchInput, ForwardGraph, Model, Param, MIN_ROUTER_TEMPERATURE};
pub use optim::Adam;

use rand::seq::SliceRandom;

use crate::data::{self, SyntheticClusterTask, TokenCorpus};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::rng::{self, streams};

/// Data seeds of the synthetic task; fixed so that every run seed sees the same points.
pub const CLUSTER_TRAIN_SEED: u64 = 0;
pub const CLUSTER_EVAL_SEED: u64 = 1;

/// One training or evaluation sequence.
#[derive(Debug, Clone, PartialEq)]
enum Unit {
    Tokens { input: Vec<usize>, target: Vec<usize> },
    Points { index: Vec<usize>, from_eval: bool },
}

/// The prepared inputs of a run.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskData {
    Lm(TokenCorpus),
    Clusters {
        train: SyntheticClusterTask,
        eval: SyntheticClusterTask,
    },
}

/// Non-overlapping next-token windows of exactly `seq_len` predictions.
fn lm_windows(ids: &[usize], seq_len: usize) -> Vec<Unit> {
    if ids.len() < seq_len + 1 {
        return Vec::new();
    }
    (0..=ids.len() - seq_len - 1)
        .step_by(seq_len)
        .map(|s| Unit::Tokens {
            input: ids[s..s + seq_len].to_vec(),
            target: ids[s + 1..s + seq_len + 1].to_vec(),
        })
        .collect()
}

impl TaskData {
    /// Loads the corpus or generates the synthetic clusters named by `run`.
    pub fn prepare(run: &RunConfig) -> Result<Self> {
        match run.task {
            config::Task::Lm => {
                let text = std::fs::read_to_string(&run.corpus).map_err(|e| Error::io(&run.corpus, e))?;
                let text: String = if run.corpus_chars > 0 {
                    text.chars().take(run.corpus_chars).collect()
                } else {
                    text
                };
                Ok(TaskData::Lm(TokenCorpus::from_text(&text, run.splits())?))
            }
            config::Task::Clusters => {
                let d = run.model.d_model;
                let train = data::make_synthetic_clusters(run.clusters, run.per_cluster, d, run.cluster_radius, CLUSTER_TRAIN_SEED)?;
                let eval = data::make_synthetic_clusters(run.clusters, run.per_cluster, d, run.cluster_radius, CLUSTER_EVAL_SEED)?;
                Ok(TaskData::Clusters { train, eval })
            }
        }
    }

    /// `run.model` with the input kind and output size implied by the data.
    pub fn model_config(&self, run: &RunConfig) -> ModelConfig {
        let mut cfg = run.model.clone();
        match self {
            TaskData::Lm(c) => {
                cfg.input = InputKind::Tokens;
                cfg.vocab_size = c.vocab_size();
            }
            TaskData::Clusters { train, .. } => {
                cfg.input = InputKind::Vectors;
                cfg.vocab_size = train.num_clusters();
                cfg.mask_mode = crate::attention::MaskMode::Full;
            }
        }
        cfg
    }

    fn train_units(&self, seq_len: usize) -> Result<Vec<Unit>> {
        let units = match self {
            TaskData::Lm(c) => lm_windows(c.train_ids(), seq_len),
            TaskData::Clusters { train, .. } => train
                .sequences(seq_len, CLUSTER_TRAIN_SEED)?
                .into_iter()
                .map(|index| Unit::Points { index, from_eval: false })
                .collect(),
        };
        if units.is_empty() {
            return Err(Error::EmptyInput(format!("train split holds no sequence of length {seq_len}")));
        }
        Ok(units)
    }

    fn eval_units(&self, seq_len: usize, count: usize) -> Result<Vec<Unit>> {
        let mut units = match self {
            TaskData::Lm(c) => lm_windows(c.valid_ids(), seq_len),
            TaskData::Clusters { eval, .. } => eval
                .sequences(seq_len, CLUSTER_EVAL_SEED)?
                .into_iter()
                .map(|index| Unit::Points { index, from_eval: true })
                .collect(),
        };
        units.truncate(count);
        if units.is_empty() {
            return Err(Error::EmptyInput(format!("evaluation split holds no sequence of length {seq_len}")));
        }
        Ok(units)
    }

    fn batch(&self, units: &[&Unit], seq_len: usize) -> Batch {
        let mut ids = Vec::new();
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut targets = Vec::new();
        for u in units {
            match (u, self) {
                (Unit::Tokens { input, target }, _) => {
                    ids.extend_from_slice(input);
                    targets.extend_from_slice(target);
                }
                (Unit::Points { index, from_eval }, TaskData::Clusters { train, eval }) => {
                    let task = if *from_eval { eval } else { train };
                    for &i in index {
                        rows.push(task.points.row(i));
                        targets.push(task.labels[i]);
                    }
                }
                (Unit::Points { .. }, TaskData::Lm(_)) => unreachable!("point units only come from cluster data"),
            }
        }
        let input = match self {
            TaskData::Lm(_) => BatchInput::Tokens(ids),
            TaskData::Clusters { train, .. } => {
                let d = train.points.cols();
                let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
                BatchInput::Vectors(Tensor::new(vec![rows.len(), d], data).expect("rows of equal width"))
            }
        };
        Batch { input, targets, seq_len }
    }

    /// The frozen evaluation batch used for every routing record of a run.
    pub fn eval_batch(&self, tcfg: &TrainConfig) -> Result<Batch> {
        let units = self.eval_units(tcfg.seq_len, tcfg.eval_sequences)?;
        Ok(self.batch(&units.iter().collect::<Vec<_>>(), tcfg.seq_len))
    }
}

/// FNV-1a hash of a batch's inputs and targets, as 16 hex digits.
pub fn batch_fingerprint(batch: &Batch) -> String {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ u64::from(b)).wrapping_mul(PRIME);
        }
    };
    feed(&(batch.seq_len as u64).to_le_bytes());
    match &batch.input {
        BatchInput::Tokens(ids) => ids.iter().for_each(|&i| feed(&(i as u64).to_le_bytes())),
        BatchInput::Vectors(x) => x.data().iter().for_each(|v| feed(&v.to_le_bytes())),
    }
    batch.targets.iter().for_each(|&t| feed(&(t as u64).to_le_bytes()));
    format!("{h:016x}")
}

/// Prepares data and a freshly initialized model for `run`.
pub fn setup(run: &RunConfig) -> Result<(TaskData, Model)> {
    run.train.validate()?;
    let data = TaskData::prepare(run)?;
    let cfg = data.model_config(run);
    if run.train.seq_len > cfg.max_seq_len {
        return Err(Error::Validation(format!(
            "seq_len {} exceeds max_seq_len {}",
            run.train.seq_len, cfg.max_seq_len
        )));
    }
    let model = build_model(&cfg, run.train.seed)?;
    Ok((data, model))
}

/// Trains `model` for `run.train.epochs` epochs and returns every checkpoint,
/// starting with the initial one. `on_checkpoint` sees each checkpoint as soon as it exists.
/// Numeric validation failures inside an epoch mean the weights have diverged.
fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::Validation(reason) => Error::TrainingFailure { epoch, reason },
        other => other,
    }
}

pub fn train(
    model: &mut Model,
    data: &TaskData,
    run: &RunConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Vec<Checkpoint>> {
    let t = &run.train;
    t.validate()?;
    let mut stored_run = run.clone();
    stored_run.model = model.config.clone();
    let eval = data.eval_batch(t)?;
    let fingerprint = batch_fingerprint(&eval);
    let units = data.train_units(t.seq_len)?;
    let mut order: Vec<usize> = (0..units.len()).collect();
    let mut shuffle = rng::substream(t.seed, streams::BATCHES);
    let mut opt = Adam::new(&model.params, t.learning_rate, t.beta1, t.beta2, t.adam_eps, t.grad_clip);

    let tau0 = apply_tau_schedule(t, 0)?;
    let (loss0, layers0) = model.evaluate_batch(&eval, tau0)?;
    let mut first = Checkpoint::new(
        model,
        &stored_run,
        0,
        crate::metrics::RoutingRecord { epoch: 0, layers: layers0 },
        None,
        loss0,
        tau0,
    );
    first.eval_fingerprint = fingerprint.clone();
    on_checkpoint(&first)?;
    let mut checkpoints = vec![first];

    for epoch in 1..=t.epochs {
        let tau = apply_tau_schedule(t, epoch - 1)?;
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        for chunk in order.chunks(t.batch_size) {
            let batch_units: Vec<&Unit> = chunk.iter().map(|&i| &units[i]).collect();
            let batch = data.batch(&batch_units, t.seq_len);
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let f = model
                .forward_graph(&mut g, &vars, &batch, tau)
                .map_err(|e| diverged(e, epoch))?;
            let loss = g.cross_entropy(f.logits, &batch.targets)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    reason: format!("batch loss is {value}"),
                });
            }
            let grads = g.backward(loss)?;
            let per_param: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.get(v).cloned()).collect();
            if per_param.iter().flatten().any(|gr| !gr.is_finite()) {
                return Err(Error::TrainingFailure {
                    epoch,
                    reason: "non-finite gradient".into(),
                });
            }
            opt.step(&mut model.params, &per_param);
            model.project_constraints();
            if let Some(p) = model.params.iter().find(|p| !p.value.is_finite()) {
                return Err(Error::TrainingFailure {
                    epoch,
                    reason: format!("parameter {} became non-finite", p.name),
                });
            }
            loss_sum += value * batch.rows() as f64;
            rows += batch.rows();
        }
        let (eval_loss, layers) = model.evaluate_batch(&eval, tau).map_err(|e| diverged(e, epoch))?;
        if !eval_loss.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                reason: format!("evaluation loss is {eval_loss}"),
            });
        }
        let mut ck = Checkpoint::new(
            model,
            &stored_run,
            epoch,
            crate::metrics::RoutingRecord { epoch, layers },
            Some(loss_sum / rows as f64),
            eval_loss,
            tau,
        );
        ck.eval_fingerprint = fingerprint.clone();
        on_checkpoint(&ck)?;
        checkpoints.push(ck);
    }
    Ok(checkpoints)
}

/// `exp` of the mean cross-entropy of `logits` rows against `targets`.
pub fn perplexity_from_logits(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, targets)?;
    Ok(g.value(ce).data()[0].exp())
}

/// Windows scored together by [`evaluate_ppl`].
const EVAL_BATCH: usize = 16;

/// Perplexity of next-token prediction over `ids`.
///
/// The stream is cut into non-overlapping windows of `seq_len` predictions (the last
/// one may be shorter); each window sees only its own prefix as context.
pub fn evaluate_ppl(model: &Model, ids: &[usize], seq_len: usize, tau: f64) -> Result<f64> {
    if ids.len() < 2 {
        return Err(Error::Usage(format!("perplexity needs at least two tokens, got {}", ids.len())));
    }
    if seq_len == 0 {
        return Err(Error::Usage("perplexity window must be positive".into()));
    }
    let predictions = ids.len() - 1;
    let mut windows: Vec<(usize, usize)> = Vec::new();
    let mut s = 0;
    while s < predictions {
        let len = seq_len.min(predictions - s);
        windows.push((s, len));
        s += len;
    }
    let mut total = 0.0;
    let full: Vec<&(usize, usize)> = windows.iter().filter(|w| w.1 == seq_len).collect();
    let tail: Vec<&(usize, usize)> = windows.iter().filter(|w| w.1 != seq_len).collect();
    for group in full.chunks(EVAL_BATCH).chain(tail.chunks(1)) {
        let len = group[0].1;
        let mut input = Vec::with_capacity(group.len() * len);
        let mut targets = Vec::with_capacity(group.len() * len);
        for &&(s, l) in group {
            input.extend_from_slice(&ids[s..s + l]);
            targets.extend_from_slice(&ids[s + 1..s + l + 1]);
        }
        let batch = Batch {
            input: BatchInput::Tokens(input),
            targets,
            seq_len: len,
        };
        let (loss, _) = model.evaluate_batch(&batch, tau)?;
        total += loss * batch.rows() as f64;
    }
    Ok((total / predictions as f64).exp())
}
