//! Cross-entropy training with fresh random negatives every epoch.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, KeyValues};
use crate::corpus::{
    check_size, encode, sample_others, CorpusError, Kind, RawPair, RetrievalCase, TokenSeq,
};
use crate::eval::{mrr, rank_cases, EvalError};
use crate::model::{forward_logits, Mode, Model, ModelError, ModelVars, PairInput, RELEVANT_CLASS};
use crate::numerics::{AdamConfig, AdamState, CheckpointError, GradSet, Graph, NumericsError, Var};

/// Smallest probability allowed inside the logarithm of [`cross_entropy`].
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("class {class} is out of range for {classes} probabilities")]
    Class { class: usize, classes: usize },
    #[error("non-finite loss in epoch {epoch}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss {
        epoch: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("writing training log: {0}")]
    Log(std::io::Error),
}

/// `-ln(max(probs[class], floor))`.
pub fn cross_entropy(probs: &[f64], class: usize) -> Result<f64, TrainError> {
    let p = probs.get(class).ok_or(TrainError::Class {
        class,
        classes: probs.len(),
    })?;
    Ok(-p.max(PROBABILITY_FLOOR).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Related,
    Unrelated,
}

impl Label {
    /// Position of this label in the prediction logits.
    pub fn class_index(self) -> usize {
        match self {
            Label::Related => RELEVANT_CLASS,
            Label::Unrelated => 1 - RELEVANT_CLASS,
        }
    }
}

/// One supervised pair, as indices into the training corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainExample {
    pub query: usize,
    pub code: usize,
    pub label: Label,
}

/// Every query paired with its own code and `negatives` other snippets drawn
/// uniformly without replacement. Examples are grouped by query.
pub fn sample_epoch(
    n_pairs: usize,
    negatives: usize,
    seed: u64,
) -> Result<Vec<TrainExample>, TrainError> {
    check_size(n_pairs, negatives)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_pairs * (1 + negatives));
    for q in 0..n_pairs {
        out.push(TrainExample {
            query: q,
            code: q,
            label: Label::Related,
        });
        for c in sample_others(&mut rng, n_pairs, q, negatives) {
            out.push(TrainExample {
                query: q,
                code: c,
                label: Label::Unrelated,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub negatives_per_query: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    /// Dev evaluations without improvement before stopping.
    pub patience: usize,
    /// Epochs between dev evaluations.
    pub eval_interval: usize,
    /// Stop as soon as dev MRR reaches this value.
    pub target_mrr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            negatives_per_query: 5,
            learning_rate: 1e-4,
            dropout_rate: 0.2,
            seed: 0,
            batch_size: 32,
            checkpoint_interval: 1,
            patience: 5,
            eval_interval: 1,
            target_mrr: None,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "negatives",
    "learning_rate",
    "dropout",
    "seed",
    "batch_size",
    "checkpoint_interval",
    "patience",
    "eval_interval",
    "target_mrr",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.negatives_per_query == 0 {
            return bad("negatives must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout must be in [0, 1)");
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be positive");
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<(), ConfigError> {
        kv.apply("epochs", &mut self.epochs)?;
        kv.apply("negatives", &mut self.negatives_per_query)?;
        kv.apply("learning_rate", &mut self.learning_rate)?;
        kv.apply("dropout", &mut self.dropout_rate)?;
        kv.apply("seed", &mut self.seed)?;
        kv.apply("batch_size", &mut self.batch_size)?;
        kv.apply("checkpoint_interval", &mut self.checkpoint_interval)?;
        kv.apply("patience", &mut self.patience)?;
        kv.apply("eval_interval", &mut self.eval_interval)?;
        if let Some(t) = kv.parse_opt("target_mrr")? {
            self.target_mrr = Some(t);
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_mrr: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, when a dev set was given.
    pub best_epoch: Option<usize>,
    pub best_dev_mrr: Option<f64>,
    pub stopped_early: bool,
    pub steps: u64,
}

/// Per-epoch observer; returning `Break` ends training.
pub type EpochHook<'a> = dyn FnMut(&Model, &EpochRecord) -> ControlFlow<()> + 'a;

/// Where training writes its side outputs.
#[derive(Default)]
pub struct TrainSinks<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    /// Receives one JSON record per epoch.
    pub log: Option<&'a mut dyn Write>,
    /// Extra keys stored in every checkpoint's config text.
    pub metadata: Option<&'a KeyValues>,
    /// Called after every epoch with the updated model; `Break` ends training.
    pub on_epoch: Option<&'a mut EpochHook<'a>>,
}

/// Seeds derived from the run seed, one independent stream per purpose.
fn stream_rng(seed: u64, purpose: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) ^ ((epoch as u64) << 24) ^ batch as u64);
    rng
}

fn stream_seed(seed: u64, purpose: u64, epoch: usize, batch: usize) -> u64 {
    use rand::Rng;
    stream_rng(seed, purpose, epoch, batch).random()
}

const NEGATIVES: u64 = 1;
const SHUFFLE: u64 = 2;
const DROPOUT: u64 = 3;

/// Tokenized corpus ready for pairing.
pub struct EncodedCorpus {
    pub queries: Vec<TokenSeq>,
    pub codes: Vec<TokenSeq>,
}

impl EncodedCorpus {
    pub fn new(pairs: &[RawPair], model: &Model) -> Self {
        let cfg = model.config().tokenizer();
        Self {
            queries: pairs
                .iter()
                .map(|p| encode(&p.question, Kind::NaturalLanguage, &cfg))
                .collect(),
            codes: pairs
                .iter()
                .map(|p| encode(&p.code, Kind::Code, &cfg))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn inputs(
        &self,
        model: &Model,
        examples: &[TrainExample],
    ) -> Result<Vec<PairInput>, ModelError> {
        examples
            .par_iter()
            .map(|e| model.pair_input(&self.queries[e.query], &self.codes[e.code]))
            .collect()
    }
}

/// Mean loss of `inputs` under `mode`, with gradients when `grads` is set.
fn batch_loss(
    model: &Model,
    inputs: &[&PairInput],
    labels: &[Label],
    mode: &mut Mode,
    want_grads: bool,
) -> Result<(f64, Option<GradSet>), ModelError> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, model.params(), model.config(), want_grads)?;
    let logits = forward_logits(&mut g, &vars, model.config(), inputs, mode)?;
    let picks = logits
        .iter()
        .zip(labels)
        .map(|(&l, lab)| {
            let ls = g.log_softmax(l)?;
            g.pick(ls, lab.class_index())
        })
        .collect::<Result<Vec<Var>, NumericsError>>()?;
    let all = g.concat(&picks)?;
    let mean = g.mean(all)?;
    let loss = g.scale(mean, -1.0)?;
    let value = g.value(loss).data()[0];
    if !want_grads {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss)?;
    let mut set = GradSet::new();
    for (name, v) in &vars.bound {
        if let Some(gr) = grads.take(*v) {
            match set.get_mut(name) {
                // A parameter bound more than once accumulates.
                Some(acc) => acc.iter_mut().zip(&gr).for_each(|(a, b)| *a += b),
                None => {
                    set.insert(name.clone(), gr);
                }
            }
        }
    }
    Ok((value, Some(set)))
}

/// Loss and per-parameter gradients for a batch of labelled pairs, with
/// dropout off. Exposed for gradient checking.
pub fn loss_and_gradients(
    model: &Model,
    inputs: &[&PairInput],
    labels: &[Label],
) -> Result<(f64, GradSet), ModelError> {
    let (l, g) = batch_loss(model, inputs, labels, &mut Mode::inference(), true)?;
    Ok((l, g.unwrap_or_default()))
}

/// Mean inference-mode loss over `examples`.
pub fn evaluate_loss(
    model: &Model,
    corpus: &EncodedCorpus,
    examples: &[TrainExample],
    batch_size: usize,
) -> Result<f64, TrainError> {
    let inputs = corpus.inputs(model, examples)?;
    let chunks: Vec<(f64, usize)> = inputs
        .chunks(batch_size.max(1))
        .zip(examples.chunks(batch_size.max(1)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(inp, ex)| {
            let refs: Vec<&PairInput> = inp.iter().collect();
            let labels: Vec<Label> = ex.iter().map(|e| e.label).collect();
            batch_loss(model, &refs, &labels, &mut Mode::inference(), false)
                .map(|(l, _)| (l, inp.len()))
        })
        .collect::<Result<_, _>>()?;
    let n: usize = chunks.iter().map(|c| c.1).sum();
    Ok(chunks.iter().map(|(l, k)| l * *k as f64).sum::<f64>() / n.max(1) as f64)
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.ckpt"))
}

/// Trains `model` in place on `pairs`.
///
/// With `dev` cases, the model is evaluated every `eval_interval` epochs, the
/// best parameters are kept, and training stops after `patience` evaluations
/// without improvement or once `target_mrr` is reached.
pub fn train(
    model: &mut Model,
    pairs: &[RawPair],
    dev: Option<&[RetrievalCase]>,
    cfg: &TrainConfig,
    mut sinks: TrainSinks<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_size(pairs.len(), cfg.negatives_per_query)?;
    let corpus = EncodedCorpus::new(pairs, model);
    let mut adam = AdamState::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let start = Instant::now();
    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        best_epoch: None,
        best_dev_mrr: None,
        stopped_early: false,
        steps: 0,
    };
    let mut best_params = None;
    let mut stale = 0;
    let mut last_checkpoint = None;

    for epoch in 1..=cfg.epochs {
        let neg_seed = stream_seed(cfg.seed, NEGATIVES, epoch, 0);
        let mut examples = sample_epoch(corpus.len(), cfg.negatives_per_query, neg_seed)?;
        examples.shuffle(&mut stream_rng(cfg.seed, SHUFFLE, epoch, 0));
        let inputs = corpus.inputs(model, &examples)?;

        let mut total = 0.0;
        for (b, (inp, ex)) in inputs
            .chunks(cfg.batch_size)
            .zip(examples.chunks(cfg.batch_size))
            .enumerate()
        {
            let refs: Vec<&PairInput> = inp.iter().collect();
            let labels: Vec<Label> = ex.iter().map(|e| e.label).collect();
            let mut mode =
                Mode::training(cfg.dropout_rate, stream_seed(cfg.seed, DROPOUT, epoch, b));
            let step = batch_loss(model, &refs, &labels, &mut mode, true);
            let (loss, grads) = match step {
                Ok((l, Some(g))) if l.is_finite() => (l, g),
                Ok(_) | Err(ModelError::Numerics(NumericsError::NonFinite { .. })) => {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        last_checkpoint,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            match adam.step(model.params_mut(), &grads) {
                Ok(()) => {}
                Err(NumericsError::NonFiniteGradient(_)) => {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        last_checkpoint,
                    })
                }
                Err(e) => return Err(ModelError::from(e).into()),
            }
            total += loss * inp.len() as f64;
        }
        outcome.steps = adam.step_count();
        let mean_loss = total / examples.len() as f64;

        let mut dev_mrr = None;
        if let Some(cases) = dev.filter(|_| epoch % cfg.eval_interval == 0 || epoch == cfg.epochs) {
            let m = mrr(&rank_cases(model, cases)?)?;
            dev_mrr = Some(m);
            if outcome.best_dev_mrr.is_none_or(|b| m > b) {
                outcome.best_dev_mrr = Some(m);
                outcome.best_epoch = Some(epoch);
                best_params = Some(model.params().clone());
                stale = 0;
            } else {
                stale += 1;
            }
        }

        let record = EpochRecord {
            epoch,
            mean_loss,
            dev_mrr,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {mean_loss:.4}{}",
            dev_mrr
                .map(|m| format!(", dev mrr {m:.4}"))
                .unwrap_or_default()
        );
        if let Some(w) = sinks.log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record).map_err(|e| TrainError::Log(e.into()))?;
            w.write_all(b"\n").map_err(TrainError::Log)?;
        }
        let halt = sinks
            .on_epoch
            .as_deref_mut()
            .is_some_and(|f| f(model, &record).is_break());
        outcome.epochs.push(record);

        if let Some(dir) = sinks.checkpoint_dir {
            if cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0 {
                let path = checkpoint_path(dir, epoch);
                let meta = sinks.metadata.cloned().unwrap_or_default();
                model
                    .to_checkpoint_with(adam.step_count(), &meta)
                    .save(&path)?;
                last_checkpoint = Some(path);
            }
        }

        let reached = matches!((dev_mrr, cfg.target_mrr), (Some(m), Some(t)) if m >= t);
        if halt || reached || (dev_mrr.is_some() && stale >= cfg.patience && cfg.patience > 0) {
            outcome.stopped_early = epoch < cfg.epochs;
            break;
        }
    }

    if let Some(p) = best_params {
        *model.params_mut() = p;
    }
    Ok(outcome)
}
