//! The overlap-aware retrieval network.
//!
//! A query/snippet pair is scored in four steps. Each side's pooled overlap
//! vector is bucketed and embedded, then refined by a stack of mechanisms
//! (self-attention, gating against character embeddings, convolution) into a
//! token-level encoding. The two encodings are pooled and also attend to each
//! other. A small perceptron turns the four resulting vectors into two logits,
//! and the relevance score is the softmax probability of the first.

mod config;
pub mod layers;
pub mod params;

#[cfg(test)]
mod tests;

use rayon::prelude::*;

pub use config::{ModelConfig, MODEL_KEYS};
pub use layers::Mode;
pub use params::{init_params, layout, ModelVars, ParamSpec};

use crate::config::{ConfigError, KeyValues};
use crate::corpus::{RetrievalCase, TokenSeq};
use crate::numerics::{softmax, Checkpoint, Graph, NumericsError, ParamSet, Tensor, Var};
use crate::overlap::{pair_features, OverlapError, OverlapMetric, OverlapVector};

/// Index of the "relevant" class in the prediction logits.
pub const RELEVANT_CLASS: usize = 0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Overlap(#[from] OverlapError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("position encoding needs an even width, got {0}")]
    OddDimension(usize),
    #[error("empty token sequence")]
    EmptySequence,
}

/// A tokenized pair with both pooled overlap vectors precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInput {
    pub query: TokenSeq,
    pub code: TokenSeq,
    pub overlap_nl: OverlapVector,
    pub overlap_code: OverlapVector,
}

impl PairInput {
    pub fn new(
        metric: OverlapMetric,
        query: &TokenSeq,
        code: &TokenSeq,
    ) -> Result<Self, ModelError> {
        let (overlap_nl, overlap_code) = pair_features(metric, query, code)?;
        Ok(Self {
            query: query.clone(),
            code: code.clone(),
            overlap_nl,
            overlap_code,
        })
    }
}

/// Records the forward pass for every pair on `g`, returning `[2]` logits each.
///
/// Character embeddings for all sequences are computed together, so tokens
/// shared across pairs are embedded once.
pub fn forward_logits(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &ModelConfig,
    pairs: &[&PairInput],
    mode: &mut Mode,
) -> Result<Vec<Var>, ModelError> {
    let seqs: Vec<&TokenSeq> = pairs.iter().flat_map(|p| [&p.query, &p.code]).collect();
    let chars = layers::char_embed(g, &vars.chars, &seqs)?;
    let mut out = Vec::with_capacity(pairs.len());
    for (p, t) in pairs.iter().zip(chars.chunks(2)) {
        let x_nl = layers::embed_overlap(g, vars.bucket_table, &p.overlap_nl)?;
        let x_code = layers::embed_overlap(g, vars.bucket_table, &p.overlap_code)?;
        let enc_nl = layers::encoder_forward(g, x_nl, t[0], &vars.nl, cfg, mode)?;
        let enc_code = layers::encoder_forward(g, x_code, t[1], &vars.code, cfg, mode)?;
        let pool_nl = layers::pool_encoder(g, enc_nl, &vars.nl.pool, vars.pool_pad)?;
        let pool_code = layers::pool_encoder(g, enc_code, &vars.code.pool, vars.pool_pad)?;
        let (cross_nl, cross_code) = layers::cross_attention_block(
            g,
            enc_nl,
            enc_code,
            &vars.cross_nl,
            &vars.cross_code,
            cfg.heads,
        )?;
        out.push(layers::predict(
            g,
            &[pool_nl, pool_code, cross_nl, cross_code],
            &vars.fc1,
            &vars.fc2,
            mode,
        )?);
    }
    Ok(out)
}

/// Probability of the relevant class.
pub fn relevance_from_logits(logits: &[f64]) -> f64 {
    softmax(&Tensor::vector(logits.to_vec())).data()[RELEVANT_CLASS]
}

/// A configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

impl Model {
    /// Fresh randomly initialized model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        params::check_params(&config, &params)?;
        if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(NumericsError::NonFiniteGradient(name.to_string()).into());
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn pair_input(&self, query: &TokenSeq, code: &TokenSeq) -> Result<PairInput, ModelError> {
        PairInput::new(self.config.overlap_metric, query, code)
    }

    /// Inference-mode logits for each pair, all on one graph.
    pub fn logits(&self, pairs: &[&PairInput]) -> Result<Vec<[f64; 2]>, ModelError> {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &self.params, &self.config, false)?;
        let out = forward_logits(&mut g, &vars, &self.config, pairs, &mut Mode::inference())?;
        Ok(out
            .into_iter()
            .map(|v| {
                let d = g.value(v).data();
                [d[0], d[1]]
            })
            .collect())
    }

    /// Relevance score in `(0, 1)` for each pair.
    pub fn score_pairs(&self, pairs: &[&PairInput]) -> Result<Vec<f64>, ModelError> {
        Ok(self
            .logits(pairs)?
            .iter()
            .map(|l| relevance_from_logits(l))
            .collect())
    }

    pub fn score(&self, query: &TokenSeq, code: &TokenSeq) -> Result<f64, ModelError> {
        let p = self.pair_input(query, code)?;
        Ok(self.score_pairs(&[&p])?[0])
    }

    /// Scores every candidate of a case, in candidate order.
    pub fn score_case(&self, case: &RetrievalCase) -> Result<Vec<f64>, ModelError> {
        let pairs = case
            .candidates
            .iter()
            .map(|c| self.pair_input(&case.query, c))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&PairInput> = pairs.iter().collect();
        self.score_pairs(&refs)
    }

    /// Scores many cases in parallel on the current rayon pool.
    pub fn score_cases(&self, cases: &[RetrievalCase]) -> Result<Vec<Vec<f64>>, ModelError> {
        cases.par_iter().map(|c| self.score_case(c)).collect()
    }

    /// One line per parameter (`name shape count`) and a total line.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for spec in layout(&self.config) {
            let n: usize = spec.shape.iter().product();
            s.push_str(&format!("{}\t{:?}\t{}\n", spec.name, spec.shape, n));
        }
        s.push_str(&format!("total\t{}\n", self.params.num_values()));
        s
    }

    pub fn to_checkpoint(&self, step_count: u64) -> Checkpoint {
        self.to_checkpoint_with(step_count, &KeyValues::new())
    }

    /// Checkpoint whose config text also carries `metadata` (seeds, run
    /// options). Model keys always come from this model.
    pub fn to_checkpoint_with(&self, step_count: u64, metadata: &KeyValues) -> Checkpoint {
        let mut kv = metadata.clone();
        self.config.write_into(&mut kv);
        Checkpoint {
            config_text: kv.to_string(),
            step_count,
            params: self.params.clone(),
        }
    }

    /// Restores a model; config keys other than the model's own are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let kv = KeyValues::parse(&ckpt.config_text)?;
        let mut config = ModelConfig::default();
        config.apply(&kv)?;
        Self::from_params(config, ckpt.params.clone())
    }
}
