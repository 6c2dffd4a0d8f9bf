//! Forward building blocks. Each function records its computation on a
//! [`Graph`] and returns the resulting [`Var`].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{AttentionWeights, CharWeights, Conv, CrossWeights, EncoderWeights};
use super::params::{GatingWeights, Linear, MechanismWeights};
use super::{ModelConfig, ModelError};
use crate::corpus::TokenSeq;
use crate::numerics::{Graph, NumericsError, Padding, Tensor, Var};
use crate::overlap::{bucketize, OverlapVector};

/// Whether dropout is active, and the generator that draws its masks.
pub struct Mode {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Mode {
    pub fn inference() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn training(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        match &mut self.rng {
            Some(rng) => g.dropout(x, self.rate, true, rng),
            None => Ok(x),
        }
    }
}

/// `x W + b` for `x` of shape `[L, d_in]`.
pub fn linear(g: &mut Graph, x: Var, l: &Linear) -> Result<Var, NumericsError> {
    let y = g.matmul(x, l.w)?;
    g.add_row(y, l.b)
}

pub fn conv(g: &mut Graph, x: Var, c: &Conv, padding: Padding) -> Result<Var, NumericsError> {
    g.conv1d(x, c.w, Some(c.b), padding)
}

/// Sinusoidal position table `[len, d]`, positions starting at 0.
pub fn position_table(len: usize, d: usize) -> Result<Tensor, ModelError> {
    if !d.is_multiple_of(2) {
        return Err(ModelError::OddDimension(d));
    }
    let mut data = vec![0.0; len * d];
    for i in 0..len {
        for j in 0..d / 2 {
            let angle = i as f64 / 10000f64.powf(2.0 * j as f64 / d as f64);
            data[i * d + 2 * j] = angle.sin();
            data[i * d + 2 * j + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![len, d], data)?)
}

pub fn position_encode(g: &mut Graph, x: Var) -> Result<Var, ModelError> {
    let t = g.value(x);
    let table = position_table(t.outer_len(), t.last_dim())?;
    let p = g.constant(table);
    Ok(g.add(x, p)?)
}

/// Looks up each pooled score's bucket in `table` (`[100, d]`).
pub fn embed_overlap(g: &mut Graph, table: Var, ov: &OverlapVector) -> Result<Var, ModelError> {
    let buckets = ov
        .values()
        .iter()
        .map(|&s| bucketize(s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(g.gather_rows(table, &buckets)?)
}

/// Multi-head attention output `[Lq, d]` and each head's `[Lq, Lk]` weights.
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<(Var, Vec<Var>), NumericsError> {
    let d = g.value(q_in).last_dim();
    if g.value(k_in).shape() != g.value(v_in).shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "attention",
            left: g.value(k_in).shape().to_vec(),
            right: g.value(v_in).shape().to_vec(),
        });
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(NumericsError::Invalid(format!(
            "attention: {d} columns do not split into {heads} heads"
        )));
    }
    let dk = d / heads;
    let q = linear(g, q_in, &w.q)?;
    let k = linear(g, k_in, &w.k)?;
    let v = linear(g, v_in, &w.v)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for s in 0..heads {
        let qs = g.slice_cols(q, s * dk, dk)?;
        let ks = g.slice_cols(k, s * dk, dk)?;
        let vs = g.slice_cols(v, s * dk, dk)?;
        let kt = g.transpose(ks)?;
        let scores = g.matmul(qs, kt)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let a = g.softmax(scores)?;
        outs.push(g.matmul(a, vs)?);
        weights.push(a);
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok((linear(g, joined, &w.o)?, weights))
}

/// Character embeddings for several sequences at once.
///
/// Distinct tokens are embedded once and shared by every position that uses
/// them. Returns one `[L, d]` var per input sequence.
pub fn char_embed(
    g: &mut Graph,
    w: &CharWeights,
    seqs: &[&TokenSeq],
) -> Result<Vec<Var>, ModelError> {
    let Some(first) = seqs.first() else {
        return Ok(Vec::new());
    };
    let cl = first.char_len();
    let mut unique: HashMap<&[u8], usize> = HashMap::new();
    let mut chars: Vec<usize> = Vec::new();
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(seqs.len());
    for seq in seqs {
        if seq.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if seq.char_len() != cl {
            return Err(ModelError::Numerics(NumericsError::Invalid(format!(
                "char_embed: mixed character lengths {cl} and {}",
                seq.char_len()
            ))));
        }
        let idx = (0..seq.len())
            .map(|i| {
                let row = seq.char_row(i);
                *unique.entry(row).or_insert_with(|| {
                    chars.extend(row.iter().map(|&c| c as usize));
                    chars.len() / cl - 1
                })
            })
            .collect();
        rows.push(idx);
    }
    let x = g.gather_rows(w.table, &chars)?;
    let x = g.conv1d_batched(x, cl, w.conv1.w, Some(w.conv1.b), Padding::Zero)?;
    let x = g.gelu(x)?;
    let x = g.conv1d_batched(x, cl, w.conv2.w, Some(w.conv2.b), Padding::Zero)?;
    let x = g.gelu(x)?;
    let tokens = g.conv1d_batched(x, cl, w.conv3.w, Some(w.conv3.b), Padding::Valid)?;
    rows.iter()
        .map(|idx| Ok(g.gather_rows(tokens, idx)?))
        .collect()
}

/// Per-head gated mix of the control and semantic streams.
///
/// Returns the projected output `[L, d]` and the weight on the control value
/// for each head, `[L, H]`.
pub fn gating(
    g: &mut Graph,
    control: Var,
    semantic: Var,
    w: &GatingWeights,
    heads: usize,
) -> Result<(Var, Var), NumericsError> {
    let (tc, ts) = (g.value(control), g.value(semantic));
    if tc.shape() != ts.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "gating",
            left: tc.shape().to_vec(),
            right: ts.shape().to_vec(),
        });
    }
    let d = tc.last_dim();
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::Invalid(format!(
            "gating: {d} columns do not split into {heads} heads"
        )));
    }
    let dk = d / heads;
    let mut ind = Tensor::zeros(&[d, heads]);
    for j in 0..d {
        ind.data_mut()[j * heads + j / dk] = 1.0;
    }
    let mut ind_t = Tensor::zeros(&[heads, d]);
    for j in 0..d {
        ind_t.data_mut()[(j / dk) * d + j] = 1.0;
    }
    let ind = g.constant(ind);
    let ind_t = g.constant(ind_t);

    let q = linear(g, control, &w.q)?;
    let ko = linear(g, control, &w.key_control)?;
    let vo = linear(g, control, &w.value_control)?;
    let kc = linear(g, semantic, &w.key_semantic)?;
    let vc = linear(g, semantic, &w.value_semantic)?;
    let qo = g.mul(q, ko)?;
    let logit_o = g.matmul(qo, ind)?;
    let qc = g.mul(q, kc)?;
    let logit_c = g.matmul(qc, ind)?;
    let diff = g.sub(logit_o, logit_c)?;
    let gate = g.sigmoid(diff)?;
    let expand = g.matmul(gate, ind_t)?;
    let delta = g.sub(vo, vc)?;
    let shift = g.mul(expand, delta)?;
    let mixed = g.add(vc, shift)?;
    Ok((linear(g, mixed, &w.out)?, gate))
}

/// One attention, gating, convolution mechanism with its residual and norm.
pub fn mechanism(
    g: &mut Graph,
    x: Var,
    semantic: Var,
    w: &MechanismWeights,
    cfg: &ModelConfig,
    mode: &mut Mode,
) -> Result<Var, ModelError> {
    let e = position_encode(g, x)?;
    let (a, _) = multi_head_attention(g, e, e, e, &w.attn, cfg.heads)?;
    let (h, _) = gating(g, a, semantic, &w.gate, cfg.heads)?;
    let c = conv(g, h, &w.conv1, Padding::Zero)?;
    let c = g.gelu(c)?;
    let c = conv(g, c, &w.conv2, Padding::Zero)?;
    let c = mode.dropout(g, c)?;
    let r = g.add(x, c)?;
    Ok(g.layer_norm(r, w.norm_gain, w.norm_bias)?)
}

/// Runs the mechanism stack over an embedded overlap vector `x` (`[L, d]`).
pub fn encoder_forward(
    g: &mut Graph,
    x: Var,
    semantic: Var,
    w: &EncoderWeights,
    cfg: &ModelConfig,
    mode: &mut Mode,
) -> Result<Var, ModelError> {
    w.mechanisms
        .iter()
        .try_fold(x, |h, m| mechanism(g, h, semantic, m, cfg, mode))
}

/// Convolution padded with `pad`, then the column-wise max over positions.
pub fn pool_encoder(g: &mut Graph, x: Var, w: &Conv, pad: Var) -> Result<Var, NumericsError> {
    let c = conv(g, x, w, Padding::Learned(pad))?;
    g.max_rows(c)
}

/// One cross-attention direction: `query` attends over `other`, followed by two
/// convolutions and max pooling. Returns a `[d]` vector.
pub fn cross_direction(
    g: &mut Graph,
    query: Var,
    other: Var,
    w: &CrossWeights,
    heads: usize,
) -> Result<Var, NumericsError> {
    let (a, _) = multi_head_attention(g, query, other, other, &w.attn, heads)?;
    let c = conv(g, a, &w.conv1, Padding::Zero)?;
    let c = g.gelu(c)?;
    let c = conv(g, c, &w.conv2, Padding::Zero)?;
    g.max_rows(c)
}

/// Both cross-attention directions: `(nl attends code, code attends nl)`.
pub fn cross_attention_block(
    g: &mut Graph,
    nl: Var,
    code: Var,
    w_nl: &CrossWeights,
    w_code: &CrossWeights,
    heads: usize,
) -> Result<(Var, Var), NumericsError> {
    Ok((
        cross_direction(g, nl, code, w_nl, heads)?,
        cross_direction(g, code, nl, w_code, heads)?,
    ))
}

/// Two-layer perceptron over the concatenated features; returns `[2]` logits.
pub fn predict(
    g: &mut Graph,
    features: &[Var],
    fc1: &Linear,
    fc2: &Linear,
    mode: &mut Mode,
) -> Result<Var, NumericsError> {
    let f = g.concat(features)?;
    let n = g.value(f).len();
    let f = g.reshape(f, vec![1, n])?;
    let h = linear(g, f, fc1)?;
    let h = g.gelu(h)?;
    let h = mode.dropout(g, h)?;
    let out = linear(g, h, fc2)?;
    g.reshape(out, vec![2])
}
