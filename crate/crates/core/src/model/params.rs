//! Parameter naming, shapes, initialization, and binding onto a graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::corpus::ALPHABET_SIZE;
use crate::numerics::{Graph, ParamSet, Tensor, Var};
use crate::overlap::NUM_BUCKETS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, 0.02).
    Embedding,
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn(usize),
    Zeros,
    Ones,
}

/// One entry of the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct Layout(Vec<ParamSpec>);

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.push(format!("{prefix}.w"), vec![d_in, d_out], Init::FanIn(d_in));
        self.push(format!("{prefix}.b"), vec![d_out], Init::Zeros);
    }

    fn conv(&mut self, prefix: &str, k: usize, d_in: usize, d_out: usize) {
        self.push(
            format!("{prefix}.w"),
            vec![k, d_in, d_out],
            Init::FanIn(k * d_in),
        );
        self.push(format!("{prefix}.b"), vec![d_out], Init::Zeros);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{part}"), d, d);
        }
    }

    fn cross(&mut self, prefix: &str, d: usize) {
        self.attention(&format!("{prefix}.attn"), d);
        self.conv(&format!("{prefix}.conv1"), CROSS_KERNEL, d, d);
        self.conv(&format!("{prefix}.conv2"), CROSS_KERNEL, d, d);
    }
}

/// Window of the two convolutions after each cross-attention direction.
pub const CROSS_KERNEL: usize = 3;
pub(crate) const CHAR_KERNELS: [usize; 2] = [3, 5];

/// Every parameter of a model with this configuration, in a fixed order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let k = cfg.conv_kernel;
    let mut l = Layout(Vec::new());
    l.push("embed.char".into(), vec![ALPHABET_SIZE, d], Init::Embedding);
    l.push("embed.bucket".into(), vec![NUM_BUCKETS, d], Init::Embedding);
    l.conv("char.conv1", CHAR_KERNELS[0], d, d);
    l.conv("char.conv2", CHAR_KERNELS[1], d, d);
    l.conv("char.conv3", cfg.char_len, d, d);
    for enc in ["nl", "code"] {
        for m in 0..cfg.layers {
            let p = format!("{enc}.mech{m}");
            l.attention(&format!("{p}.attn"), d);
            for part in [
                "q",
                "key_control",
                "value_control",
                "key_semantic",
                "value_semantic",
                "out",
            ] {
                l.linear(&format!("{p}.gate.{part}"), d, d);
            }
            l.conv(&format!("{p}.conv1"), k, d, cfg.conv_first);
            l.conv(&format!("{p}.conv2"), k, cfg.conv_first, d);
            l.push(format!("{p}.norm.gain"), vec![d], Init::Ones);
            l.push(format!("{p}.norm.bias"), vec![d], Init::Zeros);
        }
        l.conv(&format!("{enc}.pool"), k, d, d);
    }
    l.push("pool.pad".into(), vec![d], Init::Embedding);
    if cfg.share_cross_weights {
        l.cross("cross", d);
    } else {
        l.cross("cross_nl", d);
        l.cross("cross_code", d);
    }
    l.linear("head.fc1", 4 * d, cfg.mlp_hidden);
    l.linear("head.fc2", cfg.mlp_hidden, 2);
    l.0
}

/// Fresh parameters drawn from a seeded generator.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    layout(cfg)
        .into_iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Embedding => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            let t = Tensor::new(spec.shape, data).expect("layout shapes match data");
            (spec.name, t)
        })
        .collect()
}

/// Checks that `params` has exactly the layout's names and shapes.
pub fn check_params(cfg: &ModelConfig, params: &ParamSet) -> Result<(), ModelError> {
    let specs = layout(cfg);
    for spec in &specs {
        let t = params
            .get(&spec.name)
            .ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(ModelError::ParamShape {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    if params.len() != specs.len() {
        let extra = params
            .names()
            .find(|n| !specs.iter().any(|s| s.name == *n))
            .unwrap_or_default()
            .to_string();
        return Err(ModelError::UnexpectedParam(extra));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct GatingWeights {
    pub q: Linear,
    pub key_control: Linear,
    pub value_control: Linear,
    pub key_semantic: Linear,
    pub value_semantic: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct MechanismWeights {
    pub attn: AttentionWeights,
    pub gate: GatingWeights,
    pub conv1: Conv,
    pub conv2: Conv,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub mechanisms: Vec<MechanismWeights>,
    pub pool: Conv,
}

#[derive(Debug, Clone, Copy)]
pub struct CharWeights {
    pub table: Var,
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossWeights {
    pub attn: AttentionWeights,
    pub conv1: Conv,
    pub conv2: Conv,
}

/// Every parameter placed on a graph, grouped by layer.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub chars: CharWeights,
    pub bucket_table: Var,
    pub pool_pad: Var,
    pub nl: EncoderWeights,
    pub code: EncoderWeights,
    pub cross_nl: CrossWeights,
    pub cross_code: CrossWeights,
    pub fc1: Linear,
    pub fc2: Linear,
    /// `(name, var)` for every bound parameter, in layout order.
    pub bound: Vec<(String, Var)>,
}

struct Binder<'a> {
    g: &'a mut Graph,
    params: &'a ParamSet,
    trainable: bool,
    bound: Vec<(String, Var)>,
}

impl Binder<'_> {
    fn var(&mut self, name: &str) -> Result<Var, ModelError> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let v = self.g.leaf(t.clone(), self.trainable);
        self.bound.push((name.to_string(), v));
        Ok(v)
    }

    fn linear(&mut self, prefix: &str) -> Result<Linear, ModelError> {
        Ok(Linear {
            w: self.var(&format!("{prefix}.w"))?,
            b: self.var(&format!("{prefix}.b"))?,
        })
    }

    fn conv(&mut self, prefix: &str) -> Result<Conv, ModelError> {
        Ok(Conv {
            w: self.var(&format!("{prefix}.w"))?,
            b: self.var(&format!("{prefix}.b"))?,
        })
    }

    fn attention(&mut self, prefix: &str) -> Result<AttentionWeights, ModelError> {
        Ok(AttentionWeights {
            q: self.linear(&format!("{prefix}.q"))?,
            k: self.linear(&format!("{prefix}.k"))?,
            v: self.linear(&format!("{prefix}.v"))?,
            o: self.linear(&format!("{prefix}.o"))?,
        })
    }

    fn cross(&mut self, prefix: &str) -> Result<CrossWeights, ModelError> {
        Ok(CrossWeights {
            attn: self.attention(&format!("{prefix}.attn"))?,
            conv1: self.conv(&format!("{prefix}.conv1"))?,
            conv2: self.conv(&format!("{prefix}.conv2"))?,
        })
    }

    fn encoder(&mut self, enc: &str, layers: usize) -> Result<EncoderWeights, ModelError> {
        let mut mechanisms = Vec::with_capacity(layers);
        for m in 0..layers {
            let p = format!("{enc}.mech{m}");
            mechanisms.push(MechanismWeights {
                attn: self.attention(&format!("{p}.attn"))?,
                gate: GatingWeights {
                    q: self.linear(&format!("{p}.gate.q"))?,
                    key_control: self.linear(&format!("{p}.gate.key_control"))?,
                    value_control: self.linear(&format!("{p}.gate.value_control"))?,
                    key_semantic: self.linear(&format!("{p}.gate.key_semantic"))?,
                    value_semantic: self.linear(&format!("{p}.gate.value_semantic"))?,
                    out: self.linear(&format!("{p}.gate.out"))?,
                },
                conv1: self.conv(&format!("{p}.conv1"))?,
                conv2: self.conv(&format!("{p}.conv2"))?,
                norm_gain: self.var(&format!("{p}.norm.gain"))?,
                norm_bias: self.var(&format!("{p}.norm.bias"))?,
            });
        }
        Ok(EncoderWeights {
            mechanisms,
            pool: self.conv(&format!("{enc}.pool"))?,
        })
    }
}

impl ModelVars {
    /// Places every parameter on `g` as a leaf; `trainable` leaves get gradients.
    pub fn bind(
        g: &mut Graph,
        params: &ParamSet,
        cfg: &ModelConfig,
        trainable: bool,
    ) -> Result<Self, ModelError> {
        let mut b = Binder {
            g,
            params,
            trainable,
            bound: Vec::new(),
        };
        let chars = CharWeights {
            table: b.var("embed.char")?,
            conv1: b.conv("char.conv1")?,
            conv2: b.conv("char.conv2")?,
            conv3: b.conv("char.conv3")?,
        };
        let bucket_table = b.var("embed.bucket")?;
        let nl = b.encoder("nl", cfg.layers)?;
        let code = b.encoder("code", cfg.layers)?;
        let pool_pad = b.var("pool.pad")?;
        let (cross_nl, cross_code) = if cfg.share_cross_weights {
            let c = b.cross("cross")?;
            (c, c)
        } else {
            (b.cross("cross_nl")?, b.cross("cross_code")?)
        };
        let fc1 = b.linear("head.fc1")?;
        let fc2 = b.linear("head.fc2")?;
        Ok(Self {
            chars,
            bucket_table,
            pool_pad,
            nl,
            code,
            cross_nl,
            cross_code,
            fc1,
            fc2,
            bound: b.bound,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_init_and_bind() {
        let cfg = ModelConfig::small();
        let params = init_params(&cfg, 1);
        check_params(&cfg, &params).unwrap();
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &params, &cfg, true).unwrap();
        assert_eq!(vars.bound.len(), params.len());
    }

    #[test]
    fn shared_cross_weights_layout() {
        let cfg = ModelConfig {
            share_cross_weights: true,
            ..ModelConfig::small()
        };
        let names: Vec<String> = layout(&cfg).into_iter().map(|s| s.name).collect();
        assert!(names.iter().any(|n| n.starts_with("cross.")));
        assert!(!names.iter().any(|n| n.starts_with("cross_nl.")));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::small();
        assert_eq!(init_params(&cfg, 3), init_params(&cfg, 3));
        assert_ne!(init_params(&cfg, 3), init_params(&cfg, 4));
    }

    #[test]
    fn check_params_reports_missing() {
        let cfg = ModelConfig::small();
        let mut params = init_params(&cfg, 1);
        let bigger = ModelConfig {
            layers: 3,
            ..cfg.clone()
        };
        assert!(matches!(
            check_params(&bigger, &params),
            Err(ModelError::MissingParam(_))
        ));
        params.insert("stray", Tensor::scalar(0.0));
        assert!(matches!(
            check_params(&cfg, &params),
            Err(ModelError::UnexpectedParam(n)) if n == "stray"
        ));
    }
}
