use crate::config::{ConfigError, KeyValues};
use crate::corpus::TokenizerConfig;
use crate::overlap::OverlapMetric;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of stacked attention/gating/convolution mechanisms per encoder.
    pub layers: usize,
    /// Hidden and embedding size.
    pub d_model: usize,
    pub heads: usize,
    /// Characters per token in the character embedding.
    pub char_len: usize,
    /// Width of the first convolution in each mechanism.
    pub conv_first: usize,
    /// Window of the encoder convolutions.
    pub conv_kernel: usize,
    /// Width of the first layer of the prediction MLP.
    pub mlp_hidden: usize,
    pub max_len_nl: usize,
    pub max_len_code: usize,
    pub dropout_rate: f64,
    pub overlap_metric: OverlapMetric,
    /// Use one set of weights for both cross-attention directions.
    pub share_cross_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            d_model: 256,
            heads: 8,
            char_len: 16,
            conv_first: 1024,
            conv_kernel: 3,
            mlp_hidden: 1024,
            max_len_nl: 50,
            max_len_code: 200,
            dropout_rate: 0.2,
            overlap_metric: OverlapMetric::Lcs,
            share_cross_weights: false,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "layers",
    "d_model",
    "heads",
    "char_len",
    "conv_first",
    "conv_kernel",
    "mlp_hidden",
    "max_len_nl",
    "max_len_code",
    "dropout",
    "overlap_metric",
    "share_cross_weights",
];

impl ModelConfig {
    /// A compact configuration: `d_model = 64`, two mechanisms, four heads,
    /// hidden widths at four times `d_model`.
    pub fn small() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            conv_first: 256,
            mlp_hidden: 256,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!("d_model {} must be even", self.d_model));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.char_len == 0 || self.conv_first == 0 || self.mlp_hidden == 0 {
            return bad("char_len, conv_first and mlp_hidden must be positive".into());
        }
        if self.max_len_nl == 0 || self.max_len_code == 0 {
            return bad("sequence caps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout {} is outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            char_len: self.char_len,
            max_len_nl: self.max_len_nl,
            max_len_code: self.max_len_code,
        }
    }

    /// Overwrites fields from any model keys present in `kv`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<(), ConfigError> {
        kv.apply("layers", &mut self.layers)?;
        kv.apply("d_model", &mut self.d_model)?;
        kv.apply("heads", &mut self.heads)?;
        kv.apply("char_len", &mut self.char_len)?;
        kv.apply("conv_first", &mut self.conv_first)?;
        kv.apply("conv_kernel", &mut self.conv_kernel)?;
        kv.apply("mlp_hidden", &mut self.mlp_hidden)?;
        kv.apply("max_len_nl", &mut self.max_len_nl)?;
        kv.apply("max_len_code", &mut self.max_len_code)?;
        kv.apply("dropout", &mut self.dropout_rate)?;
        kv.apply("overlap_metric", &mut self.overlap_metric)?;
        kv.apply("share_cross_weights", &mut self.share_cross_weights)?;
        Ok(())
    }

    pub fn write_into(&self, kv: &mut KeyValues) {
        kv.set("layers", self.layers);
        kv.set("d_model", self.d_model);
        kv.set("heads", self.heads);
        kv.set("char_len", self.char_len);
        kv.set("conv_first", self.conv_first);
        kv.set("conv_kernel", self.conv_kernel);
        kv.set("mlp_hidden", self.mlp_hidden);
        kv.set("max_len_nl", self.max_len_nl);
        kv.set("max_len_code", self.max_len_code);
        kv.set("dropout", self.dropout_rate);
        kv.set("overlap_metric", self.overlap_metric);
        kv.set("share_cross_weights", self.share_cross_weights);
    }

    /// Canonical text form, stored in checkpoints.
    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::new();
        self.write_into(&mut kv);
        kv.to_string()
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(MODEL_KEYS)?;
        let mut cfg = Self::default();
        cfg.apply(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = ModelConfig::default();
        assert_eq!(
            (c.layers, c.d_model, c.conv_first, c.mlp_hidden),
            (3, 256, 1024, 1024)
        );
        assert_eq!(c.dropout_rate, 0.2);
        assert_eq!(c.head_dim(), 32);
        c.validate().unwrap();
    }

    #[test]
    fn text_roundtrip() {
        let c = ModelConfig {
            share_cross_weights: true,
            overlap_metric: OverlapMetric::Lcp,
            ..ModelConfig::small()
        };
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::small();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::small();
        c.conv_kernel = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::small();
        c.layers = 0;
        assert!(c.validate().is_err());
    }
}
