//! Model and trainer configuration.
//!
//! Both configs can be read from one flat key-value document (TOML syntax,
//! no tables). Keys that do not name a known field are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where layer normalization sits relative to the residual adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `LN(x + sublayer(x))`
    Post,
    /// `x + sublayer(LN(x))`
    Pre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding (and hidden) dimension.
    pub dim: usize,
    /// Number of stacked hybrid layers.
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Maximum candidates per set; also the number of document slots.
    pub k_max: usize,
    pub ln_eps: f64,
    /// Dropout on attention weights and the FFN hidden layer (training only).
    pub dropout: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
    pub norm: NormPlacement,
    /// Add document-slot embeddings and sinusoidal chunk positions to passages.
    pub positional: bool,
    /// Run the document-masked attention module next to the shared one.
    pub hybrid: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            layers: 16,
            heads: 8,
            ffn_dim: 2048,
            k_max: 20,
            ln_eps: 1e-5,
            dropout: 0.1,
            seed: 0,
            norm: NormPlacement::Post,
            positional: true,
            hybrid: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return fail("dim, heads, layers and ffn_dim must all be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.k_max == 0 {
            return fail("k_max must be at least 1".into());
        }
        if !(self.ln_eps.is_finite() && self.ln_eps > 0.0) {
            return fail(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Total number of learned scalars for this shape.
    pub fn parameter_count(&self) -> usize {
        let d = self.dim;
        let attention = 2 * 4 * d * d;
        let ffn = 2 * d * self.ffn_dim + self.ffn_dim + d;
        let norms = 4 * d;
        self.k_max * d + self.layers * (attention + ffn + norms)
    }

    pub(crate) fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub(crate) fn from_toml(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Divides similarities inside the contrastive loss. 1 means raw dot products.
    pub temperature: f64,
    /// Seed for epoch shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            max_epochs: 20,
            patience: 5,
            batch_size: 256,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        // Written so that NaN fails both checks.
        let eps_ok = self.adam_eps > 0.0;
        let decay_ok = self.weight_decay >= 0.0;
        if !eps_ok || !decay_ok {
            return fail("adam_eps must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return fail(format!(
                "need 1 <= patience <= max_epochs (patience {}, max_epochs {})",
                self.patience, self.max_epochs
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return fail(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        Ok(())
    }
}

/// Every key accepted in a config file. Missing keys keep their defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    dim: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    ffn_dim: Option<usize>,
    k_max: Option<usize>,
    ln_eps: Option<f64>,
    dropout: Option<f64>,
    norm: Option<NormPlacement>,
    positional: Option<bool>,
    hybrid: Option<bool>,
    learning_rate: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    adam_eps: Option<f64>,
    weight_decay: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    batch_size: Option<usize>,
    temperature: Option<f64>,
    seed: Option<u64>,
}

/// Parses a flat key-value config into model and trainer configs.
///
/// `seed` applies to both.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainerConfig)> {
    let file: ConfigFile =
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
    let mut model = ModelConfig::default();
    let mut trainer = TrainerConfig::default();

    macro_rules! apply {
        ($target:ident: $($field:ident),*) => {
            $(if let Some(v) = file.$field { $target.$field = v; })*
        };
    }
    apply!(model: dim, layers, heads, ffn_dim, k_max, ln_eps, dropout, norm, positional, hybrid);
    apply!(trainer: learning_rate, beta1, beta2, adam_eps, weight_decay, max_epochs, patience,
        batch_size, temperature);
    if let Some(seed) = file.seed {
        model.seed = seed;
        trainer.seed = seed;
    }

    model.validate()?;
    trainer.validate()?;
    Ok((model, trainer))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let m = ModelConfig::default();
        assert_eq!((m.dim, m.layers, m.heads, m.k_max), (768, 16, 8, 20));
        assert_eq!(m.head_dim(), 96);
        let t = TrainerConfig::default();
        assert_eq!(t.learning_rate, 1e-3);
        assert_eq!((t.max_epochs, t.patience, t.batch_size), (20, 5, 256));
        assert_eq!(t.weight_decay, 0.0);
        m.validate().unwrap();
        t.validate().unwrap();
    }

    #[test]
    fn default_parameter_count_is_about_126m() {
        let count = ModelConfig::default().parameter_count();
        assert!((125_000_000..127_500_000).contains(&count), "{count}");
    }

    #[test]
    fn heads_must_divide_dim() {
        let c = ModelConfig {
            dim: 10,
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn parses_flat_file() {
        let text = "dim = 32\nlayers = 4\nheads = 4\nk_max = 8\nbatch_size = 16\nseed = 7\nnorm = \"pre\"\n";
        let (m, t) = parse_config(text).unwrap();
        assert_eq!((m.dim, m.layers, m.heads, m.k_max), (32, 4, 4, 8));
        assert_eq!(m.norm, NormPlacement::Pre);
        assert_eq!(t.batch_size, 16);
        assert_eq!((m.seed, t.seed), (7, 7));
        assert_eq!(m.ffn_dim, 2048);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse_config("dimm = 32\n").unwrap_err();
        assert!(err.to_string().contains("dimm"), "{err}");
    }

    #[test]
    fn patience_above_max_epochs_is_rejected() {
        assert!(parse_config("max_epochs = 3\npatience = 4\n").is_err());
    }

    #[test]
    fn model_config_toml_round_trip() {
        let c = ModelConfig {
            dim: 16,
            hybrid: false,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
