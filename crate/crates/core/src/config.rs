use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which stacks add the previous layer's attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LinkPlacement {
    #[default]
    None,
    Encoder,
    Decoder,
    Both,
}

impl LinkPlacement {
    pub const ALL: [LinkPlacement; 4] = [
        LinkPlacement::None,
        LinkPlacement::Encoder,
        LinkPlacement::Decoder,
        LinkPlacement::Both,
    ];

    pub fn encoder(self) -> bool {
        matches!(self, LinkPlacement::Encoder | LinkPlacement::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, LinkPlacement::Decoder | LinkPlacement::Both)
    }
}

impl std::str::FromStr for LinkPlacement {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "encoder" => Ok(Self::Encoder),
            "decoder" => Ok(Self::Decoder),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown link placement `{other}`")),
        }
    }
}

/// Where the link term for layer `n` comes from.
///
/// `Cached` reuses layer `n-1`'s own logits. `Reprojected` recomputes the
/// logits from layer `n`'s input using layer `n-1`'s query/key weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LinkSource {
    #[default]
    Cached,
    Reprojected,
}

impl std::str::FromStr for LinkSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cached" => Ok(Self::Cached),
            "reprojected" => Ok(Self::Reprojected),
            other => Err(format!("unknown link source `{other}`")),
        }
    }
}

/// Architecture hyperparameters.
///
/// `d_q`, `d_k` and `d_v` are the total projection widths across all heads;
/// each head gets `d_q / heads` etc.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_q: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    #[serde(default)]
    pub link_placement: LinkPlacement,
    #[serde(default = "one")]
    pub link_scale: f64,
    #[serde(default)]
    pub link_source: LinkSource,
    /// Multiply logits by `1/sqrt(d_k / heads)`.
    #[serde(default = "yes")]
    pub scale_logits: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    /// The 6+6 layer base configuration (d=512, four heads of width 32).
    pub fn base(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            d: 512,
            d_q: 128,
            d_k: 128,
            d_v: 128,
            d_hidden: 1024,
            heads: 4,
            enc_layers: 6,
            dec_layers: 6,
            link_placement: LinkPlacement::Both,
            link_scale: 1.0,
            link_source: LinkSource::Cached,
            scale_logits: true,
            dropout: 0.1,
            src_vocab,
            tgt_vocab,
            max_len: 256,
        }
    }

    /// A small config with `d_q = d_k = d_v = d` and `d_hidden = 2d`.
    pub fn toy(d: usize, heads: usize, layers: usize, vocab: usize) -> Self {
        Self {
            d,
            d_q: d,
            d_k: d,
            d_v: d,
            d_hidden: 2 * d,
            heads,
            enc_layers: layers,
            dec_layers: layers,
            link_placement: LinkPlacement::None,
            link_scale: 1.0,
            link_source: LinkSource::Cached,
            scale_logits: true,
            dropout: 0.0,
            src_vocab: vocab,
            tgt_vocab: vocab,
            max_len: 64,
        }
    }

    pub fn with_placement(mut self, placement: LinkPlacement) -> Self {
        self.link_placement = placement;
        self
    }

    pub fn with_link_scale(mut self, lambda: f64) -> Self {
        self.link_scale = lambda;
        self
    }

    pub fn head_dim_qk(&self) -> usize {
        self.d_q / self.heads
    }

    pub fn head_dim_v(&self) -> usize {
        self.d_v / self.heads
    }

    /// Every problem with the config, or `Ok`.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("d", self.d),
            ("d_q", self.d_q),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_hidden", self.d_hidden),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.d < 2 {
            problems.push("d must be at least 2 for layer normalization".into());
        }
        if self.heads > 0 {
            for (name, v) in [("d_q", self.d_q), ("d_k", self.d_k), ("d_v", self.d_v)] {
                if v % self.heads != 0 {
                    problems.push(format!("{name}={v} not divisible by heads={}", self.heads));
                }
            }
        }
        if self.d_q != self.d_k {
            problems.push(format!(
                "d_q={} must equal d_k={} for query-key products",
                self.d_q, self.d_k
            ));
        }
        if !self.link_scale.is_finite() {
            problems.push(format!("link_scale {} is not finite", self.link_scale));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} not in [0, 1)", self.dropout));
        }
        for (name, v) in [("src_vocab", self.src_vocab), ("tgt_vocab", self.tgt_vocab)] {
            if v < 5 {
                problems.push(format!("{name}={v} leaves no room beside the 4 reserved ids"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Closed-form trainable parameter count.
    ///
    /// Attention projections carry no bias; each sublayer has its own
    /// normalization gain and bias; the output projection is untied.
    pub fn param_count(&self) -> usize {
        let d = self.d;
        let attn = self.d_q * d + self.d_k * d + self.d_v * d + d * self.d_v;
        let ffn = 2 * self.d_hidden * d + self.d_hidden + d;
        let norm = 2 * d;
        let enc_layer = attn + ffn + 2 * norm;
        let dec_layer = 2 * attn + ffn + 3 * norm;
        (self.src_vocab + 2 * self.tgt_vocab) * d
            + self.enc_layers * enc_layer
            + self.dec_layers * dec_layer
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_config_is_valid() {
        let cfg = ModelConfig::base(1000, 1000);
        cfg.validate().unwrap();
        assert_eq!(cfg.head_dim_qk(), 32);
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut cfg = ModelConfig::toy(8, 3, 1, 10);
        cfg.dropout = 1.0;
        cfg.link_scale = f64::NAN;
        let Err(Error::Config(problems)) = cfg.validate() else {
            panic!("expected config error");
        };
        assert_eq!(problems.len(), 5, "{problems:?}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"d":8,"d_q":8,"d_k":8,"d_v":8,"d_hidden":16,"heads":2,
            "enc_layers":1,"dec_layers":1,"src_vocab":10,"tgt_vocab":10,"max_len":8,
            "bogus":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }
}
