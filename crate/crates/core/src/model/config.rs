use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Parallel CTC decoder.
    Nar,
    /// Autoregressive baseline.
    Ar,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Nar => "nar",
            Variant::Ar => "ar",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nar" | "NAR" => Ok(Variant::Nar),
            "ar" | "AR" => Ok(Variant::Ar),
            _ => Err(Error::Config(format!("unknown model variant '{s}'"))),
        }
    }
}

/// Architecture hyper-parameters shared by both decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Width of the depthwise convolution in each encoder layer (odd).
    pub conv_kernel: usize,
    /// Decoder length multiplier λ: `T = λ · N'`.
    pub upsample: usize,
    /// Number of real units `K`.
    pub units: usize,
    /// Input feature dimension.
    pub feat_dim: usize,
    pub variant: Variant,
    pub dropout: f64,
    /// Size of the learnable positional tables.
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            heads: 4,
            ffn_dim: 256,
            conv_kernel: 5,
            upsample: 2,
            units: 16,
            feat_dim: 8,
            variant: Variant::Nar,
            dropout: 0.1,
            max_positions: 1024,
        }
    }
}

const KEYS: &[&str] = &[
    "enc_layers",
    "dec_layers",
    "d_model",
    "heads",
    "ffn_dim",
    "conv_kernel",
    "upsample",
    "units",
    "feat_dim",
    "variant",
    "dropout",
    "max_positions",
];

impl ModelConfig {
    /// A tiny configuration for gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            conv_kernel: 3,
            upsample: 2,
            units: 3,
            feat_dim: 4,
            variant: Variant::Nar,
            dropout: 0.0,
            max_positions: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.upsample == 0 {
            return bad("upsample factor must be at least 1");
        }
        if self.units == 0 {
            return bad("units must be at least 1");
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel must be odd");
        }
        if self.enc_layers == 0 || self.feat_dim == 0 || self.ffn_dim == 0 {
            return bad("enc_layers, feat_dim and ffn_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "enc_layers" => self.enc_layers = num(key, value)?,
            "dec_layers" => self.dec_layers = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn_dim" => self.ffn_dim = num(key, value)?,
            "conv_kernel" => self.conv_kernel = num(key, value)?,
            "upsample" | "lambda" => self.upsample = num(key, value)?,
            "units" => self.units = num(key, value)?,
            "feat_dim" => self.feat_dim = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "dropout" => self.dropout = num(key, value)?,
            "max_positions" => self.max_positions = num(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let v = [
            self.enc_layers.to_string(),
            self.dec_layers.to_string(),
            self.d_model.to_string(),
            self.heads.to_string(),
            self.ffn_dim.to_string(),
            self.conv_kernel.to_string(),
            self.upsample.to_string(),
            self.units.to_string(),
            self.feat_dim.to_string(),
            self.variant.to_string(),
            format!("{:?}", self.dropout),
            self.max_positions.to_string(),
        ];
        KEYS.iter()
            .zip(v)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line '{line}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Checks that two configs describe interchangeable encoders, naming the
    /// first differing field.
    pub fn check_encoder_compatible(&self, other: &ModelConfig) -> Result<()> {
        let fields: [(&'static str, usize, usize); 7] = [
            ("L_e", self.enc_layers, other.enc_layers),
            ("d_model", self.d_model, other.d_model),
            ("heads", self.heads, other.heads),
            ("conv_kernel", self.conv_kernel, other.conv_kernel),
            ("V_feat", self.feat_dim, other.feat_dim),
            ("ffn_dim", self.ffn_dim, other.ffn_dim),
            ("max_positions", self.max_positions, other.max_positions),
        ];
        for (field, a, b) in fields {
            if a != b {
                return Err(Error::ConfigMismatch {
                    field,
                    left: a.to_string(),
                    right: b.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Checks every field, naming the first that differs.
    pub fn check_equal(&self, other: &ModelConfig) -> Result<()> {
        let (a, b) = (self.to_text(), other.to_text());
        for ((la, lb), key) in a.lines().zip(b.lines()).zip(KEYS) {
            if la != lb {
                return Err(Error::ConfigMismatch {
                    field: key,
                    left: la.to_string(),
                    right: lb.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Encoder output length for `n` input frames.
    pub fn encoded_len(n: usize) -> usize {
        n / 4
    }

    /// Decoder length for `n` input frames.
    pub fn decoder_len(&self, n: usize) -> usize {
        self.upsample * Self::encoded_len(n)
    }
}
