use std::fmt;
use std::str::FromStr;

use crate::attention::GateVariant;
use crate::blocks::PostAttnKind;
use crate::error::{config_err, Error, Result};

/// Built-in network sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    T,
    S,
    M,
    L,
    X,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::T, Self::S, Self::M, Self::L, Self::X];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::T => "T",
            Self::S => "S",
            Self::M => "M",
            Self::L => "L",
            Self::X => "X",
        }
    }

    pub fn blocks(self) -> [usize; 4] {
        match self {
            Self::T => [2, 2, 16, 6],
            Self::S => [2, 2, 19, 6],
            Self::M => [2, 2, 22, 6],
            Self::L => [3, 3, 31, 9],
            Self::X => [4, 4, 43, 12],
        }
    }

    pub fn channels(self) -> [usize; 4] {
        match self {
            Self::T => [32, 64, 128, 256],
            Self::S => [32, 64, 160, 320],
            Self::M => [48, 96, 192, 384],
            Self::L => [64, 128, 256, 448],
            Self::X => [64, 128, 336, 512],
        }
    }

    /// Target parameter budget in millions.
    pub fn reference_params_m(self) -> f64 {
        match self {
            Self::T => 3.8,
            Self::S => 6.4,
            Self::M => 9.6,
            Self::L => 19.9,
            Self::X => 39.8,
        }
    }

    pub fn names() -> String {
        Self::ALL.map(Self::as_str).join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase();
        let key = key.strip_prefix("REGLA-").unwrap_or(&key);
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == key)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (available: {})",
                    Self::names()
                ))
            })
    }
}

/// Block family used in the first two stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum EarlyStageKind {
    #[default]
    Elrf,
    Conv7,
    Conv9,
}

impl EarlyStageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Elrf => "elrf",
            Self::Conv7 => "conv7",
            Self::Conv9 => "conv9",
        }
    }
}

impl fmt::Display for EarlyStageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EarlyStageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "elrf" => Ok(Self::Elrf),
            "conv7" => Ok(Self::Conv7),
            "conv9" => Ok(Self::Conv9),
            _ => config_err(format!(
                "unknown early stage kind `{s}` (expected elrf, conv7, conv9)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub blocks: [usize; 4],
    pub channels: [usize; 4],
    pub gate_variant: GateVariant,
    pub post_attn: PostAttnKind,
    pub ffn_expansion: f64,
    pub early_stage_kind: EarlyStageKind,
    pub num_classes: usize,
    /// Hidden width of the classifier head as a multiple of the last stage
    /// width; zero gives a single linear layer.
    pub head_expansion: f64,
    pub in_channels: usize,
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        Self {
            name: v.as_str().to_string(),
            blocks: v.blocks(),
            channels: v.channels(),
            gate_variant: GateVariant::default(),
            post_attn: PostAttnKind::default(),
            ffn_expansion: 2.0,
            early_stage_kind: EarlyStageKind::default(),
            num_classes: 1000,
            head_expansion: 2.0,
            in_channels: 3,
        }
    }

    /// A one-block-per-stage network small enough for finite differences.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".to_string(),
            blocks: [1, 1, 1, 1],
            channels: [4, 4, 8, 8],
            num_classes: 5,
            ..Self::variant(Variant::T)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.contains(&0) || self.channels.contains(&0) {
            return config_err("block and channel counts must all be positive");
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return config_err("class and input channel counts must be positive");
        }
        for c in self.channels {
            crate::blocks::hidden_width(c, self.ffn_expansion)?;
        }
        if self.head_expansion < 0.0 {
            return config_err("head expansion must be non-negative");
        }
        if self.head_expansion > 0.0 {
            crate::blocks::hidden_width(self.channels[3], self.head_expansion)?;
        }
        Ok(())
    }

    /// Parses a flat `key=value` file. `variant` (if present) sets the base
    /// configuration; remaining keys override it. Returns the seed separately.
    pub fn parse_kv(text: &str) -> Result<(Self, Option<u64>)> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config_err(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                ));
            };
            pairs.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| k == "variant") {
            Some((_, v)) => Self::variant(v.parse()?),
            None => Self::variant(Variant::M),
        };
        let mut seed = None;
        for (k, v) in &pairs {
            match k.as_str() {
                "variant" => {}
                "gate_variant" => cfg.gate_variant = v.parse()?,
                "post_attn" => cfg.post_attn = v.parse()?,
                "ffn_expansion" => cfg.ffn_expansion = parse_num(k, v)?,
                "early_stage_kind" => cfg.early_stage_kind = v.parse()?,
                "num_classes" => cfg.num_classes = parse_num(k, v)?,
                "head_expansion" => cfg.head_expansion = parse_num(k, v)?,
                "seed" => seed = Some(parse_num(k, v)?),
                "blocks" => cfg.blocks = parse_four(k, v)?,
                "channels" => cfg.channels = parse_four(k, v)?,
                _ => return config_err(format!("unknown config key `{k}`")),
            }
        }
        cfg.validate()?;
        Ok((cfg, seed))
    }
}

fn parse_num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

fn parse_four(key: &str, v: &str) -> Result<[usize; 4]> {
    let items = v
        .split(',')
        .map(|s| parse_num::<usize>(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly four values")))
}
