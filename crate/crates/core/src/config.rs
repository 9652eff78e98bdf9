use crate::error::{Error, Result};
use crate::kv::{split_list, KvMap};

/// Shape and aggregation settings of one constraint network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub ssm_blocks: usize,
    /// An attention block follows each listed SSM block (1-based).
    pub attention_after: Vec<usize>,
    pub conv_width: usize,
    pub energy_hidden: usize,
    pub alpha: f64,
    pub max_positions: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dim: 768,
            model_dim: 384,
            ssm_blocks: 6,
            attention_after: vec![2, 4],
            conv_width: 4,
            energy_hidden: 4 * 384,
            alpha: 0.3,
            max_positions: 256,
        }
    }
}

const KEYS: &[&str] = &[
    "input_dim",
    "model_dim",
    "ssm_blocks",
    "attention_after",
    "conv_width",
    "energy_hidden",
    "alpha",
    "max_positions",
];

impl NetworkConfig {
    /// A small configuration for tests and gradient checks.
    pub fn tiny(input_dim: usize) -> Self {
        NetworkConfig {
            input_dim,
            model_dim: 8,
            energy_hidden: 8,
            max_positions: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("ssm_blocks", self.ssm_blocks),
            ("conv_width", self.conv_width),
            ("energy_hidden", self.energy_hidden),
            ("max_positions", self.max_positions),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::config("model_dim", "must be even to split into two heads"));
        }
        let mut prev = 0;
        for &a in &self.attention_after {
            if a < 1 || a >= self.ssm_blocks {
                return Err(Error::config(
                    "attention_after",
                    format!("{a} not inside [1, {}]", self.ssm_blocks - 1),
                ));
            }
            if a <= prev {
                return Err(Error::config("attention_after", "must be strictly increasing"));
            }
            prev = a;
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("input_dim", self.input_dim);
        m.set("model_dim", self.model_dim);
        m.set("ssm_blocks", self.ssm_blocks);
        m.set(
            "attention_after",
            self.attention_after
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.set("conv_width", self.conv_width);
        m.set("energy_hidden", self.energy_hidden);
        m.set("alpha", self.alpha);
        m.set("max_positions", self.max_positions);
        m
    }

    /// Missing keys take defaults; `energy_hidden` defaults to four times
    /// the model width.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        m.check_known(KEYS)?;
        let d = Self::default();
        let model_dim = m.get_or("model_dim", d.model_dim)?;
        let attention_after = match m.get("attention_after") {
            None => d.attention_after,
            Some(v) => split_list(v)
                .iter()
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|e| Error::config("attention_after", format!("`{s}`: {e}")))
                })
                .collect::<Result<_>>()?,
        };
        let cfg = NetworkConfig {
            input_dim: m.get_or("input_dim", d.input_dim)?,
            model_dim,
            ssm_blocks: m.get_or("ssm_blocks", d.ssm_blocks)?,
            attention_after,
            conv_width: m.get_or("conv_width", d.conv_width)?,
            energy_hidden: m.get_or("energy_hidden", 4 * model_dim)?,
            alpha: m.get_or("alpha", d.alpha)?,
            max_positions: m.get_or("max_positions", d.max_positions)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
