use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::ledger::OpKind;
use crate::quant::QuantConfig;

/// Sub-layer that encloses a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Module {
    Msa,
    Ffn,
    /// Final norm and classifier, outside any block. Governed by op flags only.
    Head,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpFlags {
    pub matmul: bool,
    pub softmax: bool,
    pub layernorm: bool,
    pub gelu: bool,
}

impl OpFlags {
    pub const NONE: OpFlags = OpFlags {
        matmul: false,
        softmax: false,
        layernorm: false,
        gelu: false,
    };
    pub const ALL: OpFlags = OpFlags {
        matmul: true,
        softmax: true,
        layernorm: true,
        gelu: true,
    };

    pub fn only(op: OpKind) -> Self {
        let mut f = Self::NONE;
        f.set(op, true);
        f
    }

    pub fn get(&self, op: OpKind) -> bool {
        match op {
            OpKind::MatMul => self.matmul,
            OpKind::Softmax => self.softmax,
            OpKind::LayerNorm => self.layernorm,
            OpKind::Gelu => self.gelu,
        }
    }

    pub fn set(&mut self, op: OpKind, on: bool) {
        match op {
            OpKind::MatMul => self.matmul = on,
            OpKind::Softmax => self.softmax = on,
            OpKind::LayerNorm => self.layernorm = on,
            OpKind::Gelu => self.gelu = on,
        }
    }

    pub fn any(&self) -> bool {
        OpKind::ALL.iter().any(|&op| self.get(op))
    }

    /// Parses `matmul,softmax,...`, `all` or `none`.
    pub fn parse_list(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => return Ok(Self::ALL),
            "none" | "" => return Ok(Self::NONE),
            _ => {}
        }
        let mut f = Self::NONE;
        for part in s.split(',') {
            let op = match part.trim() {
                "matmul" => OpKind::MatMul,
                "softmax" => OpKind::Softmax,
                "layernorm" => OpKind::LayerNorm,
                "gelu" => OpKind::Gelu,
                other => return Err(Error::Config(format!("unknown op `{other}`"))),
            };
            f.set(op, true);
        }
        Ok(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleFlags {
    pub msa: bool,
    pub ffn: bool,
}

impl ModuleFlags {
    pub const ALL: ModuleFlags = ModuleFlags {
        msa: true,
        ffn: true,
    };
    pub const NONE: ModuleFlags = ModuleFlags {
        msa: false,
        ffn: false,
    };

    pub fn get(&self, module: Module) -> bool {
        match module {
            Module::Msa => self.msa,
            Module::Ffn => self.ffn,
            Module::Head => true,
        }
    }

    pub fn parse_list(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => return Ok(Self::ALL),
            "none" | "" => return Ok(Self::NONE),
            _ => {}
        }
        let mut f = Self::NONE;
        for part in s.split(',') {
            match part.trim() {
                "msa" => f.msa = true,
                "ffn" => f.ffn = true,
                other => return Err(Error::Config(format!("unknown module `{other}`"))),
            }
        }
        Ok(f)
    }
}

impl Default for ModuleFlags {
    fn default() -> Self {
        Self::ALL
    }
}

/// How stored tensors are split into quantization groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Granularity {
    /// Head-wise for queries, keys, values and attention probabilities;
    /// channel groups (one per head) for everything else.
    #[default]
    Head,
    /// A single group per tensor.
    Layer,
    /// Head-wise for attention tensors, `G` channel groups for the rest.
    Channel(usize),
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::Head => f.write_str("head"),
            Granularity::Layer => f.write_str("layer"),
            Granularity::Channel(g) => write!(f, "channel:{g}"),
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Granularity::Head),
            "layer" => Ok(Granularity::Layer),
            _ => {
                let g = s
                    .strip_prefix("channel:")
                    .and_then(|g| g.parse::<usize>().ok())
                    .filter(|&g| g > 0)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "granularity must be head, layer or channel:<G>, got `{s}`"
                        ))
                    })?;
                Ok(Granularity::Channel(g))
            }
        }
    }
}

impl Serialize for Granularity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Granularity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which stored activations are compressed, and how.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionPolicy {
    pub ops: OpFlags,
    pub modules: ModuleFlags,
    pub granularity: Granularity,
    pub quant: QuantConfig,
}

impl Default for CompressionPolicy {
    fn default() -> Self {
        Self::none()
    }
}

impl CompressionPolicy {
    pub fn none() -> Self {
        CompressionPolicy {
            ops: OpFlags::NONE,
            modules: ModuleFlags::ALL,
            granularity: Granularity::Head,
            quant: QuantConfig::default(),
        }
    }

    /// Every covered op in every module, head-wise, stochastic rounding,
    /// running estimates.
    pub fn all() -> Self {
        CompressionPolicy {
            ops: OpFlags::ALL,
            ..Self::none()
        }
    }

    pub fn with_ops(mut self, ops: OpFlags) -> Self {
        self.ops = ops;
        self
    }

    pub fn with_modules(mut self, modules: ModuleFlags) -> Self {
        self.modules = modules;
        self
    }

    pub fn with_granularity(mut self, g: Granularity) -> Self {
        self.granularity = g;
        self
    }

    pub fn with_quant(mut self, q: QuantConfig) -> Self {
        self.quant = q;
        self
    }

    /// A tensor is compressed iff its op flag and its module flag are on.
    pub fn compresses(&self, op: OpKind, module: Module) -> bool {
        self.ops.get(op) && self.modules.get(module)
    }

    pub fn is_off(&self) -> bool {
        !self.ops.any()
    }

    pub fn validate(&self) -> Result<()> {
        self.quant.validate()
    }
}
