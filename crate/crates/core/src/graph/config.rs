use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::SpatialConfig;

/// Homogeneous variants treat subjects and objects as one node set with one
/// message formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HomogeneousMode {
    #[default]
    Off,
    Intra,
    Inter,
}

impl FromStr for HomogeneousMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(HomogeneousMode::Off),
            "intra" => Ok(HomogeneousMode::Intra),
            "inter" => Ok(HomogeneousMode::Inter),
            other => Err(Error::Config(format!("homogeneous mode must be off, intra or inter, got {other:?}"))),
        }
    }
}

impl fmt::Display for HomogeneousMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HomogeneousMode::Off => "off",
            HomogeneousMode::Intra => "intra",
            HomogeneousMode::Inter => "inter",
        })
    }
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub use_intra: bool,
    pub use_inter: bool,
    pub use_intra_attention: bool,
    pub use_interactiveness_weight: bool,
    pub homogeneous: HomogeneousMode,
}

impl Default for Flags {
    fn default() -> Self {
        Flags {
            use_intra: true,
            use_inter: true,
            use_intra_attention: true,
            use_interactiveness_weight: true,
            homogeneous: HomogeneousMode::Off,
        }
    }
}

impl Flags {
    pub fn baseline() -> Self {
        Flags { use_intra: false, use_inter: false, ..Flags::default() }
    }

    /// Whether the interactiveness weights exist in this variant.
    pub fn uses_w(&self) -> bool {
        self.use_interactiveness_weight
            && match self.homogeneous {
                HomogeneousMode::Off => self.use_inter,
                HomogeneousMode::Inter => true,
                HomogeneousMode::Intra => false,
            }
    }

    /// Short name of the variant, stored in checkpoints.
    pub fn variant(&self) -> String {
        let (base, intra, inter) = match self.homogeneous {
            HomogeneousMode::Intra => ("homogeneous-intra", true, false),
            HomogeneousMode::Inter => ("homogeneous-inter", false, true),
            HomogeneousMode::Off => match (self.use_intra, self.use_inter) {
                (false, false) => return "baseline".to_string(),
                (true, true) => ("full", true, true),
                (true, false) => ("no-inter", true, false),
                (false, true) => ("no-intra", false, true),
            },
        };
        let mut name = base.to_string();
        if intra && !self.use_intra_attention {
            name.push_str("-no-intra-attention");
        }
        if inter && !self.use_interactiveness_weight {
            name.push_str("-no-w");
        }
        name
    }
}

/// Model dimensions and structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared width of node embeddings and spatial features.
    pub d: usize,
    /// Raw feature length per instance.
    pub f: usize,
    /// Number of action classes.
    pub a: usize,
    /// Reasoning rounds.
    pub t: usize,
    pub spatial: SpatialConfig,
    pub flags: Flags,
    /// Divide the intra message by the neighborhood size.
    pub intra_mean_divide: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            f: 16,
            a: 4,
            t: 2,
            spatial: SpatialConfig::default(),
            flags: Flags::default(),
            intra_mean_divide: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.f == 0 || self.a == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive, got d={} f={} a={}",
                self.d, self.f, self.a
            )));
        }
        if self.t == 0 {
            return Err(Error::Config("t must be at least 1".into()));
        }
        self.spatial.validate()
    }

    /// Whether message passing rounds run at all; the baseline skips them.
    pub fn runs_rounds(&self) -> bool {
        self.flags.homogeneous != HomogeneousMode::Off || self.flags.use_intra || self.flags.use_inter
    }
}
