//! Domain embedding spaces: behavioral vectors from matrix factorization of
//! ratings and semantic vectors from a hashed-bigram text encoder.

mod semantic;
mod table;
mod wals;

pub use semantic::{bigram_features, SemanticEncoder, SemanticEncoderConfig};
pub use table::{cosine, dot, l2_normalize, EmbeddingTable};
pub use wals::{predict_rating, wals_fit, MfFactors, WalsConfig};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ElmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Behavioral,
    Semantic,
}

impl SpaceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SpaceKind::Behavioral => "behavioral",
            SpaceKind::Semantic => "semantic",
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpaceKind {
    type Err = ElmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "behavioral" => Ok(SpaceKind::Behavioral),
            "semantic" => Ok(SpaceKind::Semantic),
            other => Err(ElmError::format(format!(
                "unknown embedding space {other:?}"
            ))),
        }
    }
}
