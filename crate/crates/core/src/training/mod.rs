//! End-to-end optimization of the joint model, its ablation variants, and
//! checkpointing.

mod adam;
mod checkpoint;
mod model;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconstruction::{clamp_prob, DEFAULT_DELTA, DEFAULT_FUSION_INIT, DEFAULT_RANK};

pub use adam::Adam;
pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_VERSION};
pub use model::{EditKind, JointModel, PredictionSet};
pub use trainer::{evaluate_auc, train, EpochRecord, TrainOutcome};

/// Model wiring under training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// Orthogonal edit, global and local fusion.
    Full,
    /// Unconstrained encode/decode matrices in place of the orthogonal projection.
    V1NonOrtho,
    /// Edited preference with fixed multiplicative fusion.
    V2NoFusion,
    /// Local correction applied directly to the fixed-fusion score.
    V3NoGlobal,
    /// Stops at the global fusion score.
    V4NoLocal,
    /// Raw preference effect fed to global and local fusion.
    V5NoEdit,
    /// `r̂^δ · p̂` on raw backbone effects.
    BaseFixed,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::V1NonOrtho,
        Variant::V2NoFusion,
        Variant::V3NoGlobal,
        Variant::V4NoLocal,
        Variant::V5NoEdit,
        Variant::BaseFixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "FULL",
            Variant::V1NonOrtho => "V1_NON_ORTHO",
            Variant::V2NoFusion => "V2_NO_FUSION",
            Variant::V3NoGlobal => "V3_NO_GLOBAL",
            Variant::V4NoLocal => "V4_NO_LOCAL",
            Variant::V5NoEdit => "V5_NO_EDIT",
            Variant::BaseFixed => "BASE_FIXED",
        }
    }

    pub fn edit(self) -> Option<EditKind> {
        match self {
            Variant::V1NonOrtho => Some(EditKind::Free),
            Variant::V5NoEdit | Variant::BaseFixed => None,
            _ => Some(EditKind::Orthogonal),
        }
    }

    pub fn uses_global(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::V1NonOrtho | Variant::V4NoLocal | Variant::V5NoEdit
        )
    }

    pub fn uses_local(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::V1NonOrtho | Variant::V3NoGlobal | Variant::V5NoEdit
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == upper || v.name().split('_').next() == Some(upper.as_str()))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Relevance exponent `δ`.
    pub delta: f64,
    /// Rank `D` of the editing subspace.
    pub rank: usize,
    /// Epochs without validation-AUC improvement before stopping.
    pub patience: usize,
    /// Initial `(α₁, α₀)`.
    pub alpha_init: [f64; 2],
    /// Initial `(β₁, β₀)`.
    pub beta_init: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Full,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 5,
            seed: 0,
            delta: DEFAULT_DELTA,
            rank: DEFAULT_RANK,
            patience: 2,
            alpha_init: DEFAULT_FUSION_INIT,
            beta_init: DEFAULT_FUSION_INIT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad =
            |what: &str, v: String| Err(Error::Config(format!("{what} must be positive, got {v}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", self.learning_rate.to_string());
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta", self.delta.to_string());
        }
        for (what, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("rank", self.rank),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return bad(what, v.to_string());
            }
        }
        if self
            .alpha_init
            .iter()
            .chain(&self.beta_init)
            .any(|x| !x.is_finite())
        {
            return Err(Error::Config(
                "fusion initial weights must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Binary cross-entropy `−[y ln ŷ + (1−y) ln(1−ŷ)]` on the clamped prediction.
pub fn bce_loss(y_hat: f64, y: u8) -> f64 {
    let p = clamp_prob(y_hat);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `d bce / d ŷ` at the clamped prediction.
pub fn bce_grad(y_hat: f64, y: u8) -> f64 {
    let p = clamp_prob(y_hat);
    (p - f64::from(y)) / (p * (1.0 - p))
}
