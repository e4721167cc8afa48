//! Minimal dense reverse-mode differentiation, MLP layers, positional
//! encoding and Adam.

mod adam;
mod checkpoint;
mod encoding;
mod mlp;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use encoding::Encoding;
pub use mlp::{Activation, Mlp, MlpSpec};
pub use params::{Gradients, Param, ParamKey, ParamStore, StoreId};
pub use tape::{sigmoid, squareplus, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Matrix = ndarray::Array2<f64>;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{0} needs at least one input")]
    Empty(&'static str),
    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("non-finite value in {what} (flat index {index})")]
    NonFinite { what: String, index: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Arithmetic precision. `Single` rounds every recorded value to the nearest
/// f32 (storage precision emulation); arithmetic itself stays in f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl Precision {
    pub fn round(self, m: &mut Matrix) {
        if self == Precision::Single {
            m.mapv_inplace(|v| v as f32 as f64);
        }
    }
}
