//! Training lab for confounder-robust CNN classifiers.
//!
//! The crate bundles a small deterministic CNN engine ([`ops`], [`tensor`]),
//! the DecorreLayer ([`decorre`]), the small and medium custom architectures
//! with dual ROI/control-region forward passes ([`model`]), a synthetic
//! dataset generator with label-correlated confounders ([`harness`]) and the
//! evaluation protocol ([`eval`]).

pub mod checkpoint;
pub mod decorre;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use decorre::{CorrelationRecord, DecorreConfig, DecorreLayer, FilterMode};
pub use error::{Error, Result};
pub use model::{build_model, ArchName, ArchitectureSpec, DualBatch, Model};
pub use rng::Rng;
pub use tensor::{LayerKind, LayerParams, Tensor};
