//! Looped (weight-shared) transformers with fixed additive recurrences and a
//! routed multi-slot state buffer, plus the probes used to compare them.

pub mod diagnostics;
pub mod error;
pub mod mesh;
pub mod model;
pub mod numerics;
pub mod plan;
pub mod recurrence;
pub mod runconfig;
pub mod training;

pub use error::{Error, Result};
pub use mesh::{MeshBuffer, RouterSet, RoutingWeights};
pub use model::{Model, ModelConfig, StateTrace};
pub use numerics::{Dtype, Graph, Rng, Scalar, Tensor, Var};
pub use plan::{format_percent, parse_plan, LayerPlan};
pub use recurrence::{SchemeKind, SchemeSpec};
