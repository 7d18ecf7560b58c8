//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The engine is a tape ([`Graph`]) built fresh for each forward pass. Ops are
//! coarse-grained (fused attention, layer norm, detection losses) so a full
//! transformer step records a few hundred nodes rather than millions of
//! scalar ones. Parameters live in a [`ParamStore`] keyed by stable names.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use attention::{AttnBlock, AttnSpec, MaskPattern};
pub use gradcheck::{gradcheck, CoordCheck, GradcheckConfig, GradcheckError, GradcheckReport, ParamSelector};
pub use graph::{giou_and_grad, sigmoid, AttnInput, Graph, Var};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{standard_normal, Grads, ParamId, ParamStore};
pub use tensor::Tensor;
