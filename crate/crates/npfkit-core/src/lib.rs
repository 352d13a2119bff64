//! Linear and high-order nonlinear participation factors (NPFs) of smooth
//! dynamical systems, computed by batched, vectorized tensor contraction.
//!
//! The pipeline: define a system ([`system`]), decompose its Jacobian into a
//! biorthogonal modal basis ([`modal`]), plan derivative-tensor batches that
//! respect a memory limit ([`planner`]), then stream the batches through the
//! contraction engine ([`engine`]). Naive nested-loop baselines live in
//! [`reference`] and exist to falsify the fast path.

pub mod engine;
pub mod error;
pub mod modal;
pub mod planner;
pub mod shard;
pub mod system;
pub mod tensor;

pub use engine::{
    compute_npf, compute_zeta, correct_zeta, export_h_tensor, stream_order_contribution,
    CorrectionMode, EngineConfig, Excitation, HTensor, ModalInitialState, NpfResult, PlanChoice,
    Provider, ShardSource,
};
pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use modal::{decompose, linear_pf, select_modes, ModalBasis, ModeCriteria, ModeSubset};
pub use planner::{estimate_bytes, plan_batches, BatchPlan, PlannerInput};
pub use system::{
    DerivativeTensorBatch, EquilibriumPoint, PolynomialSystem, SineNetwork, SystemModel,
};
pub use tensor::{DenseTensor, Dtype, IndexRange};
