//! Structural causal models of dialogue.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`scm`]: linear dialogue SCMs, simulation, least-squares fitting and
//!   interventions.
//! - [`independence`] and [`discrimination`]: residual-independence verdicts
//!   between two fitted variables.
//! - [`skeleton`]: the six *cogn* skeletons over a conversation.
//! - [`synth`]: the synthetic SCM corpus with known implicit causes.
//! - [`tensor`]: a small reverse-mode autodiff engine.
//! - [`model`]: the graph-attention causal autoencoder and its training loop.
//! - [`evaluation`]: challenge suites, probes and consistency studies.

// NaN-rejecting `!(x > 0.0)` checks are deliberate; tape ops return Result.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod config;
pub mod discrimination;
pub mod error;
pub mod evaluation;
pub mod independence;
pub mod model;
pub mod probe;
pub mod scm;
pub mod seed;
pub mod skeleton;
pub mod synth;
pub mod tensor;

pub use discrimination::{
    discriminate_multivariate, discriminate_pair, CausalVerdict, DiscriminationConfig, VerdictKind,
};
pub use error::{Error, Result};
pub use independence::{independence_test, DependenceMode, IndependenceConfig, IndependenceReport};
pub use scm::{
    fit_ols, intervene, population_fit, simulate, FitResult, LinearScm, NoiseFamily, NoiseSpec,
    SampleMatrix,
};
pub use skeleton::{build_skeleton, CognSkeleton, Conversation, SkeletonVariant};
pub use tensor::{Tape, Tensor, Var};

/// Version of the on-disk checkpoint format.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
