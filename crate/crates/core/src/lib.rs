//! Wyner common information for discrete sources.
//!
//! Two solvers are provided. The [`bipartite`] solver runs a difference-of-convex
//! iteration over the encoder `P(Z|X^V)`; the [`vi`] solver alternates closed-form
//! updates of per-source conditionals `P(X_i|Z)`. Around them sit exact
//! information measures ([`metrics`]), the synthetic test distributions
//! ([`synth`]), clustering evaluation ([`eval`]), exponential-family fusion
//! rules ([`fusion`]) and a sweep harness ([`sweep`]).

pub mod bipartite;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod metrics;
pub mod prob;
pub mod rng;
pub mod solver;
pub mod sweep;
pub mod synth;
pub mod vi;

pub use error::{Error, Result};
pub use prob::{
    conditional_on, enumerate_bipartitions, joint_zx, marginalize, Bipartition,
    ConditionalTable, Encoder, JointDist, ProbTensor, SourceSpec,
};
