//! Symbolic dynamics models for model-based policy optimization.
//!
//! Transition dynamics are represented as one expression tree per state
//! coordinate. Candidate expressions are produced by a pluggable generator
//! (genetic programming by default), their constants are refined with BFGS,
//! and the best candidate per coordinate is kept. A soft actor-critic agent is
//! then trained exclusively on short rollouts sampled from the fitted model.

pub mod dynamics;
pub mod envs;
pub mod expr;
pub mod fit;
pub mod mbpo;
pub mod nn;
pub mod sac;
pub mod sr;

pub use dynamics::{DynamicsModel, NeuralDynamics, Source, SymbolicDynamics, Transition};
pub use envs::{Env, EnvKind, EnvSpec};
pub use expr::{parse, parse_with_names, ExprTree, Invalid};
pub use fit::{Dataset, FitReport};
pub use mbpo::{run_training, EpochMetrics, ModelKind, Run, RunConfig};
pub use sac::{ReplayBuffer, SacAgent, SacConfig};
pub use sr::{ExpressionGenerator, GeneratorConfig, GpGenerator, RandomGenerator};
