//! Branch-and-bound MILP solving with a learned, tree-structured
//! node-selection policy.
//!
//! The crate is organized around the solver pipeline:
//!
//! - [`lp`]: linear programs and the bounded-variable simplex.
//! - [`bnb`]: the branch-and-bound engine with pluggable node selectors.
//! - [`features`]: per-node feature extraction and standardization.
//! - [`nn`]: dense matrices, reverse-mode autodiff, and AdamW.
//! - [`policy`]: the tree GNN producing the leaf-selection distribution.
//! - [`ppo`]: rollouts, baseline-relative rewards, and PPO updates.
//! - [`instances`]: TSP/UFLP generators, mutation, and pool curation.
//! - [`bench`]: benchmark metrics, aggregation, and model persistence.

pub mod bench;
pub mod bnb;
pub mod features;
pub mod instances;
pub mod lp;
pub mod nn;
pub mod policy;
pub mod ppo;

pub use bnb::{compute_gap, policy_schedule, relax, solve, Budget, SolveResult};
pub use lp::{solve_lp, with_bound, LinearProgram, LpOutcome, LpStatus};
pub use ppo::{compute_reward, train, TrainConfig};
