//! Exact value and saddle point of the robust classification game on finite
//! alphabets.
//!
//! A classifier `q(y|x)` plays against an adversary that perturbs the clean
//! joint `μ` inside a convex set `D` (a Wasserstein ball or a distortion-bounded
//! channel set). Under log loss the game value equals `max_{ν ∈ D} H_ν(Y|X)`,
//! and the minimax rule is the posterior of the maximizer. This crate computes
//! that maximizer exactly (Frank-Wolfe with exact transport oracles), certifies
//! the saddle point, and ships the scenario runners used to study the
//! robustness / clean-loss tradeoff.
//!
//! | module | contents |
//! |---|---|
//! | [`distribution`] | joints, rules, channels, ground costs, entropies |
//! | [`transport`] | transportation simplex, potentials, budgeted oracle |
//! | [`maxent`] | max conditional entropy and the penalized problem |
//! | [`game`] | rule extraction, best responses, deterministic attacks |
//! | [`experiments`] | toy example, tradeoff sweep, fixed point, counterexample |
//! | [`io`] | problem/report files, CSV, SVG, command line |

pub mod distribution;
pub mod error;
pub mod experiments;
pub mod game;
pub mod io;
pub mod maxent;
pub mod transport;

pub use distribution::{
    binary_entropy, Channel, CostKind, DecisionRule, GroundCost, JointDistribution, Posterior,
    ZeroMassPolicy,
};
pub use error::{Error, Result};
