//! Pessimistic transfer learning for tabular robust MDPs.
//!
//! The crate is organised bottom-up:
//!
//! * [`mdp`]: finite MDPs, policies, exact evaluation and greedy extraction.
//! * [`uncertainty`]: `(s,a)`-rectangular balls (total variation, l_p, Wasserstein)
//!   and their support functions, with brute-force oracles.
//! * [`operators`]: robust, averaged (AO) and minimal-pessimism (MP) Bellman
//!   operators over a family of source domains, fixed points and proxy values.
//! * [`federation`]: simulated multi-agent training (MDTL-Avg / MDTL-Max, the
//!   model-free variant and the non-robust baselines), including MLMC
//!   max-aggregation.
//! * [`envs`]: recycling robot, HPC cluster, FrozenLake-style grid and random
//!   families.
//! * [`harness`]: experiment plans, metrics tables and ablations.
//! * [`cli`]: the `mdtl` command line.

// range checks are written as `!(x > 0.0)` on purpose so NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod envs;
pub mod error;
pub mod federation;
pub mod harness;
pub mod mdp;
pub mod operators;
pub mod uncertainty;

pub use error::{Error, Result};
pub use mdp::{Policy, QTable, Reward, TabularMdp, ValueVector};
pub use operators::{DomainFamily, OperatorKind, Proxy};
pub use uncertainty::{LpOrder, Metric, Radius, UncertaintySpec};
