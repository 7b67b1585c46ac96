//! Equilibrium computation for finite-horizon dynamic information design.
//!
//! A sender privately observes a controlled Markov state and sends signals to
//! one or more receivers, whose actions drive the state and produce publicly
//! observed rewards. The crate tabulates Markovian perfect Bayesian
//! equilibria (sender without commitment) and common perfect Stackelberg
//! equilibria (sender with per-period commitment) over a grid of common
//! beliefs, plays the resulting strategies forward, and checks them against
//! brute-force oracles.

pub mod backward;
pub mod error;
pub mod forward;
pub mod grid;
pub mod io;
pub mod model;
pub mod stage;
pub mod verify;

pub use backward::{solve, EquilibriumPolicy, Solution, ValueTables};
pub use error::{Error, Result};
pub use forward::{
    exact_payoff, rollout, Lookup, RolloutConfig, RolloutSummary, SolvedStrategy, StrategyProfile,
    Trajectory,
};
pub use grid::{BeliefGrid, Interpolation};
pub use model::{
    update_on_action, update_on_signal, Belief, GameSpec, OffSupport, Player, ReceiverPrescription,
    SenderPrescription,
};
pub use stage::{ForcedSender, Mode, SolverConfig};
pub use verify::{
    check_cpse, check_pbe, concavify, continuation_slack, full_info_dp, DeviationReport,
    OracleConfig,
};
