//! Backward recursion over the belief grid.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BeliefGrid;
use crate::model::{validate, Belief, GameSpec, ReceiverPrescription, SenderPrescription};
use crate::stage::{
    receiver_response_map, receiver_stage, sender_stage, Continuation, Mode, SolverConfig,
    StageContext, StageMethod, StageSolution,
};

/// Value functions tabulated on the grid for `t = 1..=T`. Queries for
/// `t = T + 1` return the terminal zero.
#[derive(Debug, Clone)]
pub struct ValueTables {
    mode: Mode,
    horizon: usize,
    grid: BeliefGrid,
    /// `[t-1][point][i]`: receiver i's value before the signal.
    receiver: Vec<Vec<Vec<f64>>>,
    /// `[t-1][point][i]`: receiver i's value after the signal.
    receiver_post: Vec<Vec<Vec<f64>>>,
    /// `[t-1][point][x]` in PBE mode, `[t-1][point][0]` in cPSE mode.
    sender: Vec<Vec<Vec<f64>>>,
}

impl ValueTables {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn grid(&self) -> &BeliefGrid {
        &self.grid
    }

    pub fn receiver_entry(&self, t: usize, point: usize) -> &[f64] {
        &self.receiver[t - 1][point]
    }

    pub fn receiver_post_entry(&self, t: usize, point: usize) -> &[f64] {
        &self.receiver_post[t - 1][point]
    }

    /// PBE: one value per current state. cPSE: a single ex-ante value.
    pub fn sender_entry(&self, t: usize, point: usize) -> &[f64] {
        &self.sender[t - 1][point]
    }

    fn past_end(&self, t: usize) -> bool {
        t > self.horizon
    }

    pub fn receiver_value(&self, t: usize, receiver: usize, b: &Belief) -> f64 {
        if self.past_end(t) {
            return 0.0;
        }
        let table = &self.receiver[t - 1];
        self.grid.interpolate(b, |p| table[p][receiver])
    }

    pub fn receiver_post_value(&self, t: usize, receiver: usize, b: &Belief) -> f64 {
        if self.past_end(t) {
            return 0.0;
        }
        let table = &self.receiver_post[t - 1];
        self.grid.interpolate(b, |p| table[p][receiver])
    }

    /// Sender's value given the current state (PBE tables only; NaN otherwise).
    pub fn sender_interim(&self, t: usize, b: &Belief, state: usize) -> f64 {
        if self.past_end(t) {
            return 0.0;
        }
        if self.mode != Mode::Pbe {
            return f64::NAN;
        }
        let table = &self.sender[t - 1];
        self.grid.interpolate(b, |p| table[p][state])
    }

    /// Sender's value before the state is drawn from `b`. In PBE mode this
    /// averages the per-state values under `b`.
    pub fn sender_ex_ante(&self, t: usize, b: &Belief) -> f64 {
        if self.past_end(t) {
            return 0.0;
        }
        let table = &self.sender[t - 1];
        match self.mode {
            Mode::Cpse => self.grid.interpolate(b, |p| table[p][0]),
            Mode::Pbe => (0..b.len())
                .filter(|&x| b[x] > 0.0)
                .map(|x| b[x] * self.grid.interpolate(b, |p| table[p][x]))
                .sum(),
        }
    }

    /// Continuation for a stage solved in period `t - 1`.
    pub fn continuation(&self, t: usize) -> TableContinuation<'_> {
        TableContinuation { tables: self, t }
    }

    /// Whether every entry is finite.
    pub fn is_complete(&self) -> bool {
        [&self.receiver, &self.receiver_post, &self.sender]
            .iter()
            .all(|tbl| tbl.iter().flatten().flatten().all(|v| v.is_finite()))
    }
}

/// Interpolated values of period `t`, read as a continuation for period `t - 1`.
#[derive(Debug, Clone, Copy)]
pub struct TableContinuation<'a> {
    tables: &'a ValueTables,
    t: usize,
}

impl Continuation for TableContinuation<'_> {
    fn receiver(&self, receiver: usize, mu: &Belief) -> f64 {
        self.tables.receiver_value(self.t, receiver, mu)
    }
    fn sender_interim(&self, mu: &Belief, state: usize) -> f64 {
        self.tables.sender_interim(self.t, mu, state)
    }
    fn sender_ex_ante(&self, mu: &Belief) -> f64 {
        self.tables.sender_ex_ante(self.t, mu)
    }
    fn is_terminal(&self) -> bool {
        self.tables.past_end(self.t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub method: StageMethod,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub exhaustive: bool,
    pub refined: bool,
}

impl From<&StageSolution> for Diagnostics {
    fn from(s: &StageSolution) -> Self {
        Self {
            method: s.method,
            residual: s.residual,
            iterations: s.iterations,
            converged: s.converged,
            exhaustive: s.exhaustive,
            refined: s.refined,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SenderEntry {
    pub prescription: SenderPrescription,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReceiverEntry {
    pub prescription: ReceiverPrescription,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    Sender,
    Receiver,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub t: usize,
    pub point: usize,
    pub stage: StageKind,
    pub reason: String,
}

impl FailureRecord {
    pub fn to_error(&self) -> Error {
        Error::StageFailure {
            t: self.t,
            point: self.point,
            reason: self.reason.clone(),
        }
    }
}

/// Stage prescriptions at every grid point and period.
#[derive(Debug, Clone)]
pub struct EquilibriumPolicy {
    mode: Mode,
    horizon: usize,
    grid: BeliefGrid,
    /// `[t-1][point]`, prescription at pre-signal belief = grid point.
    sender: Vec<Vec<Option<SenderEntry>>>,
    /// `[t-1][point]`, prescription at post-signal belief = grid point.
    receiver: Vec<Vec<Option<ReceiverEntry>>>,
    failures: Vec<FailureRecord>,
}

impl EquilibriumPolicy {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn grid(&self) -> &BeliefGrid {
        &self.grid
    }

    pub fn sender(&self, t: usize, point: usize) -> Option<&SenderEntry> {
        self.sender[t - 1][point].as_ref()
    }

    pub fn receiver(&self, t: usize, point: usize) -> Option<&ReceiverEntry> {
        self.receiver[t - 1][point].as_ref()
    }

    pub fn failures(&self) -> &[FailureRecord] {
        &self.failures
    }

    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    /// Largest stage residual over stored sender entries.
    pub fn max_sender_residual(&self) -> f64 {
        self.sender
            .iter()
            .flatten()
            .flatten()
            .map(|e| e.diagnostics.residual)
            .fold(0.0, f64::max)
    }
}

/// Result of a backward solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub policy: EquilibriumPolicy,
    pub tables: ValueTables,
}

fn make_context<'a>(
    t: usize,
    mode: Mode,
    belief: &'a Belief,
    spec: &'a GameSpec,
    continuation: &'a dyn Continuation,
    config: &'a SolverConfig,
) -> StageContext<'a> {
    StageContext {
        t,
        mode,
        belief,
        spec,
        continuation,
        config,
    }
}

/// Solves periods `T, T-1, ..., 1`. Within a period the receiver stage is
/// solved on the grid of post-signal beliefs, then the sender stage on the
/// grid of pre-signal beliefs. Grid points are solved in parallel.
///
/// Stage failures are recorded in the policy (entries `None`, values NaN);
/// solving continues at the other points.
pub fn solve(
    spec: &GameSpec,
    mode: Mode,
    grid: &BeliefGrid,
    config: &SolverConfig,
) -> Result<Solution> {
    let violations = validate(spec);
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::InvalidSpec(text.join("; ")));
    }
    if grid.n_states() != spec.n_states {
        return Err(Error::InvalidSpec(format!(
            "grid over {} states for a game with {}",
            grid.n_states(),
            spec.n_states
        )));
    }
    let horizon = spec.horizon;
    let n_points = grid.len();
    let sender_width = match mode {
        Mode::Pbe => spec.n_states,
        Mode::Cpse => 1,
    };
    let mut tables = ValueTables {
        mode,
        horizon,
        grid: grid.clone(),
        receiver: vec![Vec::new(); horizon],
        receiver_post: vec![Vec::new(); horizon],
        sender: vec![Vec::new(); horizon],
    };
    let mut policy = EquilibriumPolicy {
        mode,
        horizon,
        grid: grid.clone(),
        sender: vec![Vec::new(); horizon],
        receiver: vec![Vec::new(); horizon],
        failures: Vec::new(),
    };
    let beliefs = grid.beliefs();

    for t in (1..=horizon).rev() {
        let cont = tables.continuation(t + 1);

        let receiver_results: Vec<Result<StageSolution>> = beliefs
            .par_iter()
            .map(|nu| receiver_stage(&make_context(t, mode, nu, spec, &cont, config)))
            .collect();
        let sender_results: Vec<Result<StageSolution>> = beliefs
            .par_iter()
            .map(|mu| {
                let ctx = make_context(t, mode, mu, spec, &cont, config);
                let map = receiver_response_map(&ctx);
                sender_stage(&ctx, &map)
            })
            .collect();

        let mut receiver_post = vec![vec![f64::NAN; spec.n_receivers]; n_points];
        let mut receiver_entries = vec![None; n_points];
        for (point, res) in receiver_results.into_iter().enumerate() {
            match res {
                Ok(sol) => {
                    receiver_post[point] = sol.values.clone();
                    receiver_entries[point] = Some(ReceiverEntry {
                        diagnostics: Diagnostics::from(&sol),
                        prescription: sol.receiver.expect("receiver stage returns a prescription"),
                    });
                }
                Err(e) => policy.failures.push(FailureRecord {
                    t,
                    point,
                    stage: StageKind::Receiver,
                    reason: e.to_string(),
                }),
            }
        }
        let mut sender = vec![vec![f64::NAN; sender_width]; n_points];
        let mut receiver = vec![vec![f64::NAN; spec.n_receivers]; n_points];
        let mut sender_entries = vec![None; n_points];
        for (point, res) in sender_results.into_iter().enumerate() {
            match res {
                Ok(sol) => {
                    sender[point] = sol.values.clone();
                    receiver[point] = sol.receiver_values.clone();
                    sender_entries[point] = Some(SenderEntry {
                        diagnostics: Diagnostics::from(&sol),
                        prescription: sol.sender.expect("sender stage returns a prescription"),
                    });
                }
                Err(e) => policy.failures.push(FailureRecord {
                    t,
                    point,
                    stage: StageKind::Sender,
                    reason: e.to_string(),
                }),
            }
        }
        let failed = policy.failures.iter().filter(|f| f.t == t).count();
        if failed > 0 {
            warn!("t={t}: {failed} stage failures");
        }
        info!("t={t}: solved {n_points} grid points ({mode})");
        tables.receiver_post[t - 1] = receiver_post;
        tables.receiver[t - 1] = receiver;
        tables.sender[t - 1] = sender;
        policy.receiver[t - 1] = receiver_entries;
        policy.sender[t - 1] = sender_entries;
    }
    Ok(Solution { policy, tables })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Interpolation;
    use crate::model::tests::small_spec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_sender_reward_gives_zero_tables() {
        let mut spec = small_spec();
        spec.sender_reward = vec![vec![0.0; 2]; 2];
        let grid = BeliefGrid::new(2, 8, Interpolation::SimplexLinear).unwrap();
        for mode in [Mode::Pbe, Mode::Cpse] {
            let sol = solve(&spec, mode, &grid, &SolverConfig::default()).unwrap();
            for t in 1..=spec.horizon {
                for p in 0..grid.len() {
                    assert!(sol.tables.sender_entry(t, p).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn single_signal_reduces_to_the_prior_response() {
        let mut spec = small_spec();
        spec.n_signals = 1;
        spec.horizon = 1;
        spec.sender_reward = vec![vec![3.0, 1.0], vec![0.0, 2.0]];
        let grid = BeliefGrid::new(2, 10, Interpolation::SimplexLinear).unwrap();
        for mode in [Mode::Pbe, Mode::Cpse] {
            let sol = solve(&spec, mode, &grid, &SolverConfig::default()).unwrap();
            for p in 0..grid.len() {
                let b = grid.belief(p);
                // receiver matches the more likely state, ties to action 0
                let a = if b[0] >= b[1] { 0 } else { 1 };
                let recv = b[0].max(b[1]);
                assert_abs_diff_eq!(sol.tables.receiver_entry(1, p)[0], recv, epsilon = 1e-12);
                let sender = b[0] * spec.sender_reward[0][a] + b[1] * spec.sender_reward[1][a];
                assert_abs_diff_eq!(sol.tables.sender_ex_ante(1, &b), sender, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn queries_at_grid_points_return_entries() {
        let spec = small_spec();
        let grid = BeliefGrid::new(2, 6, Interpolation::SimplexLinear).unwrap();
        let sol = solve(&spec, Mode::Pbe, &grid, &SolverConfig::default()).unwrap();
        for p in 0..grid.len() {
            let b = grid.belief(p);
            assert_eq!(
                sol.tables.receiver_value(1, 0, &b),
                sol.tables.receiver_entry(1, p)[0]
            );
            assert_eq!(
                sol.tables.sender_interim(2, &b, 1),
                sol.tables.sender_entry(2, p)[1]
            );
        }
        assert_eq!(sol.tables.receiver_value(3, 0, &Belief::uniform(2)), 0.0);
        assert!(sol.tables.is_complete());
        assert!(!sol.policy.is_partial());
    }

    #[test]
    fn grid_must_match_the_state_space() {
        let spec = small_spec();
        let grid = BeliefGrid::new(3, 4, Interpolation::Nearest).unwrap();
        assert!(matches!(
            solve(&spec, Mode::Pbe, &grid, &SolverConfig::default()),
            Err(Error::InvalidSpec(_))
        ));
    }
}
