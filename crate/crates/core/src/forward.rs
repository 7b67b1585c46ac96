//! Forward play: strategies built from a solved policy, Monte Carlo rollouts
//! and exact expected payoffs.
//!
//! Beliefs are always advanced with the exact Bayes maps; the grid is only
//! consulted to fetch prescriptions.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward::{EquilibriumPolicy, ValueTables};
use crate::error::{Error, Result};
use crate::model::{
    rewards_equal, update_on_action, update_on_signal, Belief, GameSpec, OffSupport, Player,
    ReceiverPrescription, SenderPrescription,
};
use crate::stage::{
    receiver_response_map, receiver_stage, sender_stage, SolverConfig, StageContext,
};

/// Maps period and common belief to stage prescriptions.
pub trait StrategyProfile: Sync {
    /// Sender prescription at pre-signal belief `mu` in period `t`.
    fn sender(&self, t: usize, mu: &Belief) -> Result<SenderPrescription>;
    /// Receiver profile at post-signal belief `nu` in period `t`.
    fn receiver(&self, t: usize, nu: &Belief) -> Result<ReceiverPrescription>;
    /// L1 distance between `b` and the belief whose solved prescription is
    /// used there. Zero for strategies that solve at the exact belief.
    fn lookup_distance(&self, _t: usize, _b: &Belief) -> f64 {
        0.0
    }
}

/// How a solved strategy picks prescriptions at beliefs off the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Lookup {
    /// Prescription stored at the nearest grid point (L1).
    Nearest,
    /// Re-solve the stage at the exact belief against the next period's
    /// tables. Grid points return their stored entries.
    #[default]
    Resolve,
}

type BeliefKey = (usize, Vec<u64>);

fn key(t: usize, b: &Belief) -> BeliefKey {
    (t, b.probs().iter().map(|p| p.to_bits()).collect())
}

/// The strategy profile generated by a solved policy.
pub struct SolvedStrategy<'a> {
    spec: &'a GameSpec,
    policy: &'a EquilibriumPolicy,
    tables: &'a ValueTables,
    config: SolverConfig,
    lookup: Lookup,
    senders: Mutex<HashMap<BeliefKey, SenderPrescription>>,
    receivers: Mutex<HashMap<BeliefKey, ReceiverPrescription>>,
}

impl<'a> SolvedStrategy<'a> {
    pub fn new(
        spec: &'a GameSpec,
        policy: &'a EquilibriumPolicy,
        tables: &'a ValueTables,
        config: SolverConfig,
        lookup: Lookup,
    ) -> Self {
        Self {
            spec,
            policy,
            tables,
            config,
            lookup,
            senders: Mutex::new(HashMap::new()),
            receivers: Mutex::new(HashMap::new()),
        }
    }

    pub fn lookup(&self) -> Lookup {
        self.lookup
    }

    /// Grid point equal to `b`, if any.
    fn exact_point(&self, b: &Belief) -> Option<usize> {
        let grid = self.policy.grid();
        let p = grid.nearest(b);
        (grid.belief(p).max_abs_diff(b) <= 1e-14).then_some(p)
    }

    fn unsolved(t: usize, b: &Belief, reason: String) -> Error {
        Error::UnsolvedBelief {
            t,
            belief: b.probs().to_vec(),
            history: reason,
        }
    }

    fn context<'b>(
        &'b self,
        t: usize,
        b: &'b Belief,
        cont: &'b dyn crate::stage::Continuation,
    ) -> StageContext<'b> {
        StageContext {
            t,
            mode: self.policy.mode(),
            belief: b,
            spec: self.spec,
            continuation: cont,
            config: &self.config,
        }
    }

    fn stored_sender(&self, t: usize, point: usize, b: &Belief) -> Result<SenderPrescription> {
        self.policy
            .sender(t, point)
            .map(|e| e.prescription.clone())
            .ok_or_else(|| Self::unsolved(t, b, format!("grid point {point} failed")))
    }

    fn stored_receiver(&self, t: usize, point: usize, b: &Belief) -> Result<ReceiverPrescription> {
        self.policy
            .receiver(t, point)
            .map(|e| e.prescription.clone())
            .ok_or_else(|| Self::unsolved(t, b, format!("grid point {point} failed")))
    }
}

impl StrategyProfile for SolvedStrategy<'_> {
    fn sender(&self, t: usize, mu: &Belief) -> Result<SenderPrescription> {
        match self.lookup {
            Lookup::Nearest => self.stored_sender(t, self.policy.grid().nearest(mu), mu),
            Lookup::Resolve => {
                if let Some(p) = self.exact_point(mu) {
                    return self.stored_sender(t, p, mu);
                }
                let k = key(t, mu);
                if let Some(g) = self.senders.lock().expect("cache lock").get(&k) {
                    return Ok(g.clone());
                }
                let cont = self.tables.continuation(t + 1);
                let ctx = self.context(t, mu, &cont);
                let map = receiver_response_map(&ctx);
                let sol =
                    sender_stage(&ctx, &map).map_err(|e| Self::unsolved(t, mu, e.to_string()))?;
                let g = sol.sender.expect("sender stage returns a prescription");
                self.senders
                    .lock()
                    .expect("cache lock")
                    .insert(k, g.clone());
                Ok(g)
            }
        }
    }

    fn receiver(&self, t: usize, nu: &Belief) -> Result<ReceiverPrescription> {
        match self.lookup {
            Lookup::Nearest => self.stored_receiver(t, self.policy.grid().nearest(nu), nu),
            Lookup::Resolve => {
                if let Some(p) = self.exact_point(nu) {
                    return self.stored_receiver(t, p, nu);
                }
                let k = key(t, nu);
                if let Some(r) = self.receivers.lock().expect("cache lock").get(&k) {
                    return Ok(r.clone());
                }
                let cont = self.tables.continuation(t + 1);
                let sol = receiver_stage(&self.context(t, nu, &cont))
                    .map_err(|e| Self::unsolved(t, nu, e.to_string()))?;
                let r = sol.receiver.expect("receiver stage returns a prescription");
                self.receivers
                    .lock()
                    .expect("cache lock")
                    .insert(k, r.clone());
                Ok(r)
            }
        }
    }

    fn lookup_distance(&self, _t: usize, b: &Belief) -> f64 {
        match self.lookup {
            Lookup::Nearest => {
                let grid = self.policy.grid();
                grid.belief(grid.nearest(b)).l1_distance(b)
            }
            Lookup::Resolve => 0.0,
        }
    }
}

/// The same stage prescriptions at every period and belief.
#[derive(Debug, Clone)]
pub struct FixedStrategy {
    pub sender: SenderPrescription,
    pub receiver: ReceiverPrescription,
}

impl StrategyProfile for FixedStrategy {
    fn sender(&self, _: usize, _: &Belief) -> Result<SenderPrescription> {
        Ok(self.sender.clone())
    }
    fn receiver(&self, _: usize, _: &Belief) -> Result<ReceiverPrescription> {
        Ok(self.receiver.clone())
    }
}

/// One period of a simulated path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: usize,
    pub state: usize,
    pub signal: usize,
    /// Joint receiver action (receiver 0 most significant).
    pub joint: usize,
    /// Realized receiver rewards, one per receiver.
    pub rewards: Vec<f64>,
    pub sender_reward: f64,
    /// Pre-signal belief.
    pub mu: Belief,
    /// Post-signal belief.
    pub nu: Belief,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub path: usize,
    pub steps: Vec<Step>,
    /// Discounted total reward per player, sender first.
    pub payoff: Vec<f64>,
}

fn sample(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn history_text(steps: &[Step], signal: Option<usize>) -> String {
    let mut parts: Vec<String> = steps
        .iter()
        .map(|s| format!("s{} a{} r{:?}", s.signal, s.joint, s.rewards))
        .collect();
    if let Some(s) = signal {
        parts.push(format!("s{s}"));
    }
    if parts.is_empty() {
        "(start)".into()
    } else {
        parts.join(" / ")
    }
}

fn with_history(e: Error, steps: &[Step], signal: Option<usize>) -> Error {
    match e {
        Error::UnsolvedBelief { t, belief, history } => Error::UnsolvedBelief {
            t,
            belief,
            history: format!("{} ({history})", history_text(steps, signal)),
        },
        other => other,
    }
}

/// Simulates path number `path` of the stream seeded by `seed`.
///
/// Random draws per path come from ChaCha8 seeded with `seed` on stream
/// `path`, in the order: initial state, then per period the signal, each
/// receiver's action and the next state.
pub fn simulate_path(
    spec: &GameSpec,
    strategy: &dyn StrategyProfile,
    seed: u64,
    path: usize,
    off_support: OffSupport,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    let mut mu = spec.initial_belief()?;
    let mut x = sample(&mut rng, &spec.initial);
    let mut steps = Vec::with_capacity(spec.horizon);
    let mut payoff = vec![0.0; spec.n_receivers + 1];
    let mut discount = 1.0;
    for t in 1..=spec.horizon {
        let gamma = strategy
            .sender(t, &mu)
            .map_err(|e| with_history(e, &steps, None))?;
        let s = sample(&mut rng, gamma.row(x));
        let nu = update_on_signal(&mu, &gamma, s, off_support)?;
        let rho = strategy
            .receiver(t, &nu)
            .map_err(|e| with_history(e, &steps, Some(s)))?;
        let actions: Vec<usize> = (0..spec.n_receivers)
            .map(|i| sample(&mut rng, rho.factor(i)))
            .collect();
        let joint = spec.joint_index(&actions);
        let rewards = spec.receiver_reward_vector(x, joint);
        let sender_reward = spec.sender_reward[x][joint];
        payoff[0] += discount * sender_reward;
        for (slot, r) in payoff[1..].iter_mut().zip(&rewards) {
            *slot += discount * r;
        }
        let next_mu = update_on_action(&nu, joint, &rewards, spec, off_support)?;
        let next_x = sample(&mut rng, &spec.transition[x][joint]);
        steps.push(Step {
            t,
            state: x,
            signal: s,
            joint,
            rewards,
            sender_reward,
            mu,
            nu,
        });
        mu = next_mu;
        x = next_x;
        discount *= spec.discount;
    }
    Ok(Trajectory {
        path,
        steps,
        payoff,
    })
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub paths: usize,
    pub seed: u64,
    /// Mean discounted payoff per player, sender first.
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    pub paths: usize,
    pub seed: u64,
    pub off_support: OffSupport,
}

/// Runs `cfg.paths` independent paths in parallel and summarizes payoffs.
pub fn rollout(
    spec: &GameSpec,
    strategy: &dyn StrategyProfile,
    cfg: &RolloutConfig,
) -> Result<(RolloutSummary, Vec<Trajectory>)> {
    let paths: Vec<Trajectory> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| simulate_path(spec, strategy, cfg.seed, p, cfg.off_support))
        .collect::<Result<_>>()?;
    Ok((summarize(spec, &paths, cfg.seed), paths))
}

pub fn summarize(spec: &GameSpec, paths: &[Trajectory], seed: u64) -> RolloutSummary {
    let players = spec.n_receivers + 1;
    let n = paths.len();
    let mut mean = vec![0.0; players];
    let mut std_error = vec![0.0; players];
    if n > 0 {
        for k in 0..players {
            let m = compensated_sum(paths.iter().map(|p| p.payoff[k])) / n as f64;
            mean[k] = m;
            if n > 1 {
                let ss = compensated_sum(paths.iter().map(|p| (p.payoff[k] - m).powi(2)));
                std_error[k] = (ss / (n - 1) as f64 / n as f64).sqrt();
            }
        }
    }
    RolloutSummary {
        paths: n,
        seed,
        mean,
        std_error,
    }
}

pub const DEFAULT_NODE_CAP: u64 = 10_000_000;

/// Exact expected discounted payoff per player (sender first), by enumerating
/// every common history with the joint distribution of the current state.
/// Only histories of positive probability are visited.
pub fn exact_payoff(
    spec: &GameSpec,
    strategy: &dyn StrategyProfile,
    node_cap: u64,
) -> Result<Vec<f64>> {
    let mut totals = vec![Vec::new(); spec.n_receivers + 1];
    let mut nodes = 0u64;
    exact_rec(
        spec,
        strategy,
        1,
        spec.initial.clone(),
        1.0,
        &mut totals,
        &mut nodes,
        node_cap,
    )?;
    Ok(totals.into_iter().map(compensated_sum).collect())
}

#[allow(clippy::too_many_arguments)]
fn exact_rec(
    spec: &GameSpec,
    strategy: &dyn StrategyProfile,
    t: usize,
    weights: Vec<f64>,
    discount: f64,
    totals: &mut [Vec<f64>],
    nodes: &mut u64,
    cap: u64,
) -> Result<()> {
    if t > spec.horizon {
        return Ok(());
    }
    *nodes += 1;
    if *nodes > cap {
        return Err(Error::TreeTooLarge { nodes: *nodes, cap });
    }
    let mu = Belief::from_weights(weights.clone()).expect("reached histories carry mass");
    let gamma = strategy.sender(t, &mu)?;
    for s in 0..spec.n_signals {
        let ws: Vec<f64> = (0..spec.n_states)
            .map(|x| weights[x] * gamma.prob(x, s))
            .collect();
        let Some(nu) = Belief::from_weights(ws.clone()) else {
            continue;
        };
        let rho = strategy.receiver(t, &nu)?;
        for (a, pa) in rho.joint_distribution(spec).into_iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for x in 0..spec.n_states {
                let w = ws[x] * pa;
                if w > 0.0 {
                    for (k, player) in spec.players().into_iter().enumerate() {
                        totals[k].push(discount * w * spec.reward(player, x, a));
                    }
                }
            }
            let mut groups: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
            for x in 0..spec.n_states {
                if ws[x] <= 0.0 {
                    continue;
                }
                let r = spec.receiver_reward_vector(x, a);
                let idx = match groups.iter().position(|(g, _)| rewards_equal(g, &r)) {
                    Some(i) => i,
                    None => {
                        groups.push((r, vec![0.0; spec.n_states]));
                        groups.len() - 1
                    }
                };
                for (n, q) in groups[idx].1.iter_mut().zip(&spec.transition[x][a]) {
                    *n += ws[x] * pa * q;
                }
            }
            for (_, next) in groups {
                if next.iter().any(|&w| w > 0.0) {
                    exact_rec(
                        spec,
                        strategy,
                        t + 1,
                        next,
                        discount * spec.discount,
                        totals,
                        nodes,
                        cap,
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Every full path (states, signals, actions) with its probability.
pub fn enumerate_paths(
    spec: &GameSpec,
    strategy: &dyn StrategyProfile,
    node_cap: u64,
    off_support: OffSupport,
) -> Result<Vec<(f64, Trajectory)>> {
    let mut out = Vec::new();
    let mut nodes = 0u64;
    let mu = spec.initial_belief()?;
    for x in 0..spec.n_states {
        if spec.initial[x] > 0.0 {
            let mut steps = Vec::new();
            paths_rec(
                spec,
                strategy,
                &mut PathState {
                    out: &mut out,
                    nodes: &mut nodes,
                    cap: node_cap,
                    off_support,
                },
                mu.clone(),
                x,
                spec.initial[x],
                &mut steps,
            )?;
        }
    }
    for (i, (_, tr)) in out.iter_mut().enumerate() {
        tr.path = i;
    }
    Ok(out)
}

struct PathState<'a> {
    out: &'a mut Vec<(f64, Trajectory)>,
    nodes: &'a mut u64,
    cap: u64,
    off_support: OffSupport,
}

fn paths_rec(
    spec: &GameSpec,
    strategy: &dyn StrategyProfile,
    st: &mut PathState<'_>,
    mu: Belief,
    x: usize,
    prob: f64,
    steps: &mut Vec<Step>,
) -> Result<()> {
    let t = steps.len() + 1;
    if t > spec.horizon {
        let mut payoff = vec![0.0; spec.n_receivers + 1];
        let mut discount = 1.0;
        for s in steps.iter() {
            payoff[0] += discount * s.sender_reward;
            for (slot, r) in payoff[1..].iter_mut().zip(&s.rewards) {
                *slot += discount * r;
            }
            discount *= spec.discount;
        }
        st.out.push((
            prob,
            Trajectory {
                path: 0,
                steps: steps.clone(),
                payoff,
            },
        ));
        return Ok(());
    }
    *st.nodes += 1;
    if *st.nodes > st.cap {
        return Err(Error::TreeTooLarge {
            nodes: *st.nodes,
            cap: st.cap,
        });
    }
    let gamma = strategy.sender(t, &mu)?;
    for s in 0..spec.n_signals {
        let ps = gamma.prob(x, s);
        if ps == 0.0 {
            continue;
        }
        let nu = update_on_signal(&mu, &gamma, s, st.off_support)?;
        let rho = strategy.receiver(t, &nu)?;
        for (a, pa) in rho.joint_distribution(spec).into_iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            let rewards = spec.receiver_reward_vector(x, a);
            let next_mu = update_on_action(&nu, a, &rewards, spec, st.off_support)?;
            steps.push(Step {
                t,
                state: x,
                signal: s,
                joint: a,
                rewards,
                sender_reward: spec.reward(Player::Sender, x, a),
                mu: mu.clone(),
                nu: nu.clone(),
            });
            for (xn, &q) in spec.transition[x][a].iter().enumerate() {
                if q > 0.0 {
                    paths_rec(
                        spec,
                        strategy,
                        st,
                        next_mu.clone(),
                        xn,
                        prob * ps * pa * q,
                        steps,
                    )?;
                }
            }
            steps.pop();
        }
    }
    Ok(())
}
