//! Game data model and the two Bayes belief maps.
//!
//! A period consists of a signal stage followed by an action stage. The
//! common belief before the signal (`mu`) is mapped to the post-signal belief
//! (`nu`) by [`update_on_signal`], and `nu` is mapped to the next period's
//! pre-signal belief by [`update_on_action`] once the joint receiver action
//! and the receivers' realized rewards are public.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";

/// Row sums of the kernel and the initial distribution must be within this of 1.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Tolerance on belief and prescription normalization.
pub const BELIEF_TOL: f64 = 1e-9;

/// Realized rewards are matched against table entries with this tolerance.
pub const REWARD_MATCH_TOL: f64 = 1e-9;

/// Full description of a finite-horizon information design game.
///
/// Joint receiver actions are encoded in mixed radix with receiver 0 as the
/// most significant digit, so for two receivers with two actions each the
/// joint index of `(a0, a1)` is `2 * a0 + a1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub schema_version: String,
    pub n_states: usize,
    pub n_signals: usize,
    pub n_receivers: usize,
    pub action_counts: Vec<usize>,
    /// `transition[x][a][x']` = Q(x' | x, a).
    pub transition: Vec<Vec<Vec<f64>>>,
    pub initial: Vec<f64>,
    /// `sender_reward[x][a]`.
    pub sender_reward: Vec<Vec<f64>>,
    /// `receiver_rewards[i][x][a]`.
    pub receiver_rewards: Vec<Vec<Vec<f64>>>,
    pub horizon: usize,
    pub discount: f64,
}

impl GameSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Number of joint receiver actions.
    pub fn n_joint_actions(&self) -> usize {
        self.action_counts.iter().product()
    }

    pub fn joint_index(&self, actions: &[usize]) -> usize {
        actions
            .iter()
            .zip(&self.action_counts)
            .fold(0, |acc, (&a, &n)| acc * n + a)
    }

    pub fn decode_joint(&self, mut joint: usize) -> Vec<usize> {
        let mut out = vec![0; self.action_counts.len()];
        for (slot, &n) in out.iter_mut().zip(&self.action_counts).rev() {
            *slot = joint % n;
            joint /= n;
        }
        out
    }

    pub fn reward(&self, player: Player, state: usize, joint: usize) -> f64 {
        match player {
            Player::Sender => self.sender_reward[state][joint],
            Player::Receiver(i) => self.receiver_rewards[i][state][joint],
        }
    }

    /// The publicly observed reward vector `(R^{r,i}(x, a))_i`.
    pub fn receiver_reward_vector(&self, state: usize, joint: usize) -> Vec<f64> {
        self.receiver_rewards
            .iter()
            .map(|table| table[state][joint])
            .collect()
    }

    /// Whether the observed rewards are the ones state `state` produces under `joint`.
    pub fn rewards_match(&self, state: usize, joint: usize, rewards: &[f64]) -> bool {
        rewards.len() == self.n_receivers
            && self
                .receiver_rewards
                .iter()
                .zip(rewards)
                .all(|(table, r)| (table[state][joint] - r).abs() <= REWARD_MATCH_TOL)
    }

    /// Distinct reward vectors joint action `joint` can produce, over all states,
    /// in order of the lowest state producing each.
    pub fn reward_outcomes(&self, joint: usize) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for x in 0..self.n_states {
            let r = self.receiver_reward_vector(x, joint);
            if !out.iter().any(|o| rewards_equal(o, &r)) {
                out.push(r);
            }
        }
        out
    }

    /// All players: the sender followed by every receiver.
    pub fn players(&self) -> Vec<Player> {
        std::iter::once(Player::Sender)
            .chain((0..self.n_receivers).map(Player::Receiver))
            .collect()
    }

    /// Smallest and largest entry of a player's reward table.
    pub fn reward_range(&self, player: Player) -> (f64, f64) {
        let table = match player {
            Player::Sender => &self.sender_reward,
            Player::Receiver(i) => &self.receiver_rewards[i],
        };
        table
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn initial_belief(&self) -> Result<Belief> {
        Belief::new(self.initial.clone())
    }
}

pub(crate) fn rewards_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= REWARD_MATCH_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Player {
    Sender,
    Receiver(usize),
}

impl Player {
    /// Column index used in payoff vectors: sender first, then receivers.
    pub fn slot(self) -> usize {
        match self {
            Player::Sender => 0,
            Player::Receiver(i) => i + 1,
        }
    }
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Player::Sender => write!(f, "sender"),
            Player::Receiver(i) => write!(f, "receiver{}", i + 1),
        }
    }
}

// ---------------------------------------------------------------------------
// Validation

/// One failed invariant, naming the offending field and index.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValidationOptions {
    /// Reject zero transition entries. When false they are reported as warnings.
    pub strict_full_support: bool,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            strict_full_support: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Validation {
    pub violations: Vec<Violation>,
    pub warnings: Vec<Violation>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every invariant of a [`GameSpec`] in strict full-support mode.
pub fn validate(spec: &GameSpec) -> Vec<Violation> {
    validate_with(spec, ValidationOptions::default()).violations
}

pub fn validate_with(spec: &GameSpec, opts: ValidationOptions) -> Validation {
    let mut v = Validation::default();
    fn bad(v: &mut Validation, field: String, message: String) {
        v.violations.push(Violation { field, message });
    }

    if spec.schema_version != SCHEMA_VERSION {
        bad(
            &mut v,
            "schema_version".into(),
            format!(
                "expected \"{SCHEMA_VERSION}\", found \"{}\"",
                spec.schema_version
            ),
        );
    }
    if spec.n_states == 0 {
        bad(&mut v, "n_states".into(), "must be at least 1".into());
    }
    if spec.n_signals == 0 {
        bad(&mut v, "n_signals".into(), "must be at least 1".into());
    }
    if spec.n_receivers == 0 {
        bad(&mut v, "n_receivers".into(), "must be at least 1".into());
    }
    if spec.action_counts.len() != spec.n_receivers {
        bad(
            &mut v,
            "action_counts".into(),
            format!(
                "has {} entries for {} receivers",
                spec.action_counts.len(),
                spec.n_receivers
            ),
        );
    }
    for (i, &n) in spec.action_counts.iter().enumerate() {
        if n == 0 {
            bad(
                &mut v,
                format!("action_counts[{i}]"),
                "must be at least 1".into(),
            );
        }
    }
    // Shape errors make the per-entry checks meaningless.
    let shape_ok = v.violations.is_empty();
    if spec.horizon == 0 {
        bad(&mut v, "horizon".into(), "must be at least 1".into());
    }
    if !(spec.discount > 0.0 && spec.discount <= 1.0) {
        bad(
            &mut v,
            "discount".into(),
            format!("{} is outside (0, 1]", spec.discount),
        );
    }
    if !shape_ok {
        return v;
    }

    let nx = spec.n_states;
    let na = spec.n_joint_actions();

    check_distribution(&mut v, "initial".into(), &spec.initial, nx, STOCHASTIC_TOL);

    if spec.transition.len() != nx {
        v.violations.push(Violation {
            field: "transition".into(),
            message: format!("has {} rows, expected {nx}", spec.transition.len()),
        });
    } else {
        for (x, per_action) in spec.transition.iter().enumerate() {
            if per_action.len() != na {
                v.violations.push(Violation {
                    field: format!("transition[{x}]"),
                    message: format!("has {} joint actions, expected {na}", per_action.len()),
                });
                continue;
            }
            for (a, row) in per_action.iter().enumerate() {
                let field = format!("transition[{x}][{a}]");
                check_distribution(&mut v, field.clone(), row, nx, STOCHASTIC_TOL);
                if row.len() == nx {
                    for (xn, &q) in row.iter().enumerate() {
                        if q == 0.0 {
                            let w = Violation {
                                field: format!("{field}[{xn}]"),
                                message: "zero transition probability violates full support".into(),
                            };
                            if opts.strict_full_support {
                                v.violations.push(w);
                            } else {
                                v.warnings.push(w);
                            }
                        }
                    }
                }
            }
        }
    }

    check_table(&mut v, "sender_reward".into(), &spec.sender_reward, nx, na);
    if spec.receiver_rewards.len() != spec.n_receivers {
        v.violations.push(Violation {
            field: "receiver_rewards".into(),
            message: format!(
                "has {} tables for {} receivers",
                spec.receiver_rewards.len(),
                spec.n_receivers
            ),
        });
    } else {
        for (i, table) in spec.receiver_rewards.iter().enumerate() {
            check_table(&mut v, format!("receiver_rewards[{i}]"), table, nx, na);
        }
    }
    v
}

fn check_distribution(v: &mut Validation, field: String, row: &[f64], len: usize, tol: f64) {
    if row.len() != len {
        v.violations.push(Violation {
            field,
            message: format!("has length {}, expected {len}", row.len()),
        });
        return;
    }
    if let Some(i) = row.iter().position(|p| !p.is_finite() || *p < 0.0) {
        v.violations.push(Violation {
            field: format!("{field}[{i}]"),
            message: format!("entry {} is negative or not finite", row[i]),
        });
        return;
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > tol {
        v.violations.push(Violation {
            field,
            message: format!("sums to {sum}, expected 1"),
        });
    }
}

fn check_table(v: &mut Validation, field: String, table: &[Vec<f64>], nx: usize, na: usize) {
    if table.len() != nx {
        v.violations.push(Violation {
            field,
            message: format!("has {} rows, expected {nx}", table.len()),
        });
        return;
    }
    for (x, row) in table.iter().enumerate() {
        if row.len() != na {
            v.violations.push(Violation {
                field: format!("{field}[{x}]"),
                message: format!("has {} entries, expected {na}", row.len()),
            });
        } else if let Some(a) = row.iter().position(|r| !r.is_finite()) {
            v.violations.push(Violation {
                field: format!("{field}[{x}][{a}]"),
                message: "reward is not finite".into(),
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Beliefs and prescriptions

/// Probability vector over the state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidBelief("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidBelief(format!(
                "negative or non-finite entry in {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > BELIEF_TOL {
            return Err(Error::InvalidBelief(format!("{probs:?} sums to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes a nonnegative weight vector. Returns `None` if its mass is zero.
    pub fn from_weights(mut weights: Vec<f64>) -> Option<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return None;
        }
        for w in &mut weights {
            *w = (*w / sum).max(0.0);
        }
        Some(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn point(n: usize, state: usize) -> Self {
        let mut p = vec![0.0; n];
        p[state] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1_distance(&self, other: &Belief) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Belief) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for Belief {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidPrescription(format!(
            "{what}: negative entry in {row:?}"
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > BELIEF_TOL {
        return Err(Error::InvalidPrescription(format!(
            "{what}: {row:?} sums to {sum}"
        )));
    }
    Ok(())
}

/// Sender stage prescription gamma^s(s | x), one row per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenderPrescription {
    rows: Vec<Vec<f64>>,
}

impl SenderPrescription {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidPrescription("no rows".into()));
        }
        let width = rows[0].len();
        for (x, row) in rows.iter().enumerate() {
            if row.len() != width || width == 0 {
                return Err(Error::InvalidPrescription(format!(
                    "row {x} has the wrong width"
                )));
            }
            check_row(row, &format!("row {x}"))?;
        }
        Ok(Self { rows })
    }

    /// Same uniform signal distribution in every state.
    pub fn babbling(n_states: usize, n_signals: usize) -> Self {
        Self {
            rows: vec![vec![1.0 / n_signals as f64; n_signals]; n_states],
        }
    }

    /// Deterministic prescription sending `signals[x]` in state `x`.
    pub fn pure(signals: &[usize], n_signals: usize) -> Self {
        let rows = signals
            .iter()
            .map(|&s| {
                let mut row = vec![0.0; n_signals];
                row[s] = 1.0;
                row
            })
            .collect();
        Self { rows }
    }

    /// Sends signal `x` in state `x`; needs at least as many signals as states.
    pub fn revealing(n_states: usize, n_signals: usize) -> Option<Self> {
        (n_signals >= n_states).then(|| Self::pure(&(0..n_states).collect::<Vec<_>>(), n_signals))
    }

    pub fn prob(&self, state: usize, signal: usize) -> f64 {
        self.rows[state][signal]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.rows[state]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    pub fn n_signals(&self) -> usize {
        self.rows[0].len()
    }

    /// True when every row is the same distribution.
    pub fn is_babbling(&self) -> bool {
        self.rows.iter().all(|r| {
            r.iter()
                .zip(&self.rows[0])
                .all(|(a, b)| (a - b).abs() <= 1e-12)
        })
    }

    /// Probability of each signal under belief `mu`.
    pub fn signal_probs(&self, mu: &Belief) -> Vec<f64> {
        let mut out = vec![0.0; self.n_signals()];
        for (x, row) in self.rows.iter().enumerate() {
            for (s, g) in row.iter().enumerate() {
                out[s] += mu[x] * g;
            }
        }
        out
    }
}

/// Product-form receiver prescription: one action distribution per receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverPrescription {
    factors: Vec<Vec<f64>>,
}

impl ReceiverPrescription {
    pub fn new(factors: Vec<Vec<f64>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidPrescription("no receivers".into()));
        }
        for (i, f) in factors.iter().enumerate() {
            if f.is_empty() {
                return Err(Error::InvalidPrescription(format!(
                    "receiver {i} has no actions"
                )));
            }
            check_row(f, &format!("receiver {i}"))?;
        }
        Ok(Self { factors })
    }

    pub fn pure(actions: &[usize], counts: &[usize]) -> Self {
        let factors = actions
            .iter()
            .zip(counts)
            .map(|(&a, &n)| {
                let mut f = vec![0.0; n];
                f[a] = 1.0;
                f
            })
            .collect();
        Self { factors }
    }

    pub fn factor(&self, receiver: usize) -> &[f64] {
        &self.factors[receiver]
    }

    pub fn factors(&self) -> &[Vec<f64>] {
        &self.factors
    }

    /// Probability of the joint action with index `joint`.
    pub fn joint_prob(&self, spec: &GameSpec, joint: usize) -> f64 {
        spec.decode_joint(joint)
            .iter()
            .zip(&self.factors)
            .map(|(&a, f)| f[a])
            .product()
    }

    /// Distribution over joint actions.
    pub fn joint_distribution(&self, spec: &GameSpec) -> Vec<f64> {
        (0..spec.n_joint_actions())
            .map(|a| self.joint_prob(spec, a))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Belief updates

/// Completion used when Bayes' rule is undefined (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OffSupport {
    /// Return an error.
    Reject,
    /// Reset the belief to uniform over all states.
    #[default]
    UniformReset,
}

/// Posterior over the current state after observing signal `signal`.
pub fn update_on_signal(
    mu: &Belief,
    gamma: &SenderPrescription,
    signal: usize,
    policy: OffSupport,
) -> Result<Belief> {
    let weights: Vec<f64> = (0..mu.len())
        .map(|x| mu[x] * gamma.prob(x, signal))
        .collect();
    match Belief::from_weights(weights) {
        Some(b) => Ok(b),
        None => match policy {
            OffSupport::Reject => Err(Error::ZeroProbabilitySignal { signal }),
            OffSupport::UniformReset => Ok(Belief::uniform(mu.len())),
        },
    }
}

/// Next period's pre-signal belief after joint action `joint` produced the
/// publicly observed receiver rewards `rewards`.
///
/// The receivers' own mixing probabilities cancel from numerator and
/// denominator, so they do not appear.
pub fn update_on_action(
    nu: &Belief,
    joint: usize,
    rewards: &[f64],
    spec: &GameSpec,
    policy: OffSupport,
) -> Result<Belief> {
    let n = spec.n_states;
    let mut weights = vec![0.0; n];
    for x in 0..n {
        if nu[x] > 0.0 && spec.rewards_match(x, joint, rewards) {
            for (w, q) in weights.iter_mut().zip(&spec.transition[x][joint]) {
                *w += nu[x] * q;
            }
        }
    }
    match Belief::from_weights(weights) {
        Some(b) => Ok(b),
        None => match policy {
            OffSupport::Reject => Err(Error::InconsistentReward {
                action: joint,
                rewards: rewards.to_vec(),
            }),
            OffSupport::UniformReset => Ok(Belief::uniform(n)),
        },
    }
}

/// One realizable reward observation under a joint action.
#[derive(Debug, Clone)]
pub struct RewardBranch {
    pub rewards: Vec<f64>,
    /// Probability of this observation under the post-signal belief.
    pub mass: f64,
    /// Next pre-signal belief after observing it.
    pub next: Belief,
}

/// Enumerates the reward observations that have positive probability under
/// `nu` and joint action `joint`, with their probabilities and the updated
/// beliefs.
pub fn reward_branches(spec: &GameSpec, nu: &Belief, joint: usize) -> Vec<RewardBranch> {
    let n = spec.n_states;
    let mut groups: Vec<(Vec<f64>, f64, Vec<f64>)> = Vec::new();
    for x in 0..n {
        if nu[x] <= 0.0 {
            continue;
        }
        let r = spec.receiver_reward_vector(x, joint);
        let idx = match groups.iter().position(|(g, _, _)| rewards_equal(g, &r)) {
            Some(i) => i,
            None => {
                groups.push((r, 0.0, vec![0.0; n]));
                groups.len() - 1
            }
        };
        let (_, mass, next) = &mut groups[idx];
        *mass += nu[x];
        for (w, q) in next.iter_mut().zip(&spec.transition[x][joint]) {
            *w += nu[x] * q;
        }
    }
    groups
        .into_iter()
        .filter_map(|(rewards, mass, next)| {
            Belief::from_weights(next).map(|next| RewardBranch {
                rewards,
                mass,
                next,
            })
        })
        .collect()
}

/// Expected stage reward of `player` when the state is drawn from `belief`,
/// the sender uses `sender` and the receivers use `receiver`.
pub fn stage_expected_reward(
    player: Player,
    belief: &Belief,
    sender: &SenderPrescription,
    receiver: &ReceiverPrescription,
    spec: &GameSpec,
) -> f64 {
    let joint = receiver.joint_distribution(spec);
    let mut total = 0.0;
    for x in 0..spec.n_states {
        for s in 0..sender.n_signals() {
            let w = belief[x] * sender.prob(x, s);
            if w == 0.0 {
                continue;
            }
            for (a, pa) in joint.iter().enumerate() {
                total += w * pa * spec.reward(player, x, a);
            }
        }
    }
    total
}

/// Public observation made during a period.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Signal(usize),
    Action { joint: usize, rewards: Vec<f64> },
}

/// Checks that an observation lies within the declared alphabets and, when
/// `require_consistent` is set, that the rewards are producible by some state.
pub fn check_observation(
    spec: &GameSpec,
    obs: &Observation,
    require_consistent: bool,
) -> Result<()> {
    match obs {
        Observation::Signal(s) if *s >= spec.n_signals => Err(Error::InvalidObservation(format!(
            "signal {s} outside 0..{}",
            spec.n_signals
        ))),
        Observation::Signal(_) => Ok(()),
        Observation::Action { joint, rewards } => {
            if *joint >= spec.n_joint_actions() {
                return Err(Error::InvalidObservation(format!(
                    "joint action {joint} out of range"
                )));
            }
            if rewards.len() != spec.n_receivers {
                return Err(Error::InvalidObservation(format!(
                    "{} rewards for {} receivers",
                    rewards.len(),
                    spec.n_receivers
                )));
            }
            if require_consistent
                && !(0..spec.n_states).any(|x| spec.rewards_match(x, *joint, rewards))
            {
                return Err(Error::InconsistentReward {
                    action: *joint,
                    rewards: rewards.clone(),
                });
            }
            Ok(())
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// 2 states, 2 signals, one receiver with 2 actions.
    pub(crate) fn small_spec() -> GameSpec {
        GameSpec {
            schema_version: "1".into(),
            n_states: 2,
            n_signals: 2,
            n_receivers: 1,
            action_counts: vec![2],
            transition: vec![
                vec![vec![0.8, 0.2], vec![0.6, 0.4]],
                vec![vec![0.4, 0.6], vec![0.2, 0.8]],
            ],
            initial: vec![0.5, 0.5],
            sender_reward: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            receiver_rewards: vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
            horizon: 2,
            discount: 0.9,
        }
    }

    #[test]
    fn well_formed_spec_has_no_violations() {
        assert!(validate(&small_spec()).is_empty());
    }

    #[test]
    fn bad_row_sum_names_the_row() {
        let mut spec = small_spec();
        spec.transition[1][0] = vec![0.5, 0.4];
        let v = validate(&spec);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "transition[1][0]");
    }

    #[test]
    fn zero_entry_violates_strict_full_support_only() {
        let mut spec = small_spec();
        spec.transition[0][1] = vec![1.0, 0.0];
        let strict = validate(&spec);
        assert_eq!(strict.len(), 1);
        assert!(strict[0].message.contains("full support"));
        let relaxed = validate_with(
            &spec,
            ValidationOptions {
                strict_full_support: false,
            },
        );
        assert!(relaxed.is_ok());
        assert_eq!(relaxed.warnings.len(), 1);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut spec = small_spec();
        spec.receiver_rewards[0].pop();
        spec.schema_version = "2".into();
        let v = validate(&spec);
        assert!(v.iter().any(|v| v.field == "schema_version"));
    }

    #[test]
    fn joint_encoding_round_trips() {
        let mut spec = small_spec();
        spec.n_receivers = 2;
        spec.action_counts = vec![2, 3];
        for a in 0..6 {
            assert_eq!(spec.joint_index(&spec.decode_joint(a)), a);
        }
        assert_eq!(spec.joint_index(&[1, 2]), 5);
    }

    #[test]
    fn signal_update_matches_hand_value() {
        let mu = Belief::new(vec![0.5, 0.5]).unwrap();
        let g = SenderPrescription::new(vec![vec![0.8, 0.2], vec![0.2, 0.8]]).unwrap();
        let nu = update_on_signal(&mu, &g, 1, OffSupport::Reject).unwrap();
        assert_abs_diff_eq!(nu[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(nu[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn babbling_leaves_belief_unchanged() {
        let mu = Belief::new(vec![0.2, 0.3, 0.5]).unwrap();
        let g = SenderPrescription::babbling(3, 4);
        for s in 0..4 {
            let nu = update_on_signal(&mu, &g, s, OffSupport::Reject).unwrap();
            assert!(nu.max_abs_diff(&mu) <= 1e-12);
        }
    }

    #[test]
    fn revealing_signal_gives_point_mass() {
        let mu = Belief::new(vec![0.3, 0.7]).unwrap();
        let g = SenderPrescription::revealing(2, 2).unwrap();
        let nu = update_on_signal(&mu, &g, 1, OffSupport::Reject).unwrap();
        assert_eq!(nu.probs(), &[0.0, 1.0]);
    }

    #[test]
    fn zero_probability_signal() {
        let mu = Belief::point(2, 0);
        let g = SenderPrescription::revealing(2, 2).unwrap();
        assert!(matches!(
            update_on_signal(&mu, &g, 1, OffSupport::Reject),
            Err(Error::ZeroProbabilitySignal { signal: 1 })
        ));
        let reset = update_on_signal(&mu, &g, 1, OffSupport::UniformReset).unwrap();
        assert_eq!(reset.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn constant_reward_reduces_to_prediction() {
        let mut spec = small_spec();
        spec.receiver_rewards[0] = vec![vec![3.0, 1.0], vec![3.0, 1.0]];
        let nu = Belief::new(vec![0.25, 0.75]).unwrap();
        let next = update_on_action(&nu, 0, &[3.0], &spec, OffSupport::Reject).unwrap();
        let expect = [0.25 * 0.8 + 0.75 * 0.4, 0.25 * 0.2 + 0.75 * 0.6];
        assert_abs_diff_eq!(next[0], expect[0], epsilon = 1e-15);
        assert_abs_diff_eq!(next[1], expect[1], epsilon = 1e-15);
    }

    #[test]
    fn informative_reward_selects_state() {
        let spec = small_spec();
        let nu = Belief::new(vec![0.5, 0.5]).unwrap();
        let next = update_on_action(&nu, 0, &[1.0], &spec, OffSupport::Reject).unwrap();
        assert_eq!(next.probs(), &[0.8, 0.2]);
    }

    #[test]
    fn inconsistent_reward_is_rejected() {
        let spec = small_spec();
        let nu = Belief::point(2, 0);
        assert!(matches!(
            update_on_action(&nu, 0, &[0.0], &spec, OffSupport::Reject),
            Err(Error::InconsistentReward { .. })
        ));
    }

    #[test]
    fn branches_partition_the_belief() {
        let spec = small_spec();
        let nu = Belief::new(vec![0.3, 0.7]).unwrap();
        let br = reward_branches(&spec, &nu, 1);
        assert_eq!(br.len(), 2);
        assert_abs_diff_eq!(br.iter().map(|b| b.mass).sum::<f64>(), 1.0, epsilon = 1e-15);
        for b in &br {
            let g = update_on_action(&nu, 1, &b.rewards, &spec, OffSupport::Reject).unwrap();
            assert!(g.max_abs_diff(&b.next) <= 1e-15);
        }
    }

    #[test]
    fn expected_reward_cases() {
        let spec = small_spec();
        let babble = SenderPrescription::babbling(2, 2);
        // degenerate measure
        let r = ReceiverPrescription::pure(&[1], &[2]);
        let pm = Belief::point(2, 1);
        assert_eq!(
            stage_expected_reward(Player::Sender, &pm, &babble, &r, &spec),
            1.0
        );
        // hand expectation
        let b = Belief::new(vec![0.3, 0.7]).unwrap();
        assert_abs_diff_eq!(
            stage_expected_reward(Player::Receiver(0), &b, &babble, &r, &spec),
            0.7,
            epsilon = 1e-15
        );
        // mixing over equal columns
        let mut eq = spec.clone();
        eq.receiver_rewards[0] = vec![vec![2.0, 2.0], vec![5.0, 5.0]];
        let mixed = ReceiverPrescription::new(vec![vec![0.5, 0.5]]).unwrap();
        let pure = ReceiverPrescription::pure(&[0], &[2]);
        assert_abs_diff_eq!(
            stage_expected_reward(Player::Receiver(0), &b, &babble, &mixed, &eq),
            stage_expected_reward(Player::Receiver(0), &b, &babble, &pure, &eq),
            epsilon = 1e-15
        );
    }

    #[test]
    fn observation_checks() {
        let spec = small_spec();
        assert!(check_observation(&spec, &Observation::Signal(2), false).is_err());
        let obs = Observation::Action {
            joint: 0,
            rewards: vec![0.5],
        };
        assert!(check_observation(&spec, &obs, false).is_ok());
        assert!(check_observation(&spec, &obs, true).is_err());
    }

    #[test]
    fn json_round_trip() {
        let spec = small_spec();
        let text = spec.to_json_pretty().unwrap();
        assert_eq!(GameSpec::from_json_str(&text).unwrap(), spec);
    }
}
