//! Brute-force equilibrium oracles.
//!
//! Nothing here calls the stage solvers. Equilibrium and deviation values are
//! recomputed by backward induction over explicit common histories, with
//! beliefs rebuilt from the strategy under test by the two Bayes maps
//! (uniform reset off the support).

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::backward::ValueTables;
use crate::error::{Error, Result};
use crate::forward::StrategyProfile;
use crate::model::{
    update_on_action, update_on_signal, Belief, GameSpec, OffSupport, Player, ReceiverPrescription,
    SenderPrescription,
};
use crate::stage::Mode;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Largest common-history tree (pre- plus post-signal nodes) to build.
    pub node_cap: u64,
    /// Deviation tolerance before slack.
    pub eps_dev: f64,
    /// Ties in the oracle's own best responses.
    pub tie_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            node_cap: 10_000_000,
            eps_dev: 1e-6,
            tie_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviationReport {
    pub player: Player,
    /// History (and, for the sender in PBE mode, the current state) where the
    /// gain net of slack is largest.
    pub info_set: String,
    /// Moves of the best deviation found there that differ from equilibrium play.
    pub deviation: Vec<String>,
    pub eq_payoff: f64,
    pub dev_payoff: f64,
    pub gain: f64,
    /// Largest gain at information sets reached with positive probability.
    pub reachable_gain: f64,
    pub value_slack: f64,
    pub lookup_slack: f64,
    pub eps_dev: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub info_sets: usize,
}

impl fmt::Display for DeviationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: gain {:.3e} at {} (eq {:.9}, dev {:.9}), tolerance {:.3e} = eps {:.1e} + value slack {:.3e} + lookup slack {:.3e}",
            self.player,
            if self.passed { "PASS" } else { "FAIL" },
            self.gain,
            self.info_set,
            self.eq_payoff,
            self.dev_payoff,
            self.tolerance,
            self.eps_dev,
            self.value_slack,
            self.lookup_slack
        )
    }
}

pub fn all_pass(reports: &[DeviationReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

// ---------------------------------------------------------------------------
// History tree

/// Distinct receiver-reward vectors per joint action over all states.
struct Outcomes {
    list: Vec<Vec<Vec<f64>>>,
    of_state: Vec<Vec<usize>>,
}

impl Outcomes {
    fn new(spec: &GameSpec) -> Self {
        let mut list = Vec::new();
        let mut of_state = Vec::new();
        for a in 0..spec.n_joint_actions() {
            let mut here: Vec<Vec<f64>> = Vec::new();
            let mut idx = Vec::new();
            for x in 0..spec.n_states {
                let r = spec.receiver_reward_vector(x, a);
                let pos = here.iter().position(|g| spec.rewards_match(x, a, g));
                idx.push(match pos {
                    Some(p) => p,
                    None => {
                        here.push(r);
                        here.len() - 1
                    }
                });
            }
            list.push(here);
            of_state.push(idx);
        }
        Self { list, of_state }
    }

    /// Probability of each outcome of `a` under `nu`.
    fn masses(&self, a: usize, nu: &Belief) -> Vec<f64> {
        let mut m = vec![0.0; self.list[a].len()];
        for (x, &o) in self.of_state[a].iter().enumerate() {
            m[o] += nu[x];
        }
        m
    }
}

struct PreNode {
    t: usize,
    mu: Belief,
    gamma: SenderPrescription,
    posts: Vec<usize>,
    label: String,
}

struct PostNode {
    t: usize,
    nu: Belief,
    rho: ReceiverPrescription,
    joint: Vec<f64>,
    /// `[a][outcome]`, `None` after the last period.
    children: Vec<Vec<Option<usize>>>,
    label: String,
}

struct Tree {
    pre: Vec<PreNode>,
    post: Vec<PostNode>,
    outcomes: Outcomes,
}

const RESET: OffSupport = OffSupport::UniformReset;

fn reward_text(r: &[f64]) -> String {
    r.iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn tree_size(spec: &GameSpec, outcomes: &Outcomes) -> u128 {
    let branching =
        spec.n_signals as u128 * outcomes.list.iter().map(|o| o.len() as u128).sum::<u128>();
    let mut level = 1u128;
    let mut total = 0u128;
    for _ in 0..spec.horizon {
        total = total.saturating_add(level.saturating_mul(1 + spec.n_signals as u128));
        level = level.saturating_mul(branching);
    }
    total
}

impl Tree {
    fn build(spec: &GameSpec, strategy: &dyn StrategyProfile, cap: u64) -> Result<Self> {
        let outcomes = Outcomes::new(spec);
        let size = tree_size(spec, &outcomes);
        if size > cap as u128 {
            return Err(Error::TreeTooLarge {
                nodes: size.min(u64::MAX as u128) as u64,
                cap,
            });
        }
        let mut tree = Tree {
            pre: Vec::new(),
            post: Vec::new(),
            outcomes,
        };
        tree.add_pre(spec, strategy, 1, spec.initial_belief()?, "root".into())?;
        Ok(tree)
    }

    fn add_pre(
        &mut self,
        spec: &GameSpec,
        strategy: &dyn StrategyProfile,
        t: usize,
        mu: Belief,
        label: String,
    ) -> Result<usize> {
        let gamma = strategy.sender(t, &mu)?;
        let idx = self.pre.len();
        self.pre.push(PreNode {
            t,
            mu: mu.clone(),
            gamma: gamma.clone(),
            posts: Vec::new(),
            label: label.clone(),
        });
        for s in 0..spec.n_signals {
            let nu = update_on_signal(&mu, &gamma, s, RESET)?;
            let rho = strategy.receiver(t, &nu)?;
            let joint = rho.joint_distribution(spec);
            let post_label = format!("{label}/s{s}");
            let p = self.post.len();
            self.post.push(PostNode {
                t,
                nu: nu.clone(),
                rho,
                joint,
                children: Vec::new(),
                label: post_label.clone(),
            });
            let mut children = Vec::new();
            for a in 0..spec.n_joint_actions() {
                let mut row = Vec::new();
                for o in 0..self.outcomes.list[a].len() {
                    if t < spec.horizon {
                        let r = self.outcomes.list[a][o].clone();
                        let next = update_on_action(&nu, a, &r, spec, RESET)?;
                        let child_label = format!("{post_label}/a{a}r{}", reward_text(&r));
                        row.push(Some(self.add_pre(
                            spec,
                            strategy,
                            t + 1,
                            next,
                            child_label,
                        )?));
                    } else {
                        row.push(None);
                    }
                }
                children.push(row);
            }
            self.post[p].children = children;
            self.pre[idx].posts.push(p);
        }
        Ok(idx)
    }
}

/// Values on the tree under the strategy under test.
struct EqValues {
    sender_pre: Vec<Vec<f64>>,
    recv_pre: Vec<Vec<f64>>,
    recv_post: Vec<Vec<f64>>,
    reach_pre: Vec<Vec<f64>>,
    reach_post: Vec<Vec<f64>>,
}

/// Continuation of the receivers at post node `n` after joint action `a`:
/// `sum_x nu(x) R^i(x, a) + delta * sum_o m_o cont(child_o)`.
fn receiver_action_value(
    spec: &GameSpec,
    tree: &Tree,
    n: usize,
    a: usize,
    i: usize,
    cont: &dyn Fn(usize) -> f64,
) -> f64 {
    let node = &tree.post[n];
    let mut v: f64 = (0..spec.n_states)
        .map(|x| node.nu[x] * spec.receiver_rewards[i][x][a])
        .sum();
    if node.t < spec.horizon {
        for (o, m) in tree.outcomes.masses(a, &node.nu).into_iter().enumerate() {
            if m > 0.0 {
                let child = node.children[a][o].expect("interior node has children");
                v += spec.discount * m * cont(child);
            }
        }
    }
    v
}

/// Sender's value in state `x` at post node `n` after joint action `a`.
fn sender_action_value(
    spec: &GameSpec,
    tree: &Tree,
    n: usize,
    x: usize,
    a: usize,
    cont: &dyn Fn(usize, usize) -> f64,
) -> f64 {
    let node = &tree.post[n];
    let mut v = spec.sender_reward[x][a];
    if node.t < spec.horizon {
        let child =
            node.children[a][tree.outcomes.of_state[a][x]].expect("interior node has children");
        for (xn, q) in spec.transition[x][a].iter().enumerate() {
            if *q > 0.0 {
                v += spec.discount * q * cont(child, xn);
            }
        }
    }
    v
}

fn equilibrium_values(spec: &GameSpec, tree: &Tree) -> EqValues {
    let (nx, nr) = (spec.n_states, spec.n_receivers);
    let np = tree.pre.len();
    let mut sender_pre = vec![vec![0.0; nx]; np];
    let mut recv_pre = vec![vec![0.0; nr]; np];
    let mut sender_post = vec![vec![0.0; nx]; tree.post.len()];
    let mut recv_post = vec![vec![0.0; nr]; tree.post.len()];
    for h in (0..np).rev() {
        let node = &tree.pre[h];
        for (s, &n) in node.posts.iter().enumerate() {
            let post = &tree.post[n];
            for x in 0..nx {
                sender_post[n][x] = post
                    .joint
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(a, p)| {
                        p * sender_action_value(spec, tree, n, x, a, &|c, xn| sender_pre[c][xn])
                    })
                    .sum();
            }
            for i in 0..nr {
                recv_post[n][i] = post
                    .joint
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(a, p)| {
                        p * receiver_action_value(spec, tree, n, a, i, &|c| recv_pre[c][i])
                    })
                    .sum();
            }
            for x in 0..nx {
                sender_pre[h][x] += node.gamma.prob(x, s) * sender_post[n][x];
            }
        }
        let probs = node.gamma.signal_probs(&node.mu);
        for i in 0..nr {
            recv_pre[h][i] = node
                .posts
                .iter()
                .zip(&probs)
                .map(|(&n, p)| p * recv_post[n][i])
                .sum();
        }
    }

    let mut reach_pre = vec![vec![0.0; nx]; np];
    let mut reach_post = vec![vec![0.0; nx]; tree.post.len()];
    reach_pre[0] = spec.initial.clone();
    for h in 0..np {
        let node = &tree.pre[h];
        for (s, &n) in node.posts.iter().enumerate() {
            for x in 0..nx {
                reach_post[n][x] = reach_pre[h][x] * node.gamma.prob(x, s);
            }
            let post = &tree.post[n];
            if post.t >= spec.horizon {
                continue;
            }
            for (a, &pa) in post.joint.iter().enumerate() {
                for x in 0..nx {
                    let w = reach_post[n][x] * pa;
                    if w == 0.0 {
                        continue;
                    }
                    let child =
                        post.children[a][tree.outcomes.of_state[a][x]].expect("interior node");
                    for (xn, q) in spec.transition[x][a].iter().enumerate() {
                        reach_pre[child][xn] += w * q;
                    }
                }
            }
        }
    }
    EqValues {
        sender_pre,
        recv_pre,
        recv_post,
        reach_pre,
        reach_post,
    }
}

fn other_receivers_prob(rho: &ReceiverPrescription, spec: &GameSpec, a: usize, i: usize) -> f64 {
    spec.decode_joint(a)
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, &aj)| rho.factor(j)[aj])
        .product()
}

/// Receiver i's best unilateral deviation values (pure, by backward induction).
/// Returns `(dev_pre, dev_post, choice_post)`.
fn receiver_deviation(
    spec: &GameSpec,
    tree: &Tree,
    i: usize,
    tie_tol: f64,
) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut dev_pre = vec![0.0; tree.pre.len()];
    let mut dev_post = vec![0.0; tree.post.len()];
    let mut choice = vec![0; tree.post.len()];
    let counts = &spec.action_counts;
    for h in (0..tree.pre.len()).rev() {
        let node = &tree.pre[h];
        for &n in &node.posts {
            let post = &tree.post[n];
            let mut by_action = vec![0.0; counts[i]];
            for a in 0..spec.n_joint_actions() {
                let w = other_receivers_prob(&post.rho, spec, a, i);
                if w > 0.0 {
                    let own = spec.decode_joint(a)[i];
                    by_action[own] +=
                        w * receiver_action_value(spec, tree, n, a, i, &|c| dev_pre[c]);
                }
            }
            let best = by_action.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            choice[n] = by_action
                .iter()
                .position(|&v| v >= best - tie_tol)
                .unwrap_or(0);
            dev_post[n] = best;
        }
        let probs = node.gamma.signal_probs(&node.mu);
        dev_pre[h] = node
            .posts
            .iter()
            .zip(&probs)
            .map(|(&n, p)| p * dev_post[n])
            .sum();
    }
    (dev_pre, dev_post, choice)
}

/// Sender's best pure behavioral deviation per (pre node, state).
fn sender_deviation(
    spec: &GameSpec,
    tree: &Tree,
    tie_tol: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let nx = spec.n_states;
    let mut dev_pre = vec![vec![0.0; nx]; tree.pre.len()];
    let mut choice = vec![vec![0; nx]; tree.pre.len()];
    for h in (0..tree.pre.len()).rev() {
        let node = &tree.pre[h];
        let mut per_signal = vec![vec![0.0; node.posts.len()]; nx];
        for (s, &n) in node.posts.iter().enumerate() {
            let post = &tree.post[n];
            for (x, row) in per_signal.iter_mut().enumerate() {
                row[s] = post
                    .joint
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(a, p)| {
                        p * sender_action_value(spec, tree, n, x, a, &|c, xn| dev_pre[c][xn])
                    })
                    .sum();
            }
        }
        for x in 0..nx {
            let best = per_signal[x]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            choice[h][x] = per_signal[x]
                .iter()
                .position(|&v| v >= best - tie_tol)
                .unwrap_or(0);
            dev_pre[h][x] = best;
        }
    }
    (dev_pre, choice)
}

/// Per-period slack, indexed by the period of the information set.
struct Slack {
    value: Vec<f64>,
    lookup: Vec<f64>,
}

impl Slack {
    fn zero(horizon: usize) -> Self {
        Self {
            value: vec![0.0; horizon + 2],
            lookup: vec![0.0; horizon + 2],
        }
    }

    fn at(&self, t: usize) -> (f64, f64) {
        (self.value[t], self.lookup[t])
    }
}

/// Slack for player `player` from (1) the gap `e_t` between the tabulated
/// value and the tree value of the strategy at period-t histories, and (2)
/// the prescription lookup distance. An information set at period tau gets
/// `2 * sum_{t > tau} delta^(t - tau) e_t` plus
/// `sum_{t >= tau} delta^(t - tau) d_t * span_t`.
fn slack_for(
    spec: &GameSpec,
    tree: &Tree,
    eq: &EqValues,
    strategy: &dyn StrategyProfile,
    tables: Option<&ValueTables>,
    player: Player,
) -> Slack {
    let horizon = spec.horizon;
    let mut gap = vec![0.0f64; horizon + 2];
    let mut dist = vec![0.0f64; horizon + 2];
    for (h, node) in tree.pre.iter().enumerate() {
        let t = node.t;
        if let Some(tables) = tables {
            let e = match player {
                Player::Receiver(i) => {
                    (tables.receiver_value(t, i, &node.mu) - eq.recv_pre[h][i]).abs()
                }
                Player::Sender => match tables.mode() {
                    Mode::Pbe => (0..spec.n_states)
                        .map(|x| {
                            (tables.sender_interim(t, &node.mu, x) - eq.sender_pre[h][x]).abs()
                        })
                        .fold(0.0, f64::max),
                    Mode::Cpse => {
                        let w: f64 = (0..spec.n_states)
                            .map(|x| node.mu[x] * eq.sender_pre[h][x])
                            .sum();
                        (tables.sender_ex_ante(t, &node.mu) - w).abs()
                    }
                },
            };
            if e.is_finite() {
                gap[t] = gap[t].max(e);
            } else {
                gap[t] = f64::INFINITY;
            }
        }
        dist[t] = dist[t].max(strategy.lookup_distance(t, &node.mu));
        for &n in &node.posts {
            dist[t] = dist[t].max(strategy.lookup_distance(t, &tree.post[n].nu));
        }
    }
    let (lo, hi) = spec.reward_range(player);
    let delta = spec.discount;
    let mut slack = Slack::zero(horizon);
    for tau in 1..=horizon {
        let mut v = 0.0;
        let mut l = 0.0;
        let mut d = 1.0;
        for t in tau..=horizon {
            if t > tau {
                v += 2.0 * d * gap[t];
            }
            let remaining: f64 = (0..=(horizon - t)).map(|k| delta.powi(k as i32)).sum();
            l += d * dist[t] * (hi - lo) * remaining;
            d *= delta;
        }
        slack.value[tau] = v;
        slack.lookup[tau] = l;
    }
    slack
}

struct Candidate {
    info_set: String,
    eq: f64,
    dev: f64,
    t: usize,
    node: usize,
    state: Option<usize>,
}

fn report(
    player: Player,
    candidates: Vec<(Candidate, bool)>,
    slack: &Slack,
    cfg: &OracleConfig,
    describe: impl Fn(&Candidate) -> Vec<String>,
) -> DeviationReport {
    let info_sets = candidates.len();
    let reachable_gain = candidates
        .iter()
        .filter(|(_, r)| *r)
        .map(|(c, _)| c.dev - c.eq)
        .fold(0.0, f64::max);
    let worst = candidates.into_iter().map(|(c, _)| c).max_by(|a, b| {
        let (va, la) = slack.at(a.t);
        let (vb, lb) = slack.at(b.t);
        ((a.dev - a.eq) - va - la).total_cmp(&((b.dev - b.eq) - vb - lb))
    });
    match worst {
        None => DeviationReport {
            player,
            info_set: "(none)".into(),
            deviation: Vec::new(),
            eq_payoff: 0.0,
            dev_payoff: 0.0,
            gain: 0.0,
            reachable_gain,
            value_slack: 0.0,
            lookup_slack: 0.0,
            eps_dev: cfg.eps_dev,
            tolerance: cfg.eps_dev,
            passed: true,
            info_sets,
        },
        Some(c) => {
            let (v, l) = slack.at(c.t);
            let gain = c.dev - c.eq;
            let tolerance = cfg.eps_dev + v + l;
            DeviationReport {
                player,
                info_set: match c.state {
                    Some(x) => format!("{} x{x}", c.info_set),
                    None => c.info_set.clone(),
                },
                deviation: describe(&c),
                eq_payoff: c.eq,
                dev_payoff: c.dev,
                gain,
                reachable_gain,
                value_slack: v,
                lookup_slack: l,
                eps_dev: cfg.eps_dev,
                tolerance,
                passed: gain <= tolerance,
                info_sets,
            }
        }
    }
}

const MAX_LISTED_MOVES: usize = 50;

fn receiver_reports(
    spec: &GameSpec,
    tree: &Tree,
    eq: &EqValues,
    strategy: &dyn StrategyProfile,
    tables: Option<&ValueTables>,
    cfg: &OracleConfig,
) -> Vec<DeviationReport> {
    (0..spec.n_receivers)
        .map(|i| {
            let player = Player::Receiver(i);
            let (_, dev_post, choice) = receiver_deviation(spec, tree, i, cfg.tie_tol);
            let slack = slack_for(spec, tree, eq, strategy, tables, player);
            let candidates = (0..tree.post.len())
                .map(|n| {
                    let reach: f64 = eq.reach_post[n].iter().sum();
                    (
                        Candidate {
                            info_set: tree.post[n].label.clone(),
                            eq: eq.recv_post[n][i],
                            dev: dev_post[n],
                            t: tree.post[n].t,
                            node: n,
                            state: None,
                        },
                        reach > 0.0,
                    )
                })
                .collect();
            report(player, candidates, &slack, cfg, |c| {
                let prefix = &tree.post[c.node].label;
                tree.post
                    .iter()
                    .enumerate()
                    .filter(|(n, p)| {
                        p.label.starts_with(prefix.as_str()) && p.rho.factor(i)[choice[*n]] < 1.0
                    })
                    .take(MAX_LISTED_MOVES)
                    .map(|(n, p)| format!("{} -> a{}", p.label, choice[n]))
                    .collect()
            })
        })
        .collect()
}

/// Checks sequential rationality of every player against pure behavioral
/// deviations at every common history (reports: sender first, then each
/// receiver). With `tables`, the slack from tabulated continuation values is
/// measured and added to the tolerance.
pub fn check_pbe(
    spec: &GameSpec,
    strategy: &dyn StrategyProfile,
    tables: Option<&ValueTables>,
    cfg: &OracleConfig,
) -> Result<Vec<DeviationReport>> {
    let tree = Tree::build(spec, strategy, cfg.node_cap)?;
    let eq = equilibrium_values(spec, &tree);
    let (dev_pre, choice) = sender_deviation(spec, &tree, cfg.tie_tol);
    let slack = slack_for(spec, &tree, &eq, strategy, tables, Player::Sender);
    let mut candidates = Vec::new();
    for (h, node) in tree.pre.iter().enumerate() {
        for x in 0..spec.n_states {
            candidates.push((
                Candidate {
                    info_set: node.label.clone(),
                    eq: eq.sender_pre[h][x],
                    dev: dev_pre[h][x],
                    t: node.t,
                    node: h,
                    state: Some(x),
                },
                eq.reach_pre[h][x] > 0.0,
            ));
        }
    }
    let sender = report(Player::Sender, candidates, &slack, cfg, |c| {
        let prefix = &tree.pre[c.node].label;
        let mut moves = Vec::new();
        for (h, node) in tree.pre.iter().enumerate() {
            if !node.label.starts_with(prefix.as_str()) {
                continue;
            }
            for x in 0..spec.n_states {
                let s = choice[h][x];
                if node.gamma.prob(x, s) < 1.0 && moves.len() < MAX_LISTED_MOVES {
                    moves.push(format!("{} x{x} -> s{s}", node.label));
                }
            }
        }
        moves
    });
    let mut reports = vec![sender];
    reports.extend(receiver_reports(spec, &tree, &eq, strategy, tables, cfg));
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Commitment search

/// Values of a subgame: sender per current state (0 off the support) and
/// each receiver's expected value.
#[derive(Debug, Clone)]
struct Values {
    sender: Vec<f64>,
    receivers: Vec<f64>,
}

/// Best pure commitment plans of the sender from arbitrary beliefs.
///
/// At each posterior a deviation induces, receivers best respond to the
/// continuation the strategy promises: a commitment for a later period is not
/// observable before that period starts. The strategy's own receiver play is
/// kept where it is such a best response and re-solved (pure) where not.
/// Sender values and the pure commitment (signal per state) achieving them;
/// `None` when following the strategy is best.
type BestCommitment = Rc<(Vec<f64>, Option<Vec<usize>>)>;

struct CommitmentSearch<'a> {
    spec: &'a GameSpec,
    strategy: &'a dyn StrategyProfile,
    outcomes: Outcomes,
    cap: u64,
    follow: HashMap<(usize, Vec<u64>), Rc<Values>>,
    best: HashMap<(usize, Vec<u64>), BestCommitment>,
    post: HashMap<(usize, bool, Vec<u64>), Rc<Values>>,
    tie_tol: f64,
    eps_dev: f64,
    /// Posteriors where the strategy's receivers were replaced by a pure
    /// best response, and where none exists.
    replaced: u64,
    unresolved: u64,
}

fn bits(b: &Belief) -> Vec<u64> {
    b.probs().iter().map(|p| p.to_bits()).collect()
}

impl<'a> CommitmentSearch<'a> {
    fn new(spec: &'a GameSpec, strategy: &'a dyn StrategyProfile, cfg: &OracleConfig) -> Self {
        Self {
            spec,
            strategy,
            outcomes: Outcomes::new(spec),
            cap: cfg.node_cap,
            follow: HashMap::new(),
            best: HashMap::new(),
            post: HashMap::new(),
            tie_tol: cfg.tie_tol,
            eps_dev: cfg.eps_dev,
            replaced: 0,
            unresolved: 0,
        }
    }

    fn grow(&self) -> Result<()> {
        let size = (self.follow.len() + self.best.len() + self.post.len()) as u64;
        if size >= self.cap {
            return Err(Error::TreeTooLarge {
                nodes: size,
                cap: self.cap,
            });
        }
        Ok(())
    }

    fn terminal(&self) -> Values {
        Values {
            sender: vec![0.0; self.spec.n_states],
            receivers: vec![0.0; self.spec.n_receivers],
        }
    }

    /// Values when everyone follows the strategy from pre-signal belief `mu`.
    fn follow(&mut self, t: usize, mu: &Belief) -> Result<Rc<Values>> {
        if t > self.spec.horizon {
            return Ok(Rc::new(self.terminal()));
        }
        let key = (t, bits(mu));
        if let Some(hit) = self.follow.get(&key) {
            return Ok(hit.clone());
        }
        self.grow()?;
        let gamma = self.strategy.sender(t, mu)?;
        let v = Rc::new(self.commit(t, mu, &gamma, false)?);
        self.follow.insert(key, v.clone());
        Ok(v)
    }

    /// Sender's best pure plan from `mu`; `None` as the commitment means the
    /// strategy's own prescription is (weakly) best here.
    fn best(&mut self, t: usize, mu: &Belief) -> Result<BestCommitment> {
        let spec = self.spec;
        if t > spec.horizon {
            return Ok(Rc::new((vec![0.0; spec.n_states], None)));
        }
        let key = (t, bits(mu));
        if let Some(hit) = self.best.get(&key) {
            return Ok(hit.clone());
        }
        self.grow()?;
        let value = |v: &[f64]| -> f64 { (0..spec.n_states).map(|x| mu[x] * v[x]).sum() };
        let own = self.strategy.sender(t, mu)?;
        let mut best = (self.commit(t, mu, &own, true)?.sender, None);
        let mut best_value = value(&best.0);
        let support: Vec<usize> = (0..spec.n_states).filter(|&x| mu[x] > 0.0).collect();
        let ns = spec.n_signals;
        for mut code in 0..ns.pow(support.len() as u32) {
            let mut map = vec![0; spec.n_states];
            for &x in support.iter().rev() {
                map[x] = code % ns;
                code /= ns;
            }
            let v = self
                .commit(t, mu, &SenderPrescription::pure(&map, ns), true)?
                .sender;
            let val = value(&v);
            if val > best_value {
                best_value = val;
                best = (v, Some(map));
            }
        }
        let best = Rc::new(best);
        self.best.insert(key, best.clone());
        Ok(best)
    }

    /// Values of committing to `gamma` at `mu`; with `deviate` the sender
    /// keeps optimizing in later periods.
    fn commit(
        &mut self,
        t: usize,
        mu: &Belief,
        gamma: &SenderPrescription,
        deviate: bool,
    ) -> Result<Values> {
        let spec = self.spec;
        let mut out = self.terminal();
        for (s, &ps) in gamma.signal_probs(mu).iter().enumerate() {
            if ps <= 0.0 {
                continue;
            }
            let nu = update_on_signal(mu, gamma, s, RESET)?;
            let v = self.after_signal(t, &nu, deviate)?;
            for x in 0..spec.n_states {
                if mu[x] > 0.0 {
                    out.sender[x] += gamma.prob(x, s) * v.sender[x];
                }
            }
            for (r, w) in out.receivers.iter_mut().zip(&v.receivers) {
                *r += ps * w;
            }
        }
        Ok(out)
    }

    fn after_signal(&mut self, t: usize, nu: &Belief, deviate: bool) -> Result<Rc<Values>> {
        let spec = self.spec;
        let key = (t, deviate, bits(nu));
        if let Some(hit) = self.post.get(&key) {
            return Ok(hit.clone());
        }
        self.grow()?;
        let n_joint = spec.n_joint_actions();

        // receivers' value of every joint action, continuing with the strategy
        let mut q = vec![vec![0.0; spec.n_receivers]; n_joint];
        let mut next: Vec<Vec<Option<Belief>>> = vec![Vec::new(); n_joint];
        for a in 0..n_joint {
            for (i, v) in q[a].iter_mut().enumerate() {
                *v = (0..spec.n_states)
                    .map(|x| nu[x] * spec.receiver_rewards[i][x][a])
                    .sum();
            }
            let masses = self.outcomes.masses(a, nu);
            next[a] = vec![None; masses.len()];
            if t == spec.horizon {
                continue;
            }
            for (o, &m) in masses.iter().enumerate() {
                if m <= 0.0 {
                    continue;
                }
                let r = self.outcomes.list[a][o].clone();
                let b = update_on_action(nu, a, &r, spec, RESET)?;
                let f = self.follow(t + 1, &b)?;
                for (v, w) in q[a].iter_mut().zip(&f.receivers) {
                    *v += spec.discount * m * w;
                }
                next[a][o] = Some(b);
            }
        }

        let rho = self.strategy.receiver(t, nu)?;
        let mut play: Vec<f64> = (0..n_joint).map(|a| rho.joint_prob(spec, a)).collect();
        let regret = receiver_regret(spec, &rho, &play, &q);
        if regret > self.eps_dev {
            match pure_response(spec, &q, self.tie_tol) {
                Some(a) => {
                    self.replaced += 1;
                    play = (0..n_joint)
                        .map(|b| if b == a { 1.0 } else { 0.0 })
                        .collect();
                }
                None => self.unresolved += 1,
            }
        }

        let mut out = self.terminal();
        for a in (0..n_joint).filter(|&a| play[a] > 0.0) {
            for (r, v) in out.receivers.iter_mut().zip(&q[a]) {
                *r += play[a] * v;
            }
            for x in (0..spec.n_states).filter(|&x| nu[x] > 0.0) {
                let future = match &next[a][self.outcomes.of_state[a][x]] {
                    Some(b) => {
                        let c = if deviate {
                            self.best(t + 1, b)?.0.clone()
                        } else {
                            self.follow(t + 1, b)?.sender.clone()
                        };
                        spec.transition[x][a]
                            .iter()
                            .zip(&c)
                            .map(|(p, v)| p * v)
                            .sum::<f64>()
                    }
                    None => 0.0,
                };
                out.sender[x] += play[a] * (spec.sender_reward[x][a] + spec.discount * future);
            }
        }
        let out = Rc::new(out);
        self.post.insert(key, out.clone());
        Ok(out)
    }
}

/// Largest unilateral gain of any receiver against `play` (the joint
/// distribution of the independent mixtures in `rho`).
fn receiver_regret(
    spec: &GameSpec,
    rho: &ReceiverPrescription,
    play: &[f64],
    q: &[Vec<f64>],
) -> f64 {
    let mut regret: f64 = 0.0;
    for i in 0..spec.n_receivers {
        let value: f64 = play.iter().zip(q).map(|(p, v)| p * v[i]).sum();
        for b in 0..spec.action_counts[i] {
            let mut dev = 0.0;
            for (a, qa) in q.iter().enumerate() {
                let acts = spec.decode_joint(a);
                if acts[i] != b {
                    continue;
                }
                let others: f64 = (0..spec.n_receivers)
                    .filter(|&j| j != i)
                    .map(|j| rho.factor(j)[acts[j]])
                    .product();
                dev += others * qa[i];
            }
            regret = regret.max(dev - value);
        }
    }
    regret
}

/// Lowest-index best action for one receiver; the lexicographically first
/// pure Nash profile for several.
fn pure_response(spec: &GameSpec, q: &[Vec<f64>], tie_tol: f64) -> Option<usize> {
    'profiles: for a in 0..q.len() {
        let acts = spec.decode_joint(a);
        for i in 0..spec.n_receivers {
            let mut alt = acts.clone();
            for b in 0..spec.action_counts[i] {
                alt[i] = b;
                if q[spec.joint_index(&alt)][i] > q[a][i] + tie_tol {
                    continue 'profiles;
                }
            }
        }
        return Some(a);
    }
    None
}

fn commitment_text(map: &Option<Vec<usize>>) -> Vec<String> {
    match map {
        Some(m) => vec![m
            .iter()
            .enumerate()
            .map(|(x, s)| format!("x{x}->s{s}"))
            .collect::<Vec<_>>()
            .join(" ")],
        None => Vec::new(),
    }
}

/// Checks a committed strategy: receivers must best respond exactly, and no
/// plan of pure commitments by the sender from any common history may raise
/// the sender's value there, receivers re-solving their response at every
/// posterior a deviation induces. Reports: sender first, then each receiver.
pub fn check_cpse(
    spec: &GameSpec,
    strategy: &dyn StrategyProfile,
    tables: Option<&ValueTables>,
    cfg: &OracleConfig,
) -> Result<Vec<DeviationReport>> {
    let tree = Tree::build(spec, strategy, cfg.node_cap)?;
    let eq = equilibrium_values(spec, &tree);
    let slack = slack_for(spec, &tree, &eq, strategy, tables, Player::Sender);

    let mut search = CommitmentSearch::new(spec, strategy, cfg);
    let mut candidates = Vec::new();
    let mut maps = Vec::new();
    for (h, node) in tree.pre.iter().enumerate() {
        let best = search.best(node.t, &node.mu)?;
        let value = |v: &[f64]| -> f64 { (0..spec.n_states).map(|x| node.mu[x] * v[x]).sum() };
        maps.push(best.1.clone());
        let reach: f64 = eq.reach_pre[h].iter().sum();
        candidates.push((
            Candidate {
                info_set: node.label.clone(),
                eq: value(&eq.sender_pre[h]),
                dev: value(&best.0),
                t: node.t,
                node: h,
                state: None,
            },
            reach > 0.0,
        ));
    }
    if search.replaced > 0 || search.unresolved > 0 {
        log::warn!(
            "commitment search: strategy receivers re-solved at {} posteriors, {} without a pure best response",
            search.replaced,
            search.unresolved
        );
    }
    let sender = report(Player::Sender, candidates, &slack, cfg, |c| {
        commitment_text(&maps[c.node])
    });
    let mut reports = vec![sender];
    reports.extend(receiver_reports(spec, &tree, &eq, strategy, tables, cfg));
    Ok(reports)
}

/// Bound, per player (sender first), on how far the period-1 tabulated value
/// of the strategy can sit from its exact value: the discounted largest gap
/// between tabulated and exact ex-ante values over period-2 histories.
pub fn continuation_slack(
    spec: &GameSpec,
    strategy: &dyn StrategyProfile,
    tables: &ValueTables,
    cfg: &OracleConfig,
) -> Result<Vec<f64>> {
    let tree = Tree::build(spec, strategy, cfg.node_cap)?;
    let eq = equilibrium_values(spec, &tree);
    let mut gap = vec![0.0f64; spec.n_receivers + 1];
    for (h, node) in tree.pre.iter().enumerate().filter(|(_, n)| n.t == 2) {
        let exact: f64 = (0..spec.n_states)
            .map(|x| node.mu[x] * eq.sender_pre[h][x])
            .sum();
        gap[0] = gap[0].max((tables.sender_ex_ante(2, &node.mu) - exact).abs());
        for i in 0..spec.n_receivers {
            gap[i + 1] =
                gap[i + 1].max((tables.receiver_value(2, i, &node.mu) - eq.recv_pre[h][i]).abs());
        }
    }
    Ok(gap.into_iter().map(|g| spec.discount * g).collect())
}

// ---------------------------------------------------------------------------
// Closed-form oracles

/// Upper concave envelope at the prior for a binary state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concavification {
    pub value: f64,
    /// Posteriors supporting the value; equal to the prior when no split helps.
    pub low: Belief,
    pub high: Belief,
    /// Probability of `low` in the split.
    pub weight_low: f64,
}

/// Concavifies `value` at `prior` over the 1-D grid `k / m` of the first
/// state's probability (plus the prior itself), by searching all pairs of
/// posteriors that straddle the prior.
pub fn concavify(
    prior: &Belief,
    value: impl Fn(&Belief) -> f64,
    m: usize,
) -> Result<Concavification> {
    if prior.len() != 2 {
        return Err(Error::Unsupported(
            "concavification oracle needs exactly two states".into(),
        ));
    }
    let p0 = prior[0];
    let mut points: Vec<f64> = (0..=m).map(|k| k as f64 / m as f64).collect();
    points.push(p0);
    points.sort_by(f64::total_cmp);
    points.dedup();
    let belief = |p: f64| Belief::from_weights(vec![p, 1.0 - p]).expect("point on the simplex");
    let f: Vec<f64> = points.iter().map(|&p| value(&belief(p))).collect();
    let i0 = points
        .iter()
        .position(|&p| p == p0)
        .expect("prior inserted");
    let mut best = Concavification {
        value: f[i0],
        low: prior.clone(),
        high: prior.clone(),
        weight_low: 1.0,
    };
    for (i, &p) in points.iter().enumerate().take(i0 + 1) {
        for (j, &q) in points.iter().enumerate().skip(i0) {
            if q <= p {
                continue;
            }
            let lambda = (q - p0) / (q - p);
            let v = lambda * f[i] + (1.0 - lambda) * f[j];
            if v > best.value + 1e-15 {
                best = Concavification {
                    value: v,
                    low: belief(p),
                    high: belief(q),
                    weight_low: lambda,
                };
            }
        }
    }
    Ok(best)
}

/// Full-information optimum per player (sender first): each player's own
/// reward maximized by dynamic programming on the true state, with the joint
/// receiver action chosen by that player.
pub fn full_info_dp(spec: &GameSpec) -> Vec<f64> {
    spec.players()
        .into_iter()
        .map(|player| {
            let mut v = vec![0.0; spec.n_states];
            for _ in 0..spec.horizon {
                v = (0..spec.n_states)
                    .map(|x| {
                        (0..spec.n_joint_actions())
                            .map(|a| {
                                spec.reward(player, x, a)
                                    + spec.discount
                                        * spec.transition[x][a]
                                            .iter()
                                            .zip(&v)
                                            .map(|(q, w)| q * w)
                                            .sum::<f64>()
                            })
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect();
            }
            spec.initial.iter().zip(&v).map(|(p, w)| p * w).sum()
        })
        .collect()
}
