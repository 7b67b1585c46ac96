//! Per-period equilibrium subproblems.
//!
//! Receiver stages are solved at a post-signal belief `nu`; sender stages at a
//! pre-signal belief `mu`. Sender stages take the receivers' stage policy as a
//! map from beliefs to prescriptions and evaluate it at the exact posteriors a
//! candidate prescription induces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    reward_branches, update_on_action, update_on_signal, Belief, GameSpec, OffSupport, Player,
    ReceiverPrescription, SenderPrescription,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Perfect Bayesian equilibrium: the sender's rows solve a fixed point.
    Pbe,
    /// Common perfect Stackelberg equilibrium: the sender commits.
    Cpse,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Pbe => "pbe",
            Mode::Cpse => "cpse",
        })
    }
}

/// Replace the sender's stage optimization by a fixed prescription.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForcedSender {
    Babbling,
    FullRevelation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Sender fixed-point tolerance.
    pub eps_fp: f64,
    /// Receiver Nash tolerance.
    pub eps_nash: f64,
    /// Values within this of the maximum count as ties; the lowest index wins.
    pub tie_tol: f64,
    /// Resolution `K` of the per-row commitment grid (weights `k / K`).
    pub cpse_grid: usize,
    pub cpse_refine_sweeps: usize,
    pub golden_iters: usize,
    /// Upper bound on enumerated commitment candidates; `K` is lowered to fit.
    pub cpse_max_candidates: usize,
    pub damped_step: f64,
    pub damped_starts: usize,
    pub damped_max_iter: usize,
    pub damped_tol: f64,
    pub fictitious_max_iter: usize,
    pub seed: u64,
    pub off_support: OffSupport,
    pub force_sender: Option<ForcedSender>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps_fp: 1e-6,
            eps_nash: 1e-6,
            tie_tol: 1e-9,
            cpse_grid: 20,
            cpse_refine_sweeps: 3,
            golden_iters: 60,
            cpse_max_candidates: 2_000_000,
            damped_step: 0.5,
            damped_starts: 8,
            damped_max_iter: 500,
            damped_tol: 1e-8,
            fictitious_max_iter: 20_000,
            seed: 0x5eed,
            off_support: OffSupport::UniformReset,
            force_sender: None,
        }
    }
}

/// Next-period value functions, evaluated at arbitrary beliefs.
pub trait Continuation: Sync {
    /// `V^{r,i}_{t+1}(mu)`.
    fn receiver(&self, receiver: usize, mu: &Belief) -> f64;
    /// `V^{s+}_{t+1}(mu, x)` (PBE tables).
    fn sender_interim(&self, mu: &Belief, state: usize) -> f64;
    /// `V^{s+}_{t+1}(mu)` (cPSE tables).
    fn sender_ex_ante(&self, mu: &Belief) -> f64;
    fn is_terminal(&self) -> bool {
        false
    }
}

/// Zero continuation after the last period.
#[derive(Debug, Clone, Copy, Default)]
pub struct Terminal;

impl Continuation for Terminal {
    fn receiver(&self, _: usize, _: &Belief) -> f64 {
        0.0
    }
    fn sender_interim(&self, _: &Belief, _: usize) -> f64 {
        0.0
    }
    fn sender_ex_ante(&self, _: &Belief) -> f64 {
        0.0
    }
    fn is_terminal(&self) -> bool {
        true
    }
}

pub struct StageContext<'a> {
    pub t: usize,
    pub mode: Mode,
    pub belief: &'a Belief,
    pub spec: &'a GameSpec,
    pub continuation: &'a dyn Continuation,
    pub config: &'a SolverConfig,
}

impl<'a> StageContext<'a> {
    pub fn at<'b>(&self, belief: &'b Belief) -> StageContext<'b>
    where
        'a: 'b,
    {
        StageContext {
            t: self.t,
            mode: self.mode,
            belief,
            spec: self.spec,
            continuation: self.continuation,
            config: self.config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageMethod {
    Argmax,
    PureScan,
    SupportEnumeration,
    FictitiousPlay,
    Babbling,
    PureEnumeration,
    DampedIteration,
    GridSearch,
    Forced,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSolution {
    pub sender: Option<SenderPrescription>,
    pub receiver: Option<ReceiverPrescription>,
    /// Receiver stages: `V^{r+,i}(nu)` per receiver. PBE sender stages:
    /// `V^{s+}(mu, x)` per state. cPSE sender stages: `[V^{s+}(mu)]`.
    pub values: Vec<f64>,
    /// Sender stages: `V^{r,i}(mu)` per receiver under the chosen prescription.
    pub receiver_values: Vec<f64>,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub method: StageMethod,
    /// False when a heuristic fallback (fictitious play) produced the result.
    pub exhaustive: bool,
    /// cPSE: whether local refinement improved on the grid optimum.
    pub refined: bool,
}

/// A receiver profile and the receivers' values at the belief it was solved for.
#[derive(Debug, Clone)]
pub struct ReceiverResponse {
    pub prescription: ReceiverPrescription,
    pub values: Vec<f64>,
}

pub type ReceiverMap<'a> = dyn Fn(&Belief) -> Result<ReceiverResponse> + Sync + 'a;

// ---------------------------------------------------------------------------
// Receiver stages

/// `values[a][i]`: receiver i's stage-plus-continuation value of joint action
/// `a` at the context belief.
pub fn joint_action_values(ctx: &StageContext<'_>) -> Vec<Vec<f64>> {
    let spec = ctx.spec;
    let nu = ctx.belief;
    let n = spec.n_receivers;
    let delta = spec.discount;
    (0..spec.n_joint_actions())
        .map(|a| {
            let mut v = vec![0.0; n];
            for x in 0..spec.n_states {
                if nu[x] > 0.0 {
                    for (i, vi) in v.iter_mut().enumerate() {
                        *vi += nu[x] * spec.receiver_rewards[i][x][a];
                    }
                }
            }
            if !ctx.continuation.is_terminal() {
                for branch in reward_branches(spec, nu, a) {
                    for (i, vi) in v.iter_mut().enumerate() {
                        *vi += delta * branch.mass * ctx.continuation.receiver(i, &branch.next);
                    }
                }
            }
            v
        })
        .collect()
}

fn first_maximizer(values: impl Iterator<Item = f64> + Clone, tie_tol: f64) -> (usize, f64) {
    let best = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let idx = values
        .clone()
        .position(|v| v >= best - tie_tol)
        .unwrap_or(0);
    (idx, best)
}

/// Single-receiver stage: deterministic best response, lowest index on ties.
pub fn receiver_stage_best_response(ctx: &StageContext<'_>) -> Result<StageSolution> {
    if ctx.spec.n_receivers != 1 {
        return Err(Error::Unsupported(
            "best response stage needs exactly one receiver".into(),
        ));
    }
    let q = joint_action_values(ctx);
    let (a, _) = first_maximizer(q.iter().map(|v| v[0]), ctx.config.tie_tol);
    let value = q[a][0];
    if !value.is_finite() {
        return Err(Error::NoFixedPointFound(format!(
            "non-finite receiver value at t={}",
            ctx.t
        )));
    }
    Ok(StageSolution {
        sender: None,
        receiver: Some(ReceiverPrescription::pure(&[a], &ctx.spec.action_counts)),
        values: vec![value],
        receiver_values: Vec::new(),
        residual: 0.0,
        converged: true,
        iterations: 1,
        method: StageMethod::Argmax,
        exhaustive: true,
        refined: false,
    })
}

/// Multi-receiver stage: a Bayesian-Nash fixed point of the stage game.
pub fn receiver_stage_nash(ctx: &StageContext<'_>) -> Result<StageSolution> {
    let u = joint_action_values(ctx);
    if u.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NoFixedPointFound(format!(
            "non-finite receiver values at t={}",
            ctx.t
        )));
    }
    let game = NormalForm {
        counts: &ctx.spec.action_counts,
        payoffs: &u,
    };
    let (mix, method, iterations) = game.solve(ctx.config)?;
    let residual = game.residual(&mix);
    let values = game.expected(&mix);
    Ok(StageSolution {
        sender: None,
        receiver: Some(ReceiverPrescription::new(mix)?),
        values,
        receiver_values: Vec::new(),
        residual,
        converged: residual <= ctx.config.eps_nash,
        iterations,
        method,
        exhaustive: method != StageMethod::FictitiousPlay,
        refined: false,
    })
}

/// Dispatches on the number of receivers.
pub fn receiver_stage(ctx: &StageContext<'_>) -> Result<StageSolution> {
    if ctx.spec.n_receivers == 1 {
        receiver_stage_best_response(ctx)
    } else {
        receiver_stage_nash(ctx)
    }
}

/// The receivers' stage policy for period `ctx.t`, solved on demand at any belief.
pub fn receiver_response_map<'a>(
    ctx: &'a StageContext<'a>,
) -> impl Fn(&Belief) -> Result<ReceiverResponse> + Sync + 'a {
    move |nu: &Belief| {
        let sol = receiver_stage(&ctx.at(nu))?;
        Ok(ReceiverResponse {
            prescription: sol.receiver.expect("receiver stage returns a prescription"),
            values: sol.values,
        })
    }
}

/// Finite stage game among the receivers.
pub(crate) struct NormalForm<'a> {
    pub counts: &'a [usize],
    /// `payoffs[joint][player]`.
    pub payoffs: &'a [Vec<f64>],
}

impl NormalForm<'_> {
    fn n_players(&self) -> usize {
        self.counts.len()
    }

    fn decode(&self, mut joint: usize) -> Vec<usize> {
        let mut out = vec![0; self.counts.len()];
        for (slot, &n) in out.iter_mut().zip(self.counts).rev() {
            *slot = joint % n;
            joint /= n;
        }
        out
    }

    fn encode(&self, actions: &[usize]) -> usize {
        actions
            .iter()
            .zip(self.counts)
            .fold(0, |acc, (&a, &n)| acc * n + a)
    }

    /// Expected payoff of every player under a mixed profile.
    pub fn expected(&self, mix: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_players()];
        for (joint, u) in self.payoffs.iter().enumerate() {
            let p: f64 = self
                .decode(joint)
                .iter()
                .zip(mix)
                .map(|(&a, m)| m[a])
                .product();
            if p > 0.0 {
                for (o, v) in out.iter_mut().zip(u) {
                    *o += p * v;
                }
            }
        }
        out
    }

    /// Payoff of each pure action of `player` against the others' mixtures.
    pub fn deviation_values(&self, mix: &[Vec<f64>], player: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.counts[player]];
        for (joint, u) in self.payoffs.iter().enumerate() {
            let acts = self.decode(joint);
            let p: f64 = acts
                .iter()
                .zip(mix)
                .enumerate()
                .filter(|(j, _)| *j != player)
                .map(|(_, (&a, m))| m[a])
                .product();
            out[acts[player]] += p * u[player];
        }
        out
    }

    /// Largest gain any player gets from a pure unilateral deviation.
    pub fn residual(&self, mix: &[Vec<f64>]) -> f64 {
        let eq = self.expected(mix);
        (0..self.n_players())
            .map(|i| {
                let best = self
                    .deviation_values(mix, i)
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max);
                (best - eq[i]).max(0.0)
            })
            .fold(0.0, f64::max)
    }

    fn pure_mix(&self, actions: &[usize]) -> Vec<Vec<f64>> {
        actions
            .iter()
            .zip(self.counts)
            .map(|(&a, &n)| {
                let mut m = vec![0.0; n];
                m[a] = 1.0;
                m
            })
            .collect()
    }

    /// Lexicographically first pure Nash profile.
    pub fn first_pure_nash(&self, eps: f64) -> Option<Vec<usize>> {
        'profiles: for joint in 0..self.payoffs.len() {
            let acts = self.decode(joint);
            for i in 0..self.n_players() {
                let here = self.payoffs[joint][i];
                let mut alt = acts.clone();
                for b in 0..self.counts[i] {
                    alt[i] = b;
                    if self.payoffs[self.encode(&alt)][i] - here > eps {
                        continue 'profiles;
                    }
                }
            }
            return Some(acts);
        }
        None
    }

    /// Equal-size support enumeration for two players.
    pub fn support_enumeration(&self, eps: f64) -> Option<Vec<Vec<f64>>> {
        if self.n_players() != 2 {
            return None;
        }
        let (n0, n1) = (self.counts[0], self.counts[1]);
        let a = |i: usize, j: usize| self.payoffs[i * n1 + j][0];
        let b = |i: usize, j: usize| self.payoffs[i * n1 + j][1];
        for k in 1..=n0.min(n1) {
            for rows in subsets(n0, k) {
                for cols in subsets(n1, k) {
                    // y on cols makes player 0 indifferent across rows
                    let y = indifference(k, |r, c| a(rows[r], cols[c]));
                    // x on rows makes player 1 indifferent across cols
                    let x = indifference(k, |r, c| b(rows[c], cols[r]));
                    let (Some(y), Some(x)) = (y, x) else { continue };
                    let mut mix = vec![vec![0.0; n0], vec![0.0; n1]];
                    for (r, &i) in rows.iter().enumerate() {
                        mix[0][i] = x[r];
                    }
                    for (c, &j) in cols.iter().enumerate() {
                        mix[1][j] = y[c];
                    }
                    if self.residual(&mix) <= eps {
                        return Some(mix);
                    }
                }
            }
        }
        None
    }

    /// Damped fictitious play from the uniform profile.
    pub fn fictitious_play(
        &self,
        eps: f64,
        max_iter: usize,
        tie_tol: f64,
    ) -> (Vec<Vec<f64>>, usize) {
        let mut mix: Vec<Vec<f64>> = self
            .counts
            .iter()
            .map(|&n| vec![1.0 / n as f64; n])
            .collect();
        for k in 1..=max_iter {
            if self.residual(&mix) <= eps {
                return (mix, k);
            }
            let responses: Vec<usize> = (0..self.n_players())
                .map(|i| {
                    let dv = self.deviation_values(&mix, i);
                    first_maximizer(dv.iter().copied(), tie_tol).0
                })
                .collect();
            let step = 1.0 / (k as f64 + 1.0);
            for (m, &r) in mix.iter_mut().zip(&responses) {
                for (a, w) in m.iter_mut().enumerate() {
                    let target = if a == r { 1.0 } else { 0.0 };
                    *w += step * (target - *w);
                }
            }
        }
        (mix, max_iter)
    }

    pub fn solve(&self, cfg: &SolverConfig) -> Result<(Vec<Vec<f64>>, StageMethod, usize)> {
        if let Some(acts) = self.first_pure_nash(cfg.eps_nash) {
            return Ok((
                self.pure_mix(&acts),
                StageMethod::PureScan,
                self.payoffs.len(),
            ));
        }
        if self.n_players() == 2 && self.counts.iter().all(|&n| n <= 3) {
            if let Some(mix) = self.support_enumeration(cfg.eps_nash) {
                return Ok((mix, StageMethod::SupportEnumeration, 1));
            }
        }
        let (mix, iters) = self.fictitious_play(cfg.eps_nash, cfg.fictitious_max_iter, cfg.tie_tol);
        if self.residual(&mix) <= cfg.eps_nash {
            return Ok((mix, StageMethod::FictitiousPlay, iters));
        }
        Err(Error::NoFixedPointFound(format!(
            "receiver stage game: no pure profile, support enumeration and fictitious play failed (residual {:.3e})",
            self.residual(&mix)
        )))
    }
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Mixture `p` over `k` columns with `sum_c m(r, c) p_c` equal for every row `r`.
fn indifference(k: usize, m: impl Fn(usize, usize) -> f64) -> Option<Vec<f64>> {
    // unknowns p_0..p_{k-1}, v
    let mut a = vec![vec![0.0; k + 1]; k + 1];
    let mut rhs = vec![0.0; k + 1];
    for r in 0..k {
        for c in 0..k {
            a[r][c] = m(r, c);
        }
        a[r][k] = -1.0;
    }
    for c in 0..k {
        a[k][c] = 1.0;
    }
    rhs[k] = 1.0;
    let sol = solve_linear(a, rhs)?;
    let p: Vec<f64> = sol[..k].to_vec();
    if p.iter().any(|&v| v < -1e-12) {
        return None;
    }
    let clipped: Vec<f64> = p.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    Some(clipped.iter().map(|v| v / total).collect())
}

/// Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

// ---------------------------------------------------------------------------
// Sender stages

/// Per-state values of a candidate PBE sender prescription.
#[derive(Debug, Clone)]
pub struct PbeEvaluation {
    /// `signal_values[x][s]`: value to the sender in state x of sending s,
    /// with receivers' beliefs formed from the candidate.
    pub signal_values: Vec<Vec<f64>>,
    /// Value of each state's row under the candidate itself.
    pub row_values: Vec<f64>,
    /// Largest gain of a pure-signal deviation over all states.
    pub residual: f64,
    pub receiver_values: Vec<f64>,
}

impl PbeEvaluation {
    pub fn ex_ante(&self, mu: &Belief) -> f64 {
        self.row_values
            .iter()
            .enumerate()
            .map(|(x, v)| mu[x] * v)
            .sum()
    }
}

/// Evaluates the per-state deviation inequality for `candidate`, holding the
/// belief update fixed at `candidate`.
pub fn evaluate_sender_pbe(
    ctx: &StageContext<'_>,
    candidate: &SenderPrescription,
    receivers: &ReceiverMap<'_>,
) -> Result<PbeEvaluation> {
    let spec = ctx.spec;
    let mu = ctx.belief;
    let policy = ctx.config.off_support;
    let delta = spec.discount;
    let (nx, ns) = (spec.n_states, spec.n_signals);
    let probs = candidate.signal_probs(mu);
    let mut signal_values = vec![vec![0.0; ns]; nx];
    let mut receiver_values = vec![0.0; spec.n_receivers];
    for s in 0..ns {
        let nu = update_on_signal(mu, candidate, s, policy)?;
        let resp = receivers(&nu)?;
        if probs[s] > 0.0 {
            for (rv, v) in receiver_values.iter_mut().zip(&resp.values) {
                *rv += probs[s] * v;
            }
        }
        let joint = resp.prescription.joint_distribution(spec);
        for (x, row) in signal_values.iter_mut().enumerate() {
            let mut total = 0.0;
            for (a, &pa) in joint.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let mut v = spec.sender_reward[x][a];
                if !ctx.continuation.is_terminal() {
                    let r = spec.receiver_reward_vector(x, a);
                    let next = update_on_action(&nu, a, &r, spec, policy)?;
                    let cont: f64 = spec.transition[x][a]
                        .iter()
                        .enumerate()
                        .map(|(xn, q)| q * ctx.continuation.sender_interim(&next, xn))
                        .sum();
                    v += delta * cont;
                }
                total += pa * v;
            }
            row[s] = total;
        }
    }
    let row_values: Vec<f64> = (0..nx)
        .map(|x| {
            (0..ns)
                .map(|s| candidate.prob(x, s) * signal_values[x][s])
                .sum()
        })
        .collect();
    let residual = (0..nx)
        .map(|x| {
            let best = signal_values[x]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            (best - row_values[x]).max(0.0)
        })
        .fold(0.0, f64::max);
    if signal_values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NoFixedPointFound("non-finite sender values".into()));
    }
    Ok(PbeEvaluation {
        signal_values,
        row_values,
        residual,
        receiver_values,
    })
}

/// Iterates over all `|S|^|X|` pure prescriptions in lexicographic order
/// (state 0 most significant).
fn pure_prescriptions(nx: usize, ns: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = (ns as u64).checked_pow(nx as u32).unwrap_or(u64::MAX);
    (0..total).map(move |mut k| {
        let mut sig = vec![0; nx];
        for slot in sig.iter_mut().rev() {
            *slot = (k % ns as u64) as usize;
            k /= ns as u64;
        }
        sig
    })
}

fn forced_prescription(spec: &GameSpec, forced: ForcedSender) -> Result<SenderPrescription> {
    match forced {
        ForcedSender::Babbling => Ok(SenderPrescription::babbling(spec.n_states, spec.n_signals)),
        ForcedSender::FullRevelation => {
            SenderPrescription::revealing(spec.n_states, spec.n_signals)
                .ok_or_else(|| Error::Unsupported("full revelation needs |S| >= |X|".into()))
        }
    }
}

/// Seed derived from the configured seed, the period and the belief.
fn stage_seed(seed: u64, t: usize, b: &Belief) -> u64 {
    let mut h = seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for p in b.probs() {
        h ^= p.to_bits();
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const TOTAL_PURE_CAP: u64 = 1 << 20;

/// PBE sender stage: finds `gamma` whose every row is a best response when
/// the receivers form beliefs from `gamma` itself.
///
/// Candidates are the uniform babbling prescription (always a fixed point),
/// every pure prescription, and, when no pure prescription qualifies, the
/// limits of damped best-response iteration from random starts. Among the
/// fixed points the sender-preferred one (highest ex-ante value) is chosen;
/// near-ties go to babbling, then pure prescriptions in lexicographic order.
pub fn sender_stage_pbe(
    ctx: &StageContext<'_>,
    receivers: &ReceiverMap<'_>,
) -> Result<StageSolution> {
    let spec = ctx.spec;
    let cfg = ctx.config;
    let mu = ctx.belief;
    let (nx, ns) = (spec.n_states, spec.n_signals);

    if let Some(forced) = cfg.force_sender {
        let g = forced_prescription(spec, forced)?;
        let ev = evaluate_sender_pbe(ctx, &g, receivers)?;
        return Ok(pbe_solution(g, ev, cfg, 1, StageMethod::Forced));
    }

    let mut evaluations = 0usize;
    let mut best: Option<(SenderPrescription, PbeEvaluation, StageMethod)> = None;
    let mut consider = |g: SenderPrescription, ev: PbeEvaluation, method: StageMethod| {
        if ev.residual > cfg.eps_fp {
            return false;
        }
        let better = match &best {
            None => true,
            Some((_, b, _)) => ev.ex_ante(mu) > b.ex_ante(mu) + cfg.tie_tol,
        };
        if better {
            best = Some((g, ev, method));
        }
        true
    };

    let babble = SenderPrescription::babbling(nx, ns);
    if let Ok(ev) = evaluate_sender_pbe(ctx, &babble, receivers) {
        evaluations += 1;
        consider(babble, ev, StageMethod::Babbling);
    }

    let mut pure_found = false;
    if (ns as u64)
        .checked_pow(nx as u32)
        .is_some_and(|n| n <= TOTAL_PURE_CAP)
    {
        for sig in pure_prescriptions(nx, ns) {
            let g = SenderPrescription::pure(&sig, ns);
            evaluations += 1;
            match evaluate_sender_pbe(ctx, &g, receivers) {
                Ok(ev) => pure_found |= consider(g, ev, StageMethod::PureEnumeration),
                Err(Error::ZeroProbabilitySignal { .. } | Error::InconsistentReward { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }

    if !pure_found && ns > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, ctx.t, mu));
        for _ in 0..cfg.damped_starts {
            let start: Vec<Vec<f64>> = (0..nx)
                .map(|_| {
                    let w: Vec<f64> = (0..ns).map(|_| rng.gen::<f64>() + 1e-3).collect();
                    let z: f64 = w.iter().sum();
                    w.into_iter().map(|v| v / z).collect()
                })
                .collect();
            let (g, iters) = damped_iteration(ctx, start, receivers)?;
            evaluations += iters;
            if let Some(g) = g {
                if let Ok(ev) = evaluate_sender_pbe(ctx, &g, receivers) {
                    consider(g, ev, StageMethod::DampedIteration);
                }
            }
        }
    }

    match best {
        Some((g, ev, method)) => Ok(pbe_solution(g, ev, cfg, evaluations, method)),
        None => Err(Error::NoFixedPointFound(format!(
            "sender stage at t={}: no candidate passed the deviation test",
            ctx.t
        ))),
    }
}

fn pbe_solution(
    g: SenderPrescription,
    ev: PbeEvaluation,
    cfg: &SolverConfig,
    iterations: usize,
    method: StageMethod,
) -> StageSolution {
    StageSolution {
        sender: Some(g),
        receiver: None,
        values: ev.row_values,
        receiver_values: ev.receiver_values,
        residual: ev.residual,
        converged: ev.residual <= cfg.eps_fp,
        iterations,
        method,
        exhaustive: true,
        refined: false,
    }
}

/// Damped best-response iteration on mixed prescriptions. Returns the limit
/// when the update falls below the configured tolerance.
fn damped_iteration(
    ctx: &StageContext<'_>,
    start: Vec<Vec<f64>>,
    receivers: &ReceiverMap<'_>,
) -> Result<(Option<SenderPrescription>, usize)> {
    let cfg = ctx.config;
    let mut rows = start;
    for iter in 1..=cfg.damped_max_iter {
        let g = SenderPrescription::new(rows.clone())?;
        let ev = match evaluate_sender_pbe(ctx, &g, receivers) {
            Ok(ev) => ev,
            Err(Error::ZeroProbabilitySignal { .. } | Error::InconsistentReward { .. }) => {
                return Ok((None, iter))
            }
            Err(e) => return Err(e),
        };
        let mut change: f64 = 0.0;
        for (x, row) in rows.iter_mut().enumerate() {
            let (br, _) = first_maximizer(ev.signal_values[x].iter().copied(), cfg.tie_tol);
            for (s, w) in row.iter_mut().enumerate() {
                let target = if s == br { 1.0 } else { 0.0 };
                let next = (1.0 - cfg.damped_step) * *w + cfg.damped_step * target;
                change = change.max((next - *w).abs());
                *w = next;
            }
        }
        if change <= cfg.damped_tol {
            return Ok((Some(SenderPrescription::new(rows)?), iter));
        }
    }
    Ok((None, cfg.damped_max_iter))
}

/// Ex-ante value of a committed sender prescription.
#[derive(Debug, Clone)]
pub struct CpseEvaluation {
    pub value: f64,
    pub receiver_values: Vec<f64>,
}

/// Sender's ex-ante stage-plus-continuation value when the receivers respond
/// to the beliefs `gamma` itself induces.
pub fn evaluate_sender_cpse(
    ctx: &StageContext<'_>,
    gamma: &SenderPrescription,
    receivers: &ReceiverMap<'_>,
) -> Result<CpseEvaluation> {
    let spec = ctx.spec;
    let mu = ctx.belief;
    let delta = spec.discount;
    let probs = gamma.signal_probs(mu);
    let mut value = 0.0;
    let mut receiver_values = vec![0.0; spec.n_receivers];
    for (s, &ps) in probs.iter().enumerate() {
        if ps <= 0.0 {
            continue;
        }
        let nu = update_on_signal(mu, gamma, s, OffSupport::Reject)?;
        let resp = receivers(&nu)?;
        for (rv, v) in receiver_values.iter_mut().zip(&resp.values) {
            *rv += ps * v;
        }
        let joint = resp.prescription.joint_distribution(spec);
        for (a, &pa) in joint.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for x in 0..spec.n_states {
                value += mu[x] * gamma.prob(x, s) * pa * spec.sender_reward[x][a];
            }
            if !ctx.continuation.is_terminal() {
                for branch in reward_branches(spec, &nu, a) {
                    value += delta
                        * ps
                        * pa
                        * branch.mass
                        * ctx.continuation.sender_ex_ante(&branch.next);
                }
            }
        }
    }
    if !value.is_finite() {
        return Err(Error::NoFixedPointFound("non-finite sender value".into()));
    }
    Ok(CpseEvaluation {
        value,
        receiver_values,
    })
}

fn row_compositions(k: usize, parts: usize) -> Vec<Vec<f64>> {
    fn rec(rem: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            cur.push(rem);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for v in (0..=rem).rev() {
            cur.push(v);
            rec(rem - v, parts - 1, cur, out);
            cur.pop();
        }
    }
    let mut raw = Vec::new();
    rec(k, parts, &mut Vec::new(), &mut raw);
    raw.into_iter()
        .map(|c| c.into_iter().map(|v| v as f64 / k as f64).collect())
        .collect()
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn golden_max(
    lo: f64,
    hi: f64,
    iters: usize,
    mut f: impl FnMut(f64) -> Option<f64>,
) -> Option<(f64, f64)> {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut best: Option<(f64, f64)> = None;
    let note = |x: f64, v: Option<f64>, best: &mut Option<(f64, f64)>| {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| v > b) {
                *best = Some((x, v));
            }
        }
        v.unwrap_or(f64::NEG_INFINITY)
    };
    let (mut a, mut b) = (lo, hi);
    note(a, f(a), &mut best);
    note(b, f(b), &mut best);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = note(c, f(c), &mut best);
    let mut fd = note(d, f(d), &mut best);
    for _ in 0..iters {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = note(c, f(c), &mut best);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = note(d, f(d), &mut best);
        }
    }
    best
}

/// cPSE sender stage: maximizes the committed prescription's ex-ante value.
///
/// Each row is searched on the weight grid `k / K`, babbling first, then the
/// best grid point is polished coordinatewise by golden-section search on
/// each free weight (the last signal absorbs the difference).
pub fn sender_stage_cpse(
    ctx: &StageContext<'_>,
    receivers: &ReceiverMap<'_>,
) -> Result<StageSolution> {
    let spec = ctx.spec;
    let cfg = ctx.config;
    let (nx, ns) = (spec.n_states, spec.n_signals);

    let finish =
        |g: SenderPrescription, ev: CpseEvaluation, iterations, method, refined| StageSolution {
            sender: Some(g),
            receiver: None,
            values: vec![ev.value],
            receiver_values: ev.receiver_values,
            residual: 0.0,
            converged: true,
            iterations,
            method,
            exhaustive: true,
            refined,
        };

    if let Some(forced) = cfg.force_sender {
        let g = forced_prescription(spec, forced)?;
        let ev = evaluate_sender_cpse(ctx, &g, receivers)?;
        return Ok(finish(g, ev, 1, StageMethod::Forced, false));
    }

    let babble = SenderPrescription::babbling(nx, ns);
    let mut evaluations = 1usize;
    let mut first_err = None;
    let mut best: Option<(Vec<Vec<f64>>, CpseEvaluation)> =
        match evaluate_sender_cpse(ctx, &babble, receivers) {
            Ok(ev) => Some((babble.rows().to_vec(), ev)),
            Err(e) => {
                first_err = Some(e);
                None
            }
        };
    if ns == 1 {
        return match best {
            Some((rows, ev)) => Ok(finish(
                SenderPrescription::new(rows)?,
                ev,
                1,
                StageMethod::Babbling,
                false,
            )),
            None => {
                Err(first_err.unwrap_or_else(|| Error::NoFixedPointFound("babbling failed".into())))
            }
        };
    }

    let mut k = cfg.cpse_grid.max(1);
    while k > 1
        && binomial(k + ns - 1, ns - 1).saturating_pow(nx as u32) > cfg.cpse_max_candidates as u128
    {
        k -= 1;
    }
    let row_options = row_compositions(k, ns);
    let m = row_options.len();
    let total = m.pow(nx as u32);
    let mut method = StageMethod::Babbling;
    for code in 0..total {
        let mut c = code;
        let mut rows = vec![Vec::new(); nx];
        for row in rows.iter_mut().rev() {
            *row = row_options[c % m].clone();
            c /= m;
        }
        let g = SenderPrescription::new(rows.clone())?;
        evaluations += 1;
        match evaluate_sender_cpse(ctx, &g, receivers) {
            Ok(ev) => {
                if best
                    .as_ref()
                    .is_none_or(|(_, b)| ev.value > b.value + cfg.tie_tol)
                {
                    best = Some((rows, ev));
                    method = StageMethod::GridSearch;
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((mut rows, mut ev)) = best else {
        return Err(
            first_err.unwrap_or_else(|| Error::NoFixedPointFound("no commitment evaluated".into()))
        );
    };

    let h = 1.0 / k as f64;
    let last = ns - 1;
    let mut refined = false;
    for _ in 0..cfg.cpse_refine_sweeps {
        let mut improved = false;
        for x in 0..nx {
            for s in 0..last {
                let pool = rows[x][s] + rows[x][last];
                let lo = (rows[x][s] - h).max(0.0);
                let hi = (rows[x][s] + h).min(pool);
                if hi - lo <= 1e-15 {
                    continue;
                }
                let base = rows.clone();
                let found = golden_max(lo, hi, cfg.golden_iters, |w| {
                    let mut trial = base.clone();
                    trial[x][s] = w;
                    trial[x][last] = (pool - w).max(0.0);
                    evaluations += 1;
                    SenderPrescription::new(trial)
                        .ok()
                        .and_then(|g| evaluate_sender_cpse(ctx, &g, receivers).ok())
                        .map(|e| e.value)
                });
                if let Some((w, v)) = found {
                    if v > ev.value + 1e-15 {
                        rows[x][s] = w;
                        rows[x][last] = (pool - w).max(0.0);
                        let g = SenderPrescription::new(rows.clone())?;
                        ev = evaluate_sender_cpse(ctx, &g, receivers)?;
                        improved = true;
                        refined = true;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(finish(
        SenderPrescription::new(rows)?,
        ev,
        evaluations,
        method,
        refined,
    ))
}

/// Dispatches on the mode.
pub fn sender_stage(ctx: &StageContext<'_>, receivers: &ReceiverMap<'_>) -> Result<StageSolution> {
    match ctx.mode {
        Mode::Pbe => sender_stage_pbe(ctx, receivers),
        Mode::Cpse => sender_stage_cpse(ctx, receivers),
    }
}

/// Value of `player` for taking pure joint action `joint` at the context
/// belief (stage reward plus continuation), used by tests and diagnostics.
pub fn receiver_action_value(ctx: &StageContext<'_>, player: Player, joint: usize) -> f64 {
    let Player::Receiver(i) = player else {
        return f64::NAN;
    };
    joint_action_values(ctx)[joint][i]
}
