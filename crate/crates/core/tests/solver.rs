//! Properties of the tabulated equilibria, recomputed from the stored
//! prescriptions without going through the stage solvers.

mod common;

use common::*;
use infodesign::stage::{
    evaluate_sender_cpse, receiver_response_map, sender_stage_cpse, StageContext,
};
use infodesign::{
    full_info_dp, solve, update_on_signal, Belief, BeliefGrid, ForcedSender, GameSpec,
    Interpolation, Lookup, Mode, OffSupport, Player, SenderPrescription, Solution, SolvedStrategy,
    SolverConfig, StrategyProfile, ValueTables,
};

const RESET: OffSupport = OffSupport::UniformReset;

fn solved(spec: &GameSpec, mode: Mode, m: usize, config: &SolverConfig) -> Solution {
    let grid = BeliefGrid::new(spec.n_states, m, Interpolation::SimplexLinear).unwrap();
    let sol = solve(spec, mode, &grid, config).unwrap();
    assert!(!sol.policy.is_partial(), "{:?}", sol.policy.failures());
    sol
}

/// Observation groups of joint action `a` under `nu`: (states producing it,
/// mass, next belief).
fn groups(spec: &GameSpec, nu: &Belief, a: usize) -> Vec<(Vec<usize>, f64, Belief)> {
    let mut out: Vec<(Vec<usize>, f64, Vec<f64>)> = Vec::new();
    for x in (0..spec.n_states).filter(|&x| nu[x] > 0.0) {
        let r = spec.receiver_reward_vector(x, a);
        let k = match out
            .iter()
            .position(|(xs, _, _)| spec.rewards_match(xs[0], a, &r))
        {
            Some(k) => k,
            None => {
                out.push((Vec::new(), 0.0, vec![0.0; spec.n_states]));
                out.len() - 1
            }
        };
        out[k].0.push(x);
        out[k].1 += nu[x];
        for (w, q) in out[k].2.iter_mut().zip(&spec.transition[x][a]) {
            *w += nu[x] * q;
        }
    }
    out.into_iter()
        .map(|(xs, m, w)| (xs, m, Belief::from_weights(w).unwrap()))
        .collect()
}

/// Receivers' values at post-signal belief `nu` under the strategy's play.
fn receiver_post(
    spec: &GameSpec,
    tables: &ValueTables,
    strat: &dyn StrategyProfile,
    t: usize,
    nu: &Belief,
) -> Vec<f64> {
    let rho = strat.receiver(t, nu).unwrap();
    (0..spec.n_receivers)
        .map(|i| {
            (0..spec.n_joint_actions())
                .map(|a| {
                    let stage: f64 = (0..spec.n_states)
                        .map(|x| nu[x] * spec.receiver_rewards[i][x][a])
                        .sum();
                    let cont: f64 = groups(spec, nu, a)
                        .iter()
                        .map(|(_, m, next)| m * tables.receiver_value(t + 1, i, next))
                        .sum();
                    rho.joint_prob(spec, a) * (stage + spec.discount * cont)
                })
                .sum()
        })
        .collect()
}

/// Sender value per state at pre-signal belief `mu` (PBE tables) or ex-ante
/// in slot 0 (cPSE tables), plus the receivers' values.
fn recompute(
    spec: &GameSpec,
    tables: &ValueTables,
    strat: &dyn StrategyProfile,
    t: usize,
    mu: &Belief,
) -> (Vec<f64>, Vec<f64>) {
    let gamma = strat.sender(t, mu).unwrap();
    let probs = gamma.signal_probs(mu);
    let mut sender = vec![0.0; spec.n_states];
    let mut receivers = vec![0.0; spec.n_receivers];
    for s in (0..spec.n_signals).filter(|&s| probs[s] > 0.0) {
        let nu = update_on_signal(mu, &gamma, s, RESET).unwrap();
        let rho = strat.receiver(t, &nu).unwrap();
        for (r, v) in receivers
            .iter_mut()
            .zip(receiver_post(spec, tables, strat, t, &nu))
        {
            *r += probs[s] * v;
        }
        for a in 0..spec.n_joint_actions() {
            let pa = rho.joint_prob(spec, a);
            if pa == 0.0 {
                continue;
            }
            for (xs, m, next) in groups(spec, &nu, a) {
                match tables.mode() {
                    Mode::Pbe => {
                        for &x in &xs {
                            let cont: f64 = (0..spec.n_states)
                                .map(|y| {
                                    spec.transition[x][a][y]
                                        * tables.sender_interim(t + 1, &next, y)
                                })
                                .sum();
                            sender[x] += gamma.prob(x, s)
                                * pa
                                * (spec.sender_reward[x][a] + spec.discount * cont);
                        }
                    }
                    Mode::Cpse => {
                        let stage: f64 = xs.iter().map(|&x| nu[x] * spec.sender_reward[x][a]).sum();
                        sender[0] += probs[s]
                            * pa
                            * (stage + spec.discount * m * tables.sender_ex_ante(t + 1, &next));
                    }
                }
            }
        }
    }
    (sender, receivers)
}

#[test]
fn stored_values_satisfy_the_recursion() {
    let config = SolverConfig::default();
    for name in CORPUS {
        let spec = corpus(name);
        for mode in [Mode::Pbe, Mode::Cpse] {
            let sol = solved(&spec, mode, 20, &config);
            let strat = SolvedStrategy::new(
                &spec,
                &sol.policy,
                &sol.tables,
                config.clone(),
                Lookup::Resolve,
            );
            let grid = sol.tables.grid();
            let mut worst: f64 = 0.0;
            for t in 1..=spec.horizon {
                for p in 0..grid.len() {
                    let b = grid.belief(p);
                    let (sender, receivers) = recompute(&spec, &sol.tables, &strat, t, &b);
                    let stored = sol.tables.sender_entry(t, p);
                    for (k, v) in stored.iter().enumerate() {
                        if mode == Mode::Pbe && b[k] == 0.0 {
                            continue;
                        }
                        worst = worst.max((v - sender[k]).abs());
                    }
                    for (v, w) in sol.tables.receiver_entry(t, p).iter().zip(&receivers) {
                        worst = worst.max((v - w).abs());
                    }
                    let post = receiver_post(&spec, &sol.tables, &strat, t, &b);
                    for (v, w) in sol.tables.receiver_post_entry(t, p).iter().zip(&post) {
                        worst = worst.max((v - w).abs());
                    }
                }
            }
            assert!(worst <= 1e-9, "{name} {mode}: recursion gap {worst:e}");
        }
    }
}

#[test]
fn table_entries_are_bounded_by_the_reward_range() {
    let config = SolverConfig::default();
    for name in CORPUS {
        let spec = corpus(name);
        for mode in [Mode::Pbe, Mode::Cpse] {
            let sol = solved(&spec, mode, 10, &config);
            for t in 1..=spec.horizon {
                let periods: f64 = (0..=spec.horizon - t)
                    .map(|k| spec.discount.powi(k as i32))
                    .sum();
                for p in 0..sol.tables.grid().len() {
                    let check = |player: Player, v: f64| {
                        let (lo, hi) = spec.reward_range(player);
                        let tol = 1e-9;
                        assert!(
                            v >= periods * lo - tol && v <= periods * hi + tol,
                            "{name} {mode} t={t}: {v}"
                        );
                        let loose = spec.horizon as f64;
                        assert!(v >= loose * lo.min(0.0) - tol && v <= loose * hi.max(0.0) + tol);
                    };
                    for &v in sol.tables.sender_entry(t, p) {
                        check(Player::Sender, v);
                    }
                    for (i, &v) in sol.tables.receiver_entry(t, p).iter().enumerate() {
                        check(Player::Receiver(i), v);
                    }
                }
            }
        }
    }
}

#[test]
fn forced_revelation_with_aligned_rewards_matches_full_information() {
    let spec = corpus("aligned");
    assert_eq!(
        spec.sender_reward, spec.receiver_rewards[0],
        "instance must have aligned rewards"
    );
    let config = SolverConfig {
        force_sender: Some(ForcedSender::FullRevelation),
        ..SolverConfig::default()
    };
    let sol = solved(&spec, Mode::Cpse, 20, &config);
    let prior = spec.initial_belief().unwrap();
    let target = full_info_dp(&spec)[0];
    let value = sol.tables.sender_ex_ante(1, &prior);
    assert!((value - target).abs() <= 1e-9, "{value} vs {target}");
}

fn prior_values(spec: &GameSpec, mode: Mode) -> Vec<f64> {
    let prior = spec.initial_belief().unwrap();
    [10, 20, 40, 80]
        .iter()
        .map(|&m| {
            solved(spec, mode, m, &SolverConfig::default())
                .tables
                .sender_ex_ante(1, &prior)
        })
        .collect()
}

/// Persuasion variant with an off-grid prior, transition rows and receiver
/// threshold, where acquittal reveals nothing about the state.
fn off_grid() -> GameSpec {
    let mut spec = corpus("persuasion");
    spec.initial = vec![0.69, 0.31];
    spec.transition = vec![vec![vec![0.83, 0.17]; 2], vec![vec![0.29, 0.71]; 2]];
    spec.receiver_rewards = vec![vec![vec![0.0, 0.37], vec![1.0, 0.37]]];
    spec.horizon = 3;
    spec
}

#[test]
fn refinement_changes_shrink() {
    let mut specs: Vec<(String, GameSpec)> =
        ["judge", "aligned", "conflict", "persuasion", "invest"]
            .iter()
            .map(|n| (n.to_string(), corpus(n)))
            .collect();
    specs.push(("off-grid".into(), off_grid()));
    for (name, spec) in specs {
        for mode in [Mode::Pbe, Mode::Cpse] {
            let v = prior_values(&spec, mode);
            let d: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
            println!("{name} {mode}: values {v:?}, changes {d:?}");
            assert!(
                d[2] <= d[0] + 1e-9,
                "{name} {mode}: changes {d:?} do not shrink"
            );
        }
    }
}

#[test]
fn commitment_dominates_babbling_and_revelation() {
    let config = SolverConfig::default();
    for name in CORPUS {
        let spec = corpus(name);
        let sol = solved(&spec, Mode::Cpse, 10, &config);
        for t in 1..=spec.horizon {
            let cont = sol.tables.continuation(t + 1);
            for b in sol.tables.grid().beliefs() {
                let ctx = StageContext {
                    t,
                    mode: Mode::Cpse,
                    belief: &b,
                    spec: &spec,
                    continuation: &cont,
                    config: &config,
                };
                let map = receiver_response_map(&ctx);
                let best = sender_stage_cpse(&ctx, &map).unwrap().values[0];
                let babbling = SenderPrescription::babbling(spec.n_states, spec.n_signals);
                let revealing =
                    SenderPrescription::revealing(spec.n_states, spec.n_signals).unwrap();
                for gamma in [babbling, revealing] {
                    let v = evaluate_sender_cpse(&ctx, &gamma, &map).unwrap().value;
                    assert!(best >= v - 1e-9, "{name} t={t} {b:?}: {best} < {v}");
                }
            }
        }
    }
}

#[test]
fn commitment_value_ignores_signal_labels() {
    let config = SolverConfig::default();
    for name in CORPUS {
        let spec = corpus(name);
        let sol = solved(&spec, Mode::Cpse, 10, &config);
        let cont = sol.tables.continuation(2);
        for b in sol.tables.grid().beliefs() {
            let ctx = StageContext {
                t: 1,
                mode: Mode::Cpse,
                belief: &b,
                spec: &spec,
                continuation: &cont,
                config: &config,
            };
            let map = receiver_response_map(&ctx);
            let sol1 = sender_stage_cpse(&ctx, &map).unwrap();
            let gamma = sol1.sender.unwrap();
            let swapped = SenderPrescription::new(
                gamma
                    .rows()
                    .iter()
                    .map(|r| r.iter().rev().copied().collect())
                    .collect(),
            )
            .unwrap();
            let v = evaluate_sender_cpse(&ctx, &gamma, &map).unwrap().value;
            let w = evaluate_sender_cpse(&ctx, &swapped, &map).unwrap().value;
            assert!((v - w).abs() <= 1e-9, "{name} {b:?}: {v} vs {w}");
            assert!((v - sol1.values[0]).abs() <= 1e-9);
        }
    }
}

#[test]
fn aligned_commitment_is_at_least_the_pbe_value() {
    let spec = corpus("aligned");
    let config = SolverConfig::default();
    let pbe = solved(&spec, Mode::Pbe, 20, &config);
    let cpse = solved(&spec, Mode::Cpse, 20, &config);
    for b in pbe.tables.grid().beliefs() {
        let (p, c) = (
            pbe.tables.sender_ex_ante(1, &b),
            cpse.tables.sender_ex_ante(1, &b),
        );
        assert!(c >= p - 1e-9, "{b:?}: {c} < {p}");
    }
}
