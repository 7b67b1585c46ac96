//! Forward play of solved strategies: tracked beliefs, empirical state
//! frequencies and payoff estimates against exact enumeration.

mod common;

use std::collections::HashMap;

use common::*;
use infodesign::forward::enumerate_paths;
use infodesign::{
    exact_payoff, rollout, solve, update_on_action, update_on_signal, BeliefGrid, GameSpec,
    Interpolation, Lookup, Mode, OffSupport, RolloutConfig, Solution, SolvedStrategy, SolverConfig,
    StrategyProfile,
};
use statrs::distribution::{ContinuousCDF, Normal};

const RESET: OffSupport = OffSupport::UniformReset;
const CAP: u64 = 10_000_000;

fn solved(spec: &GameSpec, mode: Mode) -> Solution {
    let grid = BeliefGrid::new(spec.n_states, 20, Interpolation::SimplexLinear).unwrap();
    solve(spec, mode, &grid, &SolverConfig::default()).unwrap()
}

fn config(paths: usize) -> RolloutConfig {
    RolloutConfig {
        paths,
        seed: 7,
        off_support: RESET,
    }
}

#[test]
fn tracked_beliefs_match_a_fresh_filter() {
    for name in CORPUS {
        let spec = corpus(name);
        for mode in [Mode::Pbe, Mode::Cpse] {
            let sol = solved(&spec, mode);
            let strat = SolvedStrategy::new(
                &spec,
                &sol.policy,
                &sol.tables,
                SolverConfig::default(),
                Lookup::Resolve,
            );
            let (_, paths) = rollout(&spec, &strat, &config(300)).unwrap();
            for tr in &paths {
                let mut mu = spec.initial_belief().unwrap();
                for st in &tr.steps {
                    assert!(st.mu.max_abs_diff(&mu) <= 1e-12);
                    let gamma = strat.sender(st.t, &mu).unwrap();
                    let nu = update_on_signal(&mu, &gamma, st.signal, RESET).unwrap();
                    assert!(st.nu.max_abs_diff(&nu) <= 1e-12);
                    mu = update_on_action(&nu, st.joint, &st.rewards, &spec, RESET).unwrap();
                }
            }
        }
    }
}

#[test]
fn exact_payoff_is_the_path_weighted_payoff() {
    for name in CORPUS {
        let spec = corpus(name);
        for mode in [Mode::Pbe, Mode::Cpse] {
            let sol = solved(&spec, mode);
            let strat = SolvedStrategy::new(
                &spec,
                &sol.policy,
                &sol.tables,
                SolverConfig::default(),
                Lookup::Resolve,
            );
            let exact = exact_payoff(&spec, &strat, CAP).unwrap();
            let paths = enumerate_paths(&spec, &strat, CAP, RESET).unwrap();
            let total: f64 = paths.iter().map(|(p, _)| p).sum();
            assert!((total - 1.0).abs() <= 1e-12);
            for (k, e) in exact.iter().enumerate() {
                let weighted: f64 = paths.iter().map(|(p, tr)| p * tr.payoff[k]).sum();
                assert!(
                    (weighted - e).abs() <= 1e-12,
                    "{name} {mode} player {k}: {weighted} vs {e}"
                );
            }
        }
    }
}

#[test]
fn monte_carlo_mean_is_within_four_standard_errors() {
    for name in CORPUS {
        let spec = corpus(name);
        let sol = solved(&spec, Mode::Cpse);
        let strat = SolvedStrategy::new(
            &spec,
            &sol.policy,
            &sol.tables,
            SolverConfig::default(),
            Lookup::Resolve,
        );
        let exact = exact_payoff(&spec, &strat, CAP).unwrap();
        let (summary, _) = rollout(&spec, &strat, &config(20_000)).unwrap();
        for k in 0..exact.len() {
            let gap = (summary.mean[k] - exact[k]).abs();
            assert!(
                gap <= 4.0 * summary.std_error[k] + 1e-12,
                "{name} player {k}: gap {gap}"
            );
        }
    }
}

/// Empirical frequency of the current state among paths sharing a common
/// history, against the tracked belief, with 99% bands corrected for the
/// number of comparisons.
#[test]
fn state_frequencies_agree_with_tracked_beliefs() {
    let z_base = Normal::new(0.0, 1.0).unwrap();
    for name in ["conflict", "invest", "persuasion"] {
        let spec = corpus(name);
        let sol = solved(&spec, Mode::Cpse);
        let strat = SolvedStrategy::new(
            &spec,
            &sol.policy,
            &sol.tables,
            SolverConfig::default(),
            Lookup::Resolve,
        );
        let (_, paths) = rollout(&spec, &strat, &config(100_000)).unwrap();

        // history key -> (belief, state counts)
        let mut groups: HashMap<String, (Vec<f64>, Vec<usize>)> = HashMap::new();
        for tr in &paths {
            let mut key = String::new();
            for st in &tr.steps {
                let pre = groups
                    .entry(format!("{key}|pre"))
                    .or_insert((st.mu.probs().to_vec(), vec![0; spec.n_states]));
                pre.1[st.state] += 1;
                key.push_str(&format!("s{}", st.signal));
                let post = groups
                    .entry(key.clone())
                    .or_insert((st.nu.probs().to_vec(), vec![0; spec.n_states]));
                post.1[st.state] += 1;
                key.push_str(&format!("a{}r{:?}", st.joint, st.rewards));
            }
        }
        let tested: Vec<_> = groups
            .values()
            .filter(|(_, c)| c.iter().sum::<usize>() >= 500)
            .collect();
        let comparisons = (tested.len() * spec.n_states) as f64;
        let z = z_base.inverse_cdf(1.0 - 0.01 / (2.0 * comparisons));
        for (belief, counts) in &tested {
            let n: usize = counts.iter().sum();
            for x in 0..spec.n_states {
                let p = belief[x];
                let freq = counts[x] as f64 / n as f64;
                let band = z * (p * (1.0 - p) / n as f64).sqrt() + 0.5 / n as f64;
                assert!(
                    (freq - p).abs() <= band,
                    "{name}: freq {freq} vs belief {p} over {n} hits"
                );
            }
        }
        assert!(
            tested.len() >= 4,
            "{name}: only {} histories with enough hits",
            tested.len()
        );
    }
}
