//! Columnar text output for tables, policies, trajectories and reports.
//!
//! Floats use Rust's shortest round-trip formatting, so files are
//! byte-identical across runs that compute identical values.

use std::io::Write;

use crate::backward::{EquilibriumPolicy, ValueTables};
use crate::error::Result;
use crate::forward::Trajectory;
use crate::model::{Belief, GameSpec};
use crate::stage::Mode;
use crate::verify::DeviationReport;

fn num(v: f64) -> String {
    format!("{v}")
}

fn belief_columns(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|x| format!("{prefix}{x}")).collect()
}

/// Columns: `t, point, b0..b{n-1}`, then `sender` (cPSE) or
/// `sender_x0..` (PBE), then `receiver{i}` and `receiver{i}_post`.
pub fn write_value_tables<W: Write>(out: W, tables: &ValueTables, spec: &GameSpec) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = spec.n_states;
    let mut header = vec!["t".to_string(), "point".to_string()];
    header.extend(belief_columns("b", n));
    match tables.mode() {
        Mode::Pbe => header.extend(belief_columns("sender_x", n)),
        Mode::Cpse => header.push("sender".into()),
    }
    for i in 1..=spec.n_receivers {
        header.push(format!("receiver{i}"));
        header.push(format!("receiver{i}_post"));
    }
    w.write_record(&header)?;
    let grid = tables.grid();
    for t in 1..=tables.horizon() {
        for p in 0..grid.len() {
            let mut row = vec![t.to_string(), p.to_string()];
            row.extend(grid.belief(p).probs().iter().map(|&v| num(v)));
            row.extend(tables.sender_entry(t, p).iter().map(|&v| num(v)));
            for i in 0..spec.n_receivers {
                row.push(num(tables.receiver_entry(t, p)[i]));
                row.push(num(tables.receiver_post_entry(t, p)[i]));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per period and grid point: the sender prescription at the point
/// as a pre-signal belief and the receivers' prescription at the point as a
/// post-signal belief, with stage diagnostics.
pub fn write_policy<W: Write>(out: W, policy: &EquilibriumPolicy, spec: &GameSpec) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = spec.n_states;
    let mut header = vec!["t".to_string(), "point".to_string()];
    header.extend(belief_columns("b", n));
    header.extend(
        [
            "sender_status",
            "sender_method",
            "sender_residual",
            "sender_iterations",
            "refined",
        ]
        .map(String::from),
    );
    for x in 0..n {
        for s in 0..spec.n_signals {
            header.push(format!("gamma_x{x}_s{s}"));
        }
    }
    header.extend(
        [
            "receiver_status",
            "receiver_method",
            "receiver_residual",
            "exhaustive",
        ]
        .map(String::from),
    );
    for i in 0..spec.n_receivers {
        for a in 0..spec.action_counts[i] {
            header.push(format!("rho{}_a{a}", i + 1));
        }
    }
    w.write_record(&header)?;
    let grid = policy.grid();
    for t in 1..=policy.horizon() {
        for p in 0..grid.len() {
            let mut row = vec![t.to_string(), p.to_string()];
            row.extend(grid.belief(p).probs().iter().map(|&v| num(v)));
            match policy.sender(t, p) {
                Some(e) => {
                    let d = &e.diagnostics;
                    row.extend([
                        "ok".into(),
                        format!("{:?}", d.method),
                        num(d.residual),
                        d.iterations.to_string(),
                        d.refined.to_string(),
                    ]);
                    row.extend(e.prescription.rows().iter().flatten().map(|&v| num(v)));
                }
                None => {
                    row.extend([
                        "failed".into(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                    ]);
                    row.extend(std::iter::repeat_n(String::new(), n * spec.n_signals));
                }
            }
            match policy.receiver(t, p) {
                Some(e) => {
                    let d = &e.diagnostics;
                    row.extend([
                        "ok".into(),
                        format!("{:?}", d.method),
                        num(d.residual),
                        d.exhaustive.to_string(),
                    ]);
                    row.extend(e.prescription.factors().iter().flatten().map(|&v| num(v)));
                }
                None => {
                    row.extend(["failed".into(), String::new(), String::new(), String::new()]);
                    row.extend(std::iter::repeat_n(
                        String::new(),
                        spec.action_counts.iter().sum(),
                    ));
                }
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Columns: `path, t, x, s, a, r1..rN, mu0.., nu0..`, where `a` is the joint
/// action index (receiver 1 most significant).
pub fn write_trajectories<W: Write>(out: W, paths: &[Trajectory], spec: &GameSpec) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["path", "t", "x", "s", "a"].map(String::from).to_vec();
    header.extend((1..=spec.n_receivers).map(|i| format!("r{i}")));
    header.extend(belief_columns("mu", spec.n_states));
    header.extend(belief_columns("nu", spec.n_states));
    w.write_record(&header)?;
    for tr in paths {
        for st in &tr.steps {
            let mut row = vec![
                tr.path.to_string(),
                st.t.to_string(),
                st.state.to_string(),
                st.signal.to_string(),
                st.joint.to_string(),
            ];
            row.extend(st.rewards.iter().map(|&v| num(v)));
            row.extend(st.mu.probs().iter().map(|&v| num(v)));
            row.extend(st.nu.probs().iter().map(|&v| num(v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_reports<W: Write>(out: W, reports: &[DeviationReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "player",
        "verdict",
        "gain",
        "reachable_gain",
        "eq_payoff",
        "dev_payoff",
        "eps_dev",
        "value_slack",
        "lookup_slack",
        "tolerance",
        "info_sets",
        "info_set",
        "deviation",
    ])?;
    for r in reports {
        w.write_record([
            r.player.to_string(),
            if r.passed { "PASS" } else { "FAIL" }.to_string(),
            num(r.gain),
            num(r.reachable_gain),
            num(r.eq_payoff),
            num(r.dev_payoff),
            num(r.eps_dev),
            num(r.value_slack),
            num(r.lookup_slack),
            num(r.tolerance),
            r.info_sets.to_string(),
            r.info_set.clone(),
            r.deviation.join("; "),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Interpolated values at period 1 along the edge from state `n-1` to state 0
/// (`steps + 1` evenly spaced beliefs).
pub fn write_value_slice<W: Write>(
    out: W,
    tables: &ValueTables,
    spec: &GameSpec,
    steps: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = spec.n_states;
    let mut header = belief_columns("b", n);
    header.push("sender".into());
    header.extend((1..=spec.n_receivers).map(|i| format!("receiver{i}")));
    w.write_record(&header)?;
    for k in 0..=steps {
        let p = k as f64 / steps as f64;
        let mut probs = vec![0.0; n];
        probs[0] = p;
        probs[n - 1] += 1.0 - p;
        let b = Belief::from_weights(probs).expect("edge point has mass");
        let mut row: Vec<String> = b.probs().iter().map(|&v| num(v)).collect();
        row.push(num(tables.sender_ex_ante(1, &b)));
        row.extend((0..spec.n_receivers).map(|i| num(tables.receiver_value(1, i, &b))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
