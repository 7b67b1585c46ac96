//! Composition grid over the probability simplex.
//!
//! Grid points are the beliefs `k / M` for every composition `k` of `M` into
//! `|X|` nonnegative parts. Simplex-linear interpolation uses the Freudenthal
//! triangulation in cumulative coordinates, so a query is a convex
//! combination of the `|X|` vertices of the sub-simplex containing it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Belief;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Interpolation {
    Nearest,
    #[default]
    SimplexLinear,
}

#[derive(Debug, Clone)]
pub struct BeliefGrid {
    n_states: usize,
    resolution: usize,
    interpolation: Interpolation,
    points: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
}

impl BeliefGrid {
    pub fn new(n_states: usize, resolution: usize, interpolation: Interpolation) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::InvalidBelief(
                "grid over an empty state space".into(),
            ));
        }
        if resolution == 0 {
            return Err(Error::InvalidBelief(
                "grid resolution must be at least 1".into(),
            ));
        }
        let mut points = Vec::new();
        let mut current = vec![0u32; n_states];
        compositions(resolution as u32, 0, &mut current, &mut points);
        let index = points
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect();
        Ok(Self {
            n_states,
            resolution,
            interpolation,
            points,
            index,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn composition(&self, point: usize) -> &[u32] {
        &self.points[point]
    }

    pub fn index_of(&self, composition: &[u32]) -> Option<usize> {
        self.index.get(composition).copied()
    }

    pub fn belief(&self, point: usize) -> Belief {
        let m = self.resolution as f64;
        Belief::from_weights(self.points[point].iter().map(|&k| k as f64 / m).collect())
            .expect("grid compositions have positive mass")
    }

    pub fn beliefs(&self) -> Vec<Belief> {
        (0..self.len()).map(|i| self.belief(i)).collect()
    }

    /// Grid point nearest to `b` in L1 distance (largest-remainder rounding,
    /// ties to the lower state index).
    pub fn nearest(&self, b: &Belief) -> usize {
        let m = self.resolution as f64;
        let scaled: Vec<f64> = b.probs().iter().map(|p| p * m).collect();
        let mut k: Vec<u32> = scaled.iter().map(|v| v.floor().max(0.0) as u32).collect();
        let assigned: u32 = k.iter().sum();
        let mut remaining = (self.resolution as u32).saturating_sub(assigned);
        let mut order: Vec<usize> = (0..self.n_states).collect();
        order.sort_by(|&a, &b| {
            let fa = scaled[a] - scaled[a].floor();
            let fb = scaled[b] - scaled[b].floor();
            fb.total_cmp(&fa)
        });
        for &i in order.iter().cycle() {
            if remaining == 0 {
                break;
            }
            k[i] += 1;
            remaining -= 1;
        }
        // Rounding error can overshoot by one unit; take it from the largest part.
        while k.iter().sum::<u32>() > self.resolution as u32 {
            let i = (0..self.n_states).max_by_key(|&i| k[i]).unwrap_or(0);
            k[i] -= 1;
        }
        self.index[&k]
    }

    /// Interpolation weights of `b` over grid points. Weights are nonnegative
    /// and sum to one.
    pub fn weights(&self, b: &Belief) -> Vec<(usize, f64)> {
        match self.interpolation {
            Interpolation::Nearest => vec![(self.nearest(b), 1.0)],
            Interpolation::SimplexLinear => self.simplex_weights(b),
        }
    }

    pub fn interpolate(&self, b: &Belief, value: impl Fn(usize) -> f64) -> f64 {
        self.weights(b).into_iter().map(|(i, w)| w * value(i)).sum()
    }

    fn simplex_weights(&self, b: &Belief) -> Vec<(usize, f64)> {
        let n = self.n_states;
        if n == 1 {
            return vec![(0, 1.0)];
        }
        let m = self.resolution as f64;
        // cumulative coordinates y_i = M * sum_{k >= i} b_k, y_0 = M
        let mut y = vec![0.0; n];
        let mut acc = 0.0;
        for i in (0..n).rev() {
            acc += b[i];
            y[i] = (m * acc).clamp(0.0, m);
        }
        y[0] = m;
        let mut base = vec![0i64; n];
        let mut frac = vec![0.0; n];
        for i in 0..n {
            let r = y[i].round();
            if (y[i] - r).abs() < 1e-9 {
                base[i] = r as i64;
            } else {
                base[i] = y[i].floor() as i64;
                frac[i] = y[i] - y[i].floor();
            }
        }
        let mut order: Vec<usize> = (1..n).collect();
        order.sort_by(|&a, &c| frac[c].total_cmp(&frac[a]));

        let mut out: Vec<(usize, f64)> = Vec::with_capacity(n);
        let mut vertex = base.clone();
        let first = 1.0 - frac[order[0]];
        self.push_vertex(&vertex, first, &mut out);
        for k in 0..order.len() {
            vertex[order[k]] += 1;
            let next = order.get(k + 1).map_or(0.0, |&j| frac[j]);
            self.push_vertex(&vertex, frac[order[k]] - next, &mut out);
        }
        if out.is_empty() {
            return vec![(self.nearest(b), 1.0)];
        }
        let total: f64 = out.iter().map(|(_, w)| w).sum();
        for (_, w) in &mut out {
            *w /= total;
        }
        out
    }

    fn push_vertex(&self, cumulative: &[i64], weight: f64, out: &mut Vec<(usize, f64)>) {
        if weight <= 1e-15 {
            return;
        }
        let n = cumulative.len();
        let mut comp = Vec::with_capacity(n);
        for i in 0..n {
            let next = if i + 1 < n { cumulative[i + 1] } else { 0 };
            let k = cumulative[i] - next;
            if k < 0 {
                return;
            }
            comp.push(k as u32);
        }
        if let Some(&idx) = self.index.get(&comp) {
            match out.iter_mut().find(|(i, _)| *i == idx) {
                Some(entry) => entry.1 += weight,
                None => out.push((idx, weight)),
            }
        }
    }
}

fn compositions(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let n = current.len();
    if pos == n - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for k in (0..=remaining).rev() {
        current[pos] = k;
        compositions(remaining - k, pos + 1, current, out);
    }
}
