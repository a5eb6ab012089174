//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use viability::lattice::{Axis, GridSpec, QSet};
use viability::learner::Hyperparameters;
use viability::oracle::{TransitionTable, ViabilityResult};

pub fn unit_grid(ns: usize, na: usize) -> Arc<GridSpec> {
    Arc::new(GridSpec::new(vec![Axis::new(0.0, 1.0, ns).unwrap()], vec![Axis::new(0.0, 1.0, na).unwrap()]).unwrap())
}

/// Random table: each state fails with probability `p_fail_state`, each pair
/// lands on a uniform cell with probability `p_alive` and fails otherwise.
pub fn random_table<R: Rng>(rng: &mut R, ns: usize, na: usize, p_fail_state: f64, p_alive: f64) -> TransitionTable {
    let grid = unit_grid(ns, na);
    let failing: Vec<bool> = (0..ns).map(|_| rng.random_bool(p_fail_state)).collect();
    let next = (0..ns * na).map(|_| rng.random_bool(p_alive).then(|| rng.random_range(0..ns))).collect();
    TransitionTable::from_entries(grid, failing, next).unwrap()
}

/// Random table whose kernel is nonempty.
pub fn random_result<R: Rng>(rng: &mut R, max_ns: usize, max_na: usize) -> ViabilityResult {
    loop {
        let ns = rng.random_range(2..=max_ns);
        let na = rng.random_range(2..=max_na);
        let p_alive = rng.random_range(0.2..0.9);
        let result = ViabilityResult::from_table(random_table(rng, ns, na, 0.1, p_alive));
        if !result.kernel.is_empty() {
            return result;
        }
    }
}

/// Whether some action sequence keeps state `i` out of failure for `h`
/// transitions. Memoized recursion over every action branch.
pub struct Survival<'a> {
    table: &'a TransitionTable,
    memo: HashMap<(usize, usize), bool>,
}

impl<'a> Survival<'a> {
    pub fn new(table: &'a TransitionTable) -> Self {
        Self { table, memo: HashMap::new() }
    }

    pub fn survives(&mut self, i: usize, h: usize) -> bool {
        if self.table.is_failing(i) {
            return false;
        }
        if h == 0 {
            return true;
        }
        if let Some(&v) = self.memo.get(&(i, h)) {
            return v;
        }
        let na = self.table.grid().action_cells();
        let v = (0..na).any(|j| match self.table.get(i, j) {
            Some(k) => self.survives(k, h - 1),
            None => false,
        });
        self.memo.insert((i, h), v);
        v
    }
}

/// Kernel by finite-horizon survival. A horizon of `ns` transitions visits
/// `ns + 1` states, so a surviving path contains a cycle and survives forever.
pub fn survival_kernel(table: &TransitionTable, horizon: usize) -> Vec<bool> {
    let mut s = Survival::new(table);
    (0..table.grid().state_cells()).map(|i| s.survives(i, horizon)).collect()
}

/// Largest control constraint inside `q`: drop pairs leaving the projection
/// until nothing changes.
pub fn largest_control_constraint_within(table: &TransitionTable, q: &QSet) -> QSet {
    let mut current = q.clone();
    loop {
        let cover = current.project();
        let next = QSet::from_fn(current.grid_arc().clone(), |i, j| {
            current.contains(i, j) && table.get(i, j).is_some_and(|k| cover.contains(k))
        });
        if next == current {
            return current;
        }
        current = next;
    }
}

pub fn random_subset<R: Rng>(rng: &mut R, q: &QSet, keep: f64) -> QSet {
    QSet::from_fn(q.grid_arc().clone(), |i, j| q.contains(i, j) && rng.random_bool(keep))
}

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Independent solve of the GP equations by Gaussian elimination.
pub fn gp_oracle(xs: &[[f64; 2]], ys: &[f64], q: [f64; 2], h: &Hyperparameters, mu: f64) -> (f64, f64) {
    let k = |a: [f64; 2], b: [f64; 2]| {
        let d: f64 = (0..2).map(|d| ((a[d] - b[d]) / h.lengthscales[d]).powi(2)).sum();
        h.signal_variance * (-0.5 * d).exp()
    };
    let n = xs.len();
    let ks: Vec<f64> = xs.iter().map(|&x| k(q, x)).collect();
    // augmented system [K + noise I | y - mu | k*]
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| k(xs[i], xs[j]) + if i == j { h.noise_variance } else { 0.0 }).collect();
            row.push(ys[i] - mu);
            row.push(ks[i]);
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| m[a][c].abs().partial_cmp(&m[b][c].abs()).unwrap()).unwrap();
        m.swap(c, p);
        let pivot = m[c].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r != c {
                let f = row[c] / pivot[c];
                for (x, p) in row[c..].iter_mut().zip(&pivot[c..]) {
                    *x -= f * p;
                }
            }
        }
    }
    let alpha: Vec<f64> = (0..n).map(|i| m[i][n] / m[i][i]).collect();
    let v: Vec<f64> = (0..n).map(|i| m[i][n + 1] / m[i][i]).collect();
    let mean = mu + ks.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
    let var = h.signal_variance - ks.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    (mean, var)
}
