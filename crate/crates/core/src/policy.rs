//! Nominal policies, the constrained controller `OPT(K)`, the critical set and
//! the admissibility test for constraint sets.
//!
//! `OPT(K)` maps a state cell to the action in its slice of `K` closest to the
//! nominal action. The critical set collects the unviable pairs at kernel
//! states that are at least as close to the nominal action as the best viable
//! one. A constraint containing `OPT(Q_V)` reproduces `OPT(Q_V)` on the
//! kernel exactly when it avoids the critical set; [`direct_check`] compares
//! the two policies cell by cell so that equivalence can be tested.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{GridSpec, QSet};
use crate::oracle::ViableSets;

/// The policy whose actions the constrained controller tracks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NominalPolicy {
    /// `a = offset + gain * s`, clamped to the action box. `gain` has one row
    /// per action dimension and one column per state dimension.
    Affine { gain: Vec<Vec<f64>>, offset: Vec<f64> },
    /// Independent uniform draws over the action box.
    UniformRandom { seed: u64 },
    /// One action per state cell; continuous states use the nearest cell.
    Table { actions: Vec<Vec<f64>> },
}

impl NominalPolicy {
    /// The affine policy `a = offset + gain * s` for 1-D state and action.
    pub fn affine_1d(offset: f64, gain: f64) -> Self {
        NominalPolicy::Affine { gain: vec![vec![gain]], offset: vec![offset] }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, NominalPolicy::UniformRandom { .. })
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let (n, m) = (grid.state_dim(), grid.action_dim());
        match self {
            NominalPolicy::Affine { gain, offset } => {
                if offset.len() != m || gain.len() != m || gain.iter().any(|row| row.len() != n) {
                    return Err(Error::Config(format!("affine policy must have a {m}x{n} gain and {m} offsets")));
                }
                if gain.iter().flatten().chain(offset).any(|v| !v.is_finite()) {
                    return Err(Error::Config("affine policy coefficients must be finite".into()));
                }
            }
            NominalPolicy::UniformRandom { .. } => {}
            NominalPolicy::Table { actions } => {
                if actions.len() != grid.state_cells() || actions.iter().any(|a| a.len() != m) {
                    return Err(Error::Config(format!(
                        "table policy needs {} actions of dimension {m}",
                        grid.state_cells()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Deterministic evaluation at a continuous state; `None` for stochastic
    /// policies.
    pub fn action(&self, grid: &GridSpec, s: &[f64]) -> Option<Vec<f64>> {
        let mut a = match self {
            NominalPolicy::Affine { gain, offset } => offset
                .iter()
                .zip(gain)
                .map(|(o, row)| o + row.iter().zip(s).map(|(g, x)| g * x).sum::<f64>())
                .collect(),
            NominalPolicy::UniformRandom { .. } => return None,
            NominalPolicy::Table { actions } => {
                let mut clamped = s.to_vec();
                grid.state_box().clamp(&mut clamped);
                let cell = grid.locate(&clamped).ok().flatten()?;
                actions[cell].clone()
            }
        };
        grid.action_box().clamp(&mut a);
        Some(a)
    }

    pub fn sampler(&self) -> PolicySampler {
        let rng = match self {
            NominalPolicy::UniformRandom { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
            _ => None,
        };
        PolicySampler { policy: self.clone(), rng }
    }
}

/// Draws nominal actions, carrying the random stream of stochastic policies.
#[derive(Clone, Debug)]
pub struct PolicySampler {
    policy: NominalPolicy,
    rng: Option<ChaCha8Rng>,
}

impl PolicySampler {
    pub fn policy(&self) -> &NominalPolicy {
        &self.policy
    }

    pub fn draw(&mut self, grid: &GridSpec, s: &[f64]) -> Vec<f64> {
        match &mut self.rng {
            Some(rng) => uniform_action(grid, rng),
            None => self.policy.action(grid, s).expect("deterministic policy"),
        }
    }
}

/// Uniform draw over the action box of `grid`.
pub fn uniform_action<R: Rng + ?Sized>(grid: &GridSpec, rng: &mut R) -> Vec<f64> {
    grid.action_axes.iter().map(|ax| rng.random_range(ax.lower..=ax.upper)).collect()
}

/// Cost of taking `action` when the nominal policy asks for `nominal`.
pub trait Cost {
    fn cost(&self, action: &[f64], nominal: &[f64]) -> f64;
}

/// `J(s, a) = |a - pi(s)|^2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SquaredDistance;

impl Cost for SquaredDistance {
    fn cost(&self, action: &[f64], nominal: &[f64]) -> f64 {
        action.iter().zip(nominal).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// Cost of every action cell against `nominal`, indexed by action cell.
fn cell_costs(grid: &GridSpec, nominal: &[f64], cost: &impl Cost) -> Vec<f64> {
    (0..grid.action_cells()).map(|j| cost.cost(&grid.action_point(j), nominal)).collect()
}

/// `OPT(K)` at one state cell: the cheapest action cell in the slice, ties to
/// the lowest index (smallest action, lexicographic). `None` if the slice is
/// empty.
pub fn opt(k: &QSet, state_cell: usize, nominal: &[f64]) -> Option<usize> {
    opt_with(k, state_cell, nominal, &SquaredDistance)
}

pub fn opt_with(k: &QSet, state_cell: usize, nominal: &[f64], cost: &impl Cost) -> Option<usize> {
    let grid = k.grid();
    let mut best: Option<(usize, f64)> = None;
    for (j, &member) in k.row(state_cell).iter().enumerate() {
        if !member {
            continue;
        }
        let c = cost.cost(&grid.action_point(j), nominal);
        if best.is_none_or(|(_, b)| c < b) {
            best = Some((j, c));
        }
    }
    best.map(|(j, _)| j)
}

/// All minimizers of the cost over the slice, in index order.
pub fn opt_set(k: &QSet, state_cell: usize, nominal: &[f64]) -> Vec<usize> {
    let costs = cell_costs(k.grid(), nominal, &SquaredDistance);
    argmin_set(k.row(state_cell), &costs)
}

fn argmin_set(row: &[bool], costs: &[f64]) -> Vec<usize> {
    let min = row.iter().zip(costs).filter(|(&m, _)| m).map(|(_, &c)| c).fold(f64::INFINITY, f64::min);
    row.iter().zip(costs).enumerate().filter(|(_, (&m, &c))| m && c == min).map(|(j, _)| j).collect()
}

/// Nominal action at the grid point of every state cell.
fn nominal_table(pi: &NominalPolicy, grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
    if !pi.is_deterministic() {
        return Err(Error::StochasticPolicy);
    }
    pi.validate(grid)?;
    Ok((0..grid.state_cells())
        .map(|i| pi.action(grid, &grid.state_point(i)).expect("deterministic"))
        .collect())
}

/// `OPT(Q_V)` on each kernel cell; `None` off the kernel.
pub fn optimal_policy(oracle: &impl ViableSets, pi: &NominalPolicy) -> Result<Vec<Option<usize>>> {
    let viable = oracle.viable();
    if oracle.kernel().is_empty() {
        return Err(Error::Precondition("the viability kernel is empty".into()));
    }
    let nominal = nominal_table(pi, viable.grid())?;
    Ok((0..viable.grid().state_cells())
        .map(|i| if oracle.kernel().contains(i) { opt(viable, i, &nominal[i]) } else { None })
        .collect())
}

/// Graph of the set-valued `OPT(Q_V)` on the kernel. For a stochastic policy
/// this is the union over all nominal draws, i.e. every viable pair.
pub fn opt_graph(oracle: &impl ViableSets, pi: &NominalPolicy) -> Result<QSet> {
    let viable = oracle.viable();
    let kernel = oracle.kernel();
    if !pi.is_deterministic() {
        return viable.restrict_rows(kernel);
    }
    let grid = viable.grid();
    let nominal = nominal_table(pi, grid)?;
    let mut graph = QSet::empty(viable.grid_arc().clone());
    for i in kernel.members() {
        let costs = cell_costs(grid, &nominal[i], &SquaredDistance);
        for j in argmin_set(viable.row(i), &costs) {
            graph.set(i, j, true);
        }
    }
    Ok(graph)
}

/// Unviable pairs at kernel states whose cost does not exceed that of
/// `OPT(Q_V)`. For a stochastic policy this is the union over all nominal
/// draws: every unviable pair at a kernel state.
pub fn critical_set(oracle: &impl ViableSets, pi: &NominalPolicy) -> Result<QSet> {
    let viable = oracle.viable();
    let kernel = oracle.kernel();
    let grid = viable.grid();
    let crit = if pi.is_deterministic() {
        let nominal = nominal_table(pi, grid)?;
        let mut crit = QSet::empty(viable.grid_arc().clone());
        for i in kernel.members() {
            let costs = cell_costs(grid, &nominal[i], &SquaredDistance);
            let best = opt(viable, i, &nominal[i]).expect("kernel states have viable actions");
            let bound = costs[best];
            for (j, &c) in costs.iter().enumerate() {
                if !viable.contains(i, j) && c <= bound {
                    crit.set(i, j, true);
                }
            }
        }
        crit
    } else {
        QSet::from_fn(viable.grid_arc().clone(), |i, j| kernel.contains(i) && !viable.contains(i, j))
    };
    assert!(crit.is_disjoint(viable)?, "critical set intersects the viable set");
    assert!(crit.project().is_subset(kernel)?, "critical set leaves the kernel");
    Ok(crit)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Admissibility {
    pub admissible: bool,
    /// Pairs of `OPT(Q_V)` missing from the constraint.
    pub missing_optimal: Vec<(usize, usize)>,
    /// Critical pairs included in the constraint.
    pub critical_included: Vec<(usize, usize)>,
}

/// Checks `OPT(Q_V) ⊆ K` and `K ∩ Q_crit = ∅`.
pub fn is_admissible(k: &QSet, oracle: &impl ViableSets, pi: &NominalPolicy) -> Result<Admissibility> {
    k.check_grid(oracle.viable().grid())?;
    let graph = opt_graph(oracle, pi)?;
    let crit = critical_set(oracle, pi)?;
    let missing_optimal: Vec<_> = graph.difference(k)?.members().collect();
    let critical_included: Vec<_> = crit.intersect(k)?.members().collect();
    Ok(Admissibility {
        admissible: missing_optimal.is_empty() && critical_included.is_empty(),
        missing_optimal,
        critical_included,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectCheck {
    pub equal: bool,
    /// Kernel cells where the minimizer sets of `K` and `Q_V` differ.
    pub mismatched: Vec<usize>,
}

/// Compares the set-valued `OPT(K)` with `OPT(Q_V)` on every kernel cell.
pub fn direct_check(k: &QSet, oracle: &impl ViableSets, pi: &NominalPolicy) -> Result<DirectCheck> {
    let viable = oracle.viable();
    k.check_grid(viable.grid())?;
    let grid = viable.grid();
    let nominal = nominal_table(pi, grid)?;
    let mismatched: Vec<usize> = oracle
        .kernel()
        .members()
        .filter(|&i| {
            let costs = cell_costs(grid, &nominal[i], &SquaredDistance);
            argmin_set(k.row(i), &costs) != argmin_set(viable.row(i), &costs)
        })
        .collect();
    Ok(DirectCheck { equal: mismatched.is_empty(), mismatched })
}
