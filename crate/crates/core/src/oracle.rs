//! Ground-truth viability kernel and viable set by fixed-point iteration over
//! a tabulated transition map.

use std::sync::Arc;

use rayon::prelude::*;

use crate::dynamics::{StepOutcome, SystemModel};
use crate::error::{Error, Result};
use crate::lattice::{GridSpec, QSet, SSet};

/// The transition map `T` restricted to grid points, with successors snapped
/// to their nearest state cell. `None` means the transition failed or left
/// the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTable {
    grid: Arc<GridSpec>,
    failing: Vec<bool>,
    next: Vec<Option<u32>>,
}

impl TransitionTable {
    /// Builds a table directly from successor entries, indexed
    /// `state_cell * action_cells + action_cell`.
    pub fn from_entries(grid: Arc<GridSpec>, failing: Vec<bool>, next: Vec<Option<usize>>) -> Result<Self> {
        let ns = grid.state_cells();
        let na = grid.action_cells();
        if failing.len() != ns {
            return Err(Error::Dimension { expected: ns, got: failing.len() });
        }
        if next.len() != ns * na {
            return Err(Error::Dimension { expected: ns * na, got: next.len() });
        }
        let mut packed = Vec::with_capacity(next.len());
        for (k, entry) in next.into_iter().enumerate() {
            let entry = match entry {
                _ if failing[k / na] => None,
                Some(c) if c >= ns => return Err(Error::Precondition(format!("successor {c} out of range"))),
                Some(c) if failing[c] => None,
                other => other,
            };
            packed.push(entry.map(|c| c as u32));
        }
        Ok(Self { grid, failing, next: packed })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    /// Successor cell of `(state_cell, action_cell)`, `None` when failed.
    pub fn get(&self, state_cell: usize, action_cell: usize) -> Option<usize> {
        self.next[state_cell * self.grid.action_cells() + action_cell].map(|c| c as usize)
    }

    /// Whether the grid point of `state_cell` itself lies in the failure set.
    pub fn is_failing(&self, state_cell: usize) -> bool {
        self.failing[state_cell]
    }
}

fn check_model_grid(model: &SystemModel, grid: &GridSpec) -> Result<()> {
    if grid.state_dim() != model.state_dim() {
        return Err(Error::Dimension { expected: model.state_dim(), got: grid.state_dim() });
    }
    if grid.action_dim() != model.action_dim() {
        return Err(Error::Dimension { expected: model.action_dim(), got: grid.action_dim() });
    }
    for (axis, iv) in grid.action_axes.iter().zip(model.action_box().intervals()) {
        if axis.lower < iv.lower || axis.upper > iv.upper {
            return Err(Error::InvalidGrid("action grid extends beyond the action box".into()));
        }
    }
    Ok(())
}

/// Evaluates `step` followed by `locate` at every grid pair.
pub fn tabulate(model: &SystemModel, grid: Arc<GridSpec>) -> Result<TransitionTable> {
    check_model_grid(model, &grid)?;
    let ns = grid.state_cells();
    let na = grid.action_cells();
    let actions: Vec<Vec<f64>> = (0..na).map(|j| grid.action_point(j)).collect();
    let failing: Vec<bool> = (0..ns).map(|i| model.is_failure(&grid.state_point(i))).collect();

    let rows: Vec<Vec<Option<usize>>> = (0..ns)
        .into_par_iter()
        .map(|i| {
            if failing[i] {
                return Ok(vec![None; na]);
            }
            let s = grid.state_point(i);
            actions
                .iter()
                .map(|a| match model.step(&s, a)? {
                    StepOutcome::Alive(x) => Ok(grid.locate(&x)?),
                    StepOutcome::Failed(_) => Ok(None),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    TransitionTable::from_entries(grid, failing, rows.into_iter().flatten().collect())
}

/// Read access to a kernel and its viable set.
pub trait ViableSets {
    fn kernel(&self) -> &SSet;
    fn viable(&self) -> &QSet;
}

#[derive(Clone, Debug)]
pub struct ViabilityResult {
    pub kernel: SSet,
    pub viable: QSet,
    pub iterations: usize,
    /// Kernel cell count before each iteration, ending with the fixed point.
    pub trace: Vec<usize>,
    pub table: TransitionTable,
}

impl ViableSets for ViabilityResult {
    fn kernel(&self) -> &SSet {
        &self.kernel
    }

    fn viable(&self) -> &QSet {
        &self.viable
    }
}

/// Kernel and viable set reloaded from disk, without the transition table.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredOracle {
    pub kernel: SSet,
    pub viable: QSet,
}

impl ViableSets for StoredOracle {
    fn kernel(&self) -> &SSet {
        &self.kernel
    }

    fn viable(&self) -> &QSet {
        &self.viable
    }
}

/// Pairs whose successor lies in `states`, restricted to rows in `states`.
fn pairs_into(table: &TransitionTable, states: &SSet) -> QSet {
    QSet::from_fn(table.grid.clone(), |i, j| {
        states.contains(i) && table.get(i, j).is_some_and(|c| states.contains(c))
    })
}

impl ViabilityResult {
    /// Fixed-point iteration: start from every non-failing state, keep the
    /// pairs mapping into the current set, project, and repeat until stable.
    pub fn from_table(table: TransitionTable) -> Self {
        let grid = table.grid.clone();
        let bits = (0..grid.state_cells()).map(|i| !table.is_failing(i)).collect();
        let mut states = SSet::from_bits(grid, bits).expect("state bit count matches grid");
        let mut trace = vec![states.count()];
        let mut iterations = 0;
        loop {
            iterations += 1;
            let pairs = pairs_into(&table, &states);
            let next = pairs.project();
            debug_assert!(next.is_subset(&states).unwrap());
            if next == states {
                assert_eq!(pairs.project(), states, "viable set must project onto the kernel");
                return Self { kernel: states, viable: pairs, iterations, trace, table };
            }
            trace.push(next.count());
            if next.is_empty() {
                let viable = QSet::empty(next.grid_arc().clone());
                return Self { kernel: next, viable, iterations, trace, table };
            }
            states = next;
        }
    }

    /// Decides whether `q` maps into its own projection; returns the first
    /// violating pair otherwise.
    pub fn check_control_constraint(&self, q: &QSet) -> Result<ConstraintVerdict> {
        q.check_grid(self.table.grid())?;
        let cover = q.project();
        for (i, j) in q.members() {
            match self.table.get(i, j) {
                Some(c) if cover.contains(c) => {}
                _ => return Ok(ConstraintVerdict::Violated { state_cell: i, action_cell: j }),
            }
        }
        Ok(ConstraintVerdict::Holds)
    }

    pub fn is_control_constraint(&self, q: &QSet) -> Result<bool> {
        Ok(self.check_control_constraint(q)? == ConstraintVerdict::Holds)
    }

    /// Removes `c` from the control constraint `a`, provided no state loses
    /// its whole action slice.
    pub fn prune(&self, a: &QSet, c: &QSet) -> Result<Pruned> {
        if let ConstraintVerdict::Violated { state_cell, action_cell } = self.check_control_constraint(a)? {
            return Err(Error::Precondition(format!(
                "input is not a control constraint: pair ({state_cell}, {action_cell}) leaves its projection"
            )));
        }
        let rest = a.difference(c)?;
        let before = a.project();
        let after = rest.project();
        let emptied = before.members().find(|&i| !after.contains(i));
        match emptied {
            None => Ok(Pruned::Kept(rest)),
            Some(state_cell) => Ok(Pruned::Rejected { state_cell }),
        }
    }
}

pub fn compute_viability(model: &SystemModel, grid: Arc<GridSpec>) -> Result<ViabilityResult> {
    Ok(ViabilityResult::from_table(tabulate(model, grid)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintVerdict {
    Holds,
    Violated { state_cell: usize, action_cell: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pruned {
    Kept(QSet),
    /// Removing the cells would empty the action slice of this state.
    Rejected { state_cell: usize },
}
