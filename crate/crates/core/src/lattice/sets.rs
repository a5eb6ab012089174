use std::sync::Arc;

use crate::error::{Error, Result};

use super::grid::GridSpec;

/// Subset of the state-action grid, one bit per (state cell, action cell).
#[derive(Clone, Debug, PartialEq)]
pub struct QSet {
    grid: Arc<GridSpec>,
    bits: Vec<bool>,
}

/// Subset of the state grid, one bit per state cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SSet {
    grid: Arc<GridSpec>,
    bits: Vec<bool>,
}

fn same_grid(a: &Arc<GridSpec>, b: &Arc<GridSpec>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a == b {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

impl QSet {
    pub fn empty(grid: Arc<GridSpec>) -> Self {
        let n = grid.state_cells() * grid.action_cells();
        Self { grid, bits: vec![false; n] }
    }

    pub fn full(grid: Arc<GridSpec>) -> Self {
        let n = grid.state_cells() * grid.action_cells();
        Self { grid, bits: vec![true; n] }
    }

    pub fn from_fn(grid: Arc<GridSpec>, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let na = grid.action_cells();
        let bits = (0..grid.state_cells() * na).map(|k| f(k / na, k % na)).collect();
        Self { grid, bits }
    }

    pub fn from_bits(grid: Arc<GridSpec>, bits: Vec<bool>) -> Result<Self> {
        let n = grid.state_cells() * grid.action_cells();
        if bits.len() != n {
            return Err(Error::Dimension { expected: n, got: bits.len() });
        }
        Ok(Self { grid, bits })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn index(&self, state_cell: usize, action_cell: usize) -> usize {
        let na = self.grid.action_cells();
        assert!(action_cell < na && state_cell < self.grid.state_cells(), "cell out of range");
        state_cell * na + action_cell
    }

    pub fn contains(&self, state_cell: usize, action_cell: usize) -> bool {
        self.bits[self.index(state_cell, action_cell)]
    }

    pub fn set(&mut self, state_cell: usize, action_cell: usize, value: bool) {
        let k = self.index(state_cell, action_cell);
        self.bits[k] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Members as `(state_cell, action_cell)` pairs in index order.
    pub fn members(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let na = self.grid.action_cells();
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(k, _)| (k / na, k % na))
    }

    /// Row of the lattice for one state cell.
    pub fn row(&self, state_cell: usize) -> &[bool] {
        let na = self.grid.action_cells();
        &self.bits[state_cell * na..(state_cell + 1) * na]
    }

    /// The action slice `{j : (state_cell, j) in self}`.
    pub fn action_slice(&self, state_cell: usize) -> Vec<usize> {
        assert!(state_cell < self.grid.state_cells(), "state cell out of range");
        self.row(state_cell).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect()
    }

    pub fn row_is_empty(&self, state_cell: usize) -> bool {
        !self.row(state_cell).iter().any(|&b| b)
    }

    /// Projection onto state space.
    pub fn project(&self) -> SSet {
        let bits = (0..self.grid.state_cells()).map(|i| !self.row_is_empty(i)).collect();
        SSet { grid: self.grid.clone(), bits }
    }

    fn zip_with(&self, other: &QSet, op: impl Fn(bool, bool) -> bool) -> Result<QSet> {
        same_grid(&self.grid, &other.grid)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| op(a, b)).collect();
        Ok(QSet { grid: self.grid.clone(), bits })
    }

    pub fn union(&self, other: &QSet) -> Result<QSet> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &QSet) -> Result<QSet> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &QSet) -> Result<QSet> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset(&self, other: &QSet) -> Result<bool> {
        same_grid(&self.grid, &other.grid)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }

    pub fn is_disjoint(&self, other: &QSet) -> Result<bool> {
        same_grid(&self.grid, &other.grid)?;
        Ok(!self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b))
    }

    /// Keeps only the rows of states in `states`.
    pub fn restrict_rows(&self, states: &SSet) -> Result<QSet> {
        same_grid(&self.grid, &states.grid)?;
        Ok(QSet::from_fn(self.grid.clone(), |i, j| states.contains(i) && self.contains(i, j)))
    }

    pub fn check_grid(&self, other: &GridSpec) -> Result<()> {
        if *self.grid == *other {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

impl SSet {
    pub fn empty(grid: Arc<GridSpec>) -> Self {
        let n = grid.state_cells();
        Self { grid, bits: vec![false; n] }
    }

    pub fn full(grid: Arc<GridSpec>) -> Self {
        let n = grid.state_cells();
        Self { grid, bits: vec![true; n] }
    }

    pub fn from_bits(grid: Arc<GridSpec>, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.state_cells() {
            return Err(Error::Dimension { expected: grid.state_cells(), got: bits.len() });
        }
        Ok(Self { grid, bits })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.bits[cell]
    }

    pub fn set(&mut self, cell: usize, value: bool) {
        self.bits[cell] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    fn zip_with(&self, other: &SSet, op: impl Fn(bool, bool) -> bool) -> Result<SSet> {
        same_grid(&self.grid, &other.grid)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| op(a, b)).collect();
        Ok(SSet { grid: self.grid.clone(), bits })
    }

    pub fn union(&self, other: &SSet) -> Result<SSet> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &SSet) -> Result<SSet> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &SSet) -> Result<SSet> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset(&self, other: &SSet) -> Result<bool> {
        same_grid(&self.grid, &other.grid)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }
}
