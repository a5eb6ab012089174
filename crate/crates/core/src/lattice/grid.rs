use serde::{Deserialize, Serialize};

use crate::dynamics::{BoxDomain, Interval};
use crate::error::{Error, Result};

/// Uniformly spaced points on `[lower, upper]`, both endpoints included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Axis {
    pub fn new(lower: f64, upper: f64, points: usize) -> Result<Self> {
        let axis = Self { lower, upper, points };
        axis.validate()?;
        Ok(axis)
    }

    fn validate(&self) -> Result<()> {
        if self.points < 2 {
            return Err(Error::InvalidGrid(format!("axis needs at least 2 points, got {}", self.points)));
        }
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::InvalidGrid(format!(
                "axis bounds must be finite with lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn value(&self, k: usize) -> f64 {
        if k + 1 == self.points {
            self.upper
        } else {
            self.lower + (self.upper - self.lower) * (k as f64) / ((self.points - 1) as f64)
        }
    }

    /// Nearest point index, ties toward the lower index. `None` outside.
    pub fn nearest(&self, x: f64) -> Option<usize> {
        if !(self.lower..=self.upper).contains(&x) {
            return None;
        }
        let t = (x - self.lower) / self.spacing();
        let mut k = (t.floor() as usize).min(self.points - 1);
        // correct for rounding in t before comparing distances
        if k > 0 && self.value(k) > x {
            k -= 1;
        }
        if k + 1 < self.points && self.value(k + 1) <= x {
            k += 1;
        }
        if k + 1 < self.points {
            let below = x - self.value(k);
            let above = self.value(k + 1) - x;
            if above < below {
                k += 1;
            }
        }
        Some(k)
    }

    /// Indices of the grid points bracketing `x`: one index when `x` sits on
    /// a point, two otherwise. `None` outside.
    pub fn bracket(&self, x: f64) -> Option<(usize, usize)> {
        let k = self.nearest(x)?;
        let v = self.value(k);
        if v == x {
            Some((k, k))
        } else if v < x {
            Some((k, (k + 1).min(self.points - 1)))
        } else {
            Some((k - 1, k))
        }
    }
}

/// Discretization of the state and action boxes. Every set in the crate is a
/// boolean lattice over the points of one `GridSpec`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub state_axes: Vec<Axis>,
    pub action_axes: Vec<Axis>,
}

impl GridSpec {
    pub fn new(state_axes: Vec<Axis>, action_axes: Vec<Axis>) -> Result<Self> {
        let grid = Self { state_axes, action_axes };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid over the given boxes with the given point counts per axis.
    pub fn over_boxes(state_box: &BoxDomain, state_points: &[usize], action_box: &BoxDomain, action_points: &[usize]) -> Result<Self> {
        let make = |b: &BoxDomain, pts: &[usize], what: &str| -> Result<Vec<Axis>> {
            if b.dim() != pts.len() {
                return Err(Error::InvalidGrid(format!(
                    "{what} box has {} dimensions but {} point counts were given",
                    b.dim(),
                    pts.len()
                )));
            }
            b.intervals().iter().zip(pts).map(|(iv, &p)| Axis::new(iv.lower, iv.upper, p)).collect()
        };
        Self::new(make(state_box, state_points, "state")?, make(action_box, action_points, "action")?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_axes.is_empty() || self.action_axes.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one state and one action axis".into()));
        }
        self.state_axes.iter().chain(&self.action_axes).try_for_each(Axis::validate)
    }

    pub fn state_dim(&self) -> usize {
        self.state_axes.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_axes.len()
    }

    pub fn state_cells(&self) -> usize {
        self.state_axes.iter().map(|a| a.points).product()
    }

    pub fn action_cells(&self) -> usize {
        self.action_axes.iter().map(|a| a.points).product()
    }

    pub fn action_box(&self) -> BoxDomain {
        BoxDomain::new(self.action_axes.iter().map(|a| Interval::new(a.lower, a.upper)).collect())
    }

    pub fn state_box(&self) -> BoxDomain {
        BoxDomain::new(self.state_axes.iter().map(|a| Interval::new(a.lower, a.upper)).collect())
    }

    pub fn state_point(&self, cell: usize) -> Vec<f64> {
        point(&self.state_axes, cell)
    }

    pub fn action_point(&self, cell: usize) -> Vec<f64> {
        point(&self.action_axes, cell)
    }

    /// Nearest state cell, or `None` when `s` lies outside the state box.
    pub fn locate(&self, s: &[f64]) -> Result<Option<usize>> {
        locate(&self.state_axes, s)
    }

    pub fn locate_action(&self, a: &[f64]) -> Result<Option<usize>> {
        locate(&self.action_axes, a)
    }

    /// The (up to `2^n`) state cells at the corners of the grid box
    /// containing `s`. Empty when `s` lies outside the state box.
    pub fn enclosing_states(&self, s: &[f64]) -> Result<Vec<usize>> {
        enclosing(&self.state_axes, s)
    }

    pub fn enclosing_actions(&self, a: &[f64]) -> Result<Vec<usize>> {
        enclosing(&self.action_axes, a)
    }
}

fn enclosing(axes: &[Axis], x: &[f64]) -> Result<Vec<usize>> {
    check_point(axes, x)?;
    let mut cells = vec![0usize];
    for (axis, &v) in axes.iter().zip(x) {
        let Some((lo, hi)) = axis.bracket(v) else {
            return Ok(Vec::new());
        };
        let mut next = Vec::with_capacity(cells.len() * 2);
        for &c in &cells {
            next.push(c * axis.points + lo);
            if hi != lo {
                next.push(c * axis.points + hi);
            }
        }
        cells = next;
    }
    Ok(cells)
}

fn check_point(axes: &[Axis], x: &[f64]) -> Result<()> {
    if x.len() != axes.len() {
        return Err(Error::Dimension { expected: axes.len(), got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Row-major: the first axis is the most significant digit.
fn point(axes: &[Axis], mut cell: usize) -> Vec<f64> {
    let mut out = vec![0.0; axes.len()];
    for (d, axis) in axes.iter().enumerate().rev() {
        out[d] = axis.value(cell % axis.points);
        cell /= axis.points;
    }
    out
}

fn locate(axes: &[Axis], x: &[f64]) -> Result<Option<usize>> {
    check_point(axes, x)?;
    let mut cell = 0;
    for (axis, &v) in axes.iter().zip(x) {
        match axis.nearest(v) {
            Some(k) => cell = cell * axis.points + k,
            None => return Ok(None),
        }
    }
    Ok(Some(cell))
}
