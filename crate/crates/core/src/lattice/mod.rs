//! Boolean lattices over regular state and state-action grids.

mod encode;
mod grid;
mod sets;

pub use encode::{qset_csv, qset_from_json, qset_to_json, sset_csv, sset_from_json, sset_to_json, SetDocument, SetKind, SetMeta};
pub use grid::{Axis, GridSpec};
pub use sets::{QSet, SSet};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How a continuous point is matched against grid membership.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    /// Membership of the nearest grid point.
    #[default]
    Nearest,
    /// Every corner of the enclosing grid box must be a member.
    Conservative,
}

impl QSet {
    /// Action cells available at the continuous state `s`. Empty outside the
    /// state box.
    pub fn slice_at(&self, s: &[f64], mode: Membership) -> Result<Vec<usize>> {
        match mode {
            Membership::Nearest => Ok(match self.grid().locate(s)? {
                Some(cell) => self.action_slice(cell),
                None => Vec::new(),
            }),
            Membership::Conservative => {
                let corners = self.grid().enclosing_states(s)?;
                if corners.is_empty() {
                    return Ok(Vec::new());
                }
                Ok((0..self.grid().action_cells())
                    .filter(|&j| corners.iter().all(|&i| self.contains(i, j)))
                    .collect())
            }
        }
    }

    /// Membership of the continuous pair `(s, a)`.
    pub fn contains_point(&self, s: &[f64], a: &[f64], mode: Membership) -> Result<bool> {
        match mode {
            Membership::Nearest => {
                let (Some(i), Some(j)) = (self.grid().locate(s)?, self.grid().locate_action(a)?) else {
                    return Ok(false);
                };
                Ok(self.contains(i, j))
            }
            Membership::Conservative => {
                let states = self.grid().enclosing_states(s)?;
                let actions = self.grid().enclosing_actions(a)?;
                if states.is_empty() || actions.is_empty() {
                    return Ok(false);
                }
                Ok(states.iter().all(|&i| actions.iter().all(|&j| self.contains(i, j))))
            }
        }
    }
}
