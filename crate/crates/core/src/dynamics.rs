//! Discrete-time dynamics obtained by integrating a continuous vector field
//! under a zero-order hold.
//!
//! A [`SystemModel`] bundles the vector field with its state and action boxes,
//! the hold duration and the failure predicate. [`SystemModel::step`] is the
//! transition map used everywhere else in the crate; it checks the failure
//! predicate after every integration substep so that a trajectory cannot pass
//! through the failure set in the middle of a hold.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continuous-time dynamics `ds/dt = f(s, a)`, written into the output slice.
pub type VectorField = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Closed interval `[lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.max(self.lower).min(self.upper)
    }
}

/// Axis-aligned box in `R^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoxDomain(pub Vec<Interval>);

impl BoxDomain {
    pub fn new(intervals: Vec<Interval>) -> Self {
        Self(intervals)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.0
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.0.len() && self.0.iter().zip(x).all(|(iv, &v)| iv.contains(v))
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (iv, v) in self.0.iter().zip(x.iter_mut()) {
            *v = iv.clamp(*v);
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidModel(format!("{what} has no dimensions")));
        }
        for (d, iv) in self.0.iter().enumerate() {
            if !iv.lower.is_finite() || !iv.upper.is_finite() {
                return Err(Error::InvalidModel(format!("{what}[{d}] has a non-finite bound")));
            }
            if iv.lower > iv.upper {
                return Err(Error::InvalidModel(format!(
                    "{what}[{d}] is empty ({} > {})",
                    iv.lower, iv.upper
                )));
            }
        }
        Ok(())
    }
}

/// Which states count as failed. Every variant is total on `R^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FailureSpec {
    /// Anything outside the model's state box has failed.
    OutsideStateBox,
    /// Anything outside the given box has failed.
    OutsideBox { bounds: BoxDomain },
    /// Nothing ever fails.
    Never,
}

/// Result of one zero-order-hold transition.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Alive(Vec<f64>),
    /// First substep state that satisfied the failure predicate.
    Failed(Vec<f64>),
}

impl StepOutcome {
    pub fn is_failed(&self) -> bool {
        matches!(self, StepOutcome::Failed(_))
    }

    pub fn state(&self) -> &[f64] {
        match self {
            StepOutcome::Alive(s) | StepOutcome::Failed(s) => s,
        }
    }
}

#[derive(Clone)]
pub struct SystemModel {
    name: String,
    state_box: BoxDomain,
    action_box: BoxDomain,
    field: VectorField,
    hold_duration: f64,
    substep: f64,
    substeps_per_hold: usize,
    failure: FailureSpec,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("state_box", &self.state_box)
            .field("action_box", &self.action_box)
            .field("hold_duration", &self.hold_duration)
            .field("substep", &self.substep)
            .field("failure", &self.failure)
            .finish_non_exhaustive()
    }
}

/// Relative tolerance when checking that the substep divides the hold.
const DIVISIBILITY_TOL: f64 = 1e-9;

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        state_box: BoxDomain,
        action_box: BoxDomain,
        field: VectorField,
        hold_duration: f64,
        substep: f64,
        failure: FailureSpec,
    ) -> Result<Self> {
        state_box.validate("state_box")?;
        action_box.validate("action_box")?;
        if !(hold_duration.is_finite() && hold_duration > 0.0) {
            return Err(Error::InvalidModel(format!(
                "hold_duration must be positive, got {hold_duration}"
            )));
        }
        if !(substep.is_finite() && substep > 0.0) {
            return Err(Error::InvalidModel(format!("substep must be positive, got {substep}")));
        }
        let ratio = hold_duration / substep;
        let substeps = ratio.round();
        if substeps < 1.0 || (ratio - substeps).abs() > DIVISIBILITY_TOL * ratio.max(1.0) {
            return Err(Error::InvalidModel(format!(
                "substep {substep} does not divide hold_duration {hold_duration}"
            )));
        }
        if let FailureSpec::OutsideBox { bounds } = &failure {
            bounds.validate("failure.bounds")?;
            if bounds.dim() != state_box.dim() {
                return Err(Error::InvalidModel("failure box dimension differs from state box".into()));
            }
        }
        Ok(Self {
            name: name.into(),
            state_box,
            action_box,
            field,
            hold_duration,
            substep,
            substeps_per_hold: substeps as usize,
            failure,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_box(&self) -> &BoxDomain {
        &self.state_box
    }

    pub fn action_box(&self) -> &BoxDomain {
        &self.action_box
    }

    pub fn state_dim(&self) -> usize {
        self.state_box.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_box.dim()
    }

    pub fn hold_duration(&self) -> f64 {
        self.hold_duration
    }

    pub fn substep(&self) -> f64 {
        self.substep
    }

    pub fn failure(&self) -> &FailureSpec {
        &self.failure
    }

    /// Same model with a different integration substep.
    pub fn with_substep(&self, substep: f64) -> Result<Self> {
        Self::new(
            self.name.clone(),
            self.state_box.clone(),
            self.action_box.clone(),
            self.field.clone(),
            self.hold_duration,
            substep,
            self.failure.clone(),
        )
    }

    pub fn vector_field(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; s.len()];
        (self.field)(s, a, &mut out);
        out
    }

    pub fn is_failure(&self, s: &[f64]) -> bool {
        match &self.failure {
            FailureSpec::OutsideStateBox => !self.state_box.contains(s),
            FailureSpec::OutsideBox { bounds } => !bounds.contains(s),
            FailureSpec::Never => false,
        }
    }

    fn check_inputs(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim() {
            return Err(Error::Dimension { expected: self.state_dim(), got: s.len() });
        }
        if a.len() != self.action_dim() {
            return Err(Error::Dimension { expected: self.action_dim(), got: a.len() });
        }
        if s.iter().chain(a).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if !self.action_box.contains(a) {
            return Err(Error::Precondition(format!("action {a:?} outside the action box")));
        }
        Ok(())
    }

    /// Integrates the held action `a` from `s` for `duration` seconds with
    /// fixed-step RK4. A trailing partial step covers any remainder.
    pub fn flow(&self, s: &[f64], a: &[f64], duration: f64) -> Result<Vec<f64>> {
        self.check_inputs(s, a)?;
        if !(duration >= 0.0 && duration.is_finite()) {
            return Err(Error::Precondition(format!("duration must be non-negative, got {duration}")));
        }
        let mut rk = Rk4::new(s.len());
        let mut x = s.to_vec();
        let ratio = duration / self.substep;
        let mut full = ratio.round();
        if (ratio - full).abs() > DIVISIBILITY_TOL * ratio.max(1.0) {
            full = ratio.floor();
        }
        let full = full as usize;
        let rest = duration - full as f64 * self.substep;
        let mut elapsed = 0.0;
        for _ in 0..full {
            rk.advance(&self.field, &mut x, a, self.substep);
            elapsed += self.substep;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { elapsed });
            }
        }
        if rest > DIVISIBILITY_TOL * self.substep {
            rk.advance(&self.field, &mut x, a, rest);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { elapsed: duration });
            }
        }
        Ok(x)
    }

    /// One transition `T(s, a)`: integrate for one hold, checking the failure
    /// predicate after each substep.
    pub fn step(&self, s: &[f64], a: &[f64]) -> Result<StepOutcome> {
        self.check_inputs(s, a)?;
        if self.is_failure(s) {
            return Err(Error::StartInFailure);
        }
        let mut rk = Rk4::new(s.len());
        let mut x = s.to_vec();
        for k in 0..self.substeps_per_hold {
            rk.advance(&self.field, &mut x, a, self.substep);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { elapsed: (k + 1) as f64 * self.substep });
            }
            if self.is_failure(&x) {
                return Ok(StepOutcome::Failed(x));
            }
        }
        Ok(StepOutcome::Alive(x))
    }
}

/// Scratch buffers for one classical Runge-Kutta step.
struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn advance(&mut self, f: &VectorField, x: &mut [f64], a: &[f64], h: f64) {
        let n = x.len();
        f(x, a, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        f(&self.tmp, a, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        f(&self.tmp, a, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        f(&self.tmp, a, &mut self.k4);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// A named vector field from the builtin registry. `None` dimensions accept
/// any size (the field acts elementwise).
#[derive(Clone)]
pub struct BuiltinField {
    pub name: &'static str,
    pub state_dim: Option<usize>,
    pub action_dim: Option<usize>,
    pub field: VectorField,
}

/// Default integration substep in seconds.
pub const DEFAULT_SUBSTEP: f64 = 0.01;

/// Looks up a vector field by name.
///
/// * `hovership`: `ds/dt = a - 0.1 - tanh(0.75 s)`, 1-D state and action.
/// * `zero`: `ds/dt = 0`, any dimension.
/// * `sink`: `ds/dt = -5` in every state dimension.
/// * `double_integrator`: `(x, v)' = (v, a)`.
pub fn builtin_field(name: &str) -> Option<BuiltinField> {
    let entry = match name {
        "hovership" => BuiltinField {
            name: "hovership",
            state_dim: Some(1),
            action_dim: Some(1),
            field: Arc::new(|s: &[f64], a: &[f64], out: &mut [f64]| {
                out[0] = a[0] - 0.1 - (0.75 * s[0]).tanh();
            }),
        },
        "zero" => BuiltinField {
            name: "zero",
            state_dim: None,
            action_dim: None,
            field: Arc::new(|_: &[f64], _: &[f64], out: &mut [f64]| out.fill(0.0)),
        },
        "sink" => BuiltinField {
            name: "sink",
            state_dim: None,
            action_dim: None,
            field: Arc::new(|_: &[f64], _: &[f64], out: &mut [f64]| out.fill(-5.0)),
        },
        "double_integrator" => BuiltinField {
            name: "double_integrator",
            state_dim: Some(2),
            action_dim: Some(1),
            field: Arc::new(|s: &[f64], a: &[f64], out: &mut [f64]| {
                out[0] = s[1];
                out[1] = a[0];
            }),
        },
        _ => return None,
    };
    Some(entry)
}

pub fn builtin_field_names() -> &'static [&'static str] {
    &["hovership", "zero", "sink", "double_integrator"]
}

/// The hovership benchmark: state in `[0, 2]`, thrust in `[0, 0.8]`, one
/// second hold, failure when leaving the state box.
pub fn hovership_model() -> SystemModel {
    let builtin = builtin_field("hovership").expect("hovership is registered");
    SystemModel::new(
        "hovership",
        BoxDomain::new(vec![Interval::new(0.0, 2.0)]),
        BoxDomain::new(vec![Interval::new(0.0, 0.8)]),
        builtin.field,
        1.0,
        DEFAULT_SUBSTEP,
        FailureSpec::OutsideStateBox,
    )
    .expect("hovership parameters are valid")
}

/// Builtin models selectable by name. The 1-D test fields reuse the
/// hovership boxes; the double integrator lives on `[-1, 1]^2 x [-1, 1]`.
pub fn builtin_model(name: &str) -> Option<SystemModel> {
    let unit = || Interval::new(-1.0, 1.0);
    let (state_box, action_box) = match name {
        "hovership" => return Some(hovership_model()),
        "zero" | "sink" => (vec![Interval::new(0.0, 2.0)], vec![Interval::new(0.0, 0.8)]),
        "double_integrator" => (vec![unit(), unit()], vec![unit()]),
        _ => return None,
    };
    let builtin = builtin_field(name)?;
    SystemModel::new(
        name,
        BoxDomain::new(state_box),
        BoxDomain::new(action_box),
        builtin.field,
        1.0,
        DEFAULT_SUBSTEP,
        FailureSpec::OutsideStateBox,
    )
    .ok()
}
