//! JSON run configuration.
//!
//! Only the model is required. Everything else has a documented default:
//! a 201 x 161 grid for the hovership, the affine nominal `a = 0.7 - 0.3 s`,
//! the GP learner seeded on the nominal graph, and two batches of ten
//! episodes of at most ten steps.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dynamics::{builtin_field, builtin_model, BoxDomain, FailureSpec, Interval, SystemModel, DEFAULT_SUBSTEP};
use crate::harness::ExperimentConfig;
use crate::lattice::GridSpec;
use crate::learner::{search_grid, Hyperparameters, LearnerConfig, RefitSchedule, SeedRegion};
use crate::policy::NominalPolicy;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("range violation at {path}: {message}")]
    Range { path: String, message: String },
}

impl ConfigError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            ConfigError::Io { .. } => 3,
            ConfigError::Parse { .. } => 4,
            ConfigError::Schema { .. } => 5,
            ConfigError::Range { .. } => 6,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ConfigError::Io { .. } => "config-io",
            ConfigError::Parse { .. } => "config-parse",
            ConfigError::Schema { .. } => "config-schema",
            ConfigError::Range { .. } => "config-range",
        }
    }
}

fn schema(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema { path: path.into(), message: message.into() }
}

fn range(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Range { path: path.into(), message: message.into() }
}

/// Model given inline instead of by builtin name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineModel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// One `[lower, upper]` pair per dimension.
    pub state_box: Vec<[f64; 2]>,
    pub action_box: Vec<[f64; 2]>,
    /// Name of a builtin vector field.
    pub vector_field: String,
    pub hold_duration: f64,
    #[serde(default = "default_substep")]
    pub substep: f64,
    #[serde(default = "default_failure")]
    pub failure: FailureSpec,
}

fn default_substep() -> f64 {
    DEFAULT_SUBSTEP
}

fn default_failure() -> FailureSpec {
    FailureSpec::OutsideStateBox
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Builtin(String),
    Inline(InlineModel),
}

impl ModelSpec {
    pub fn build(&self) -> Result<SystemModel, ConfigError> {
        match self {
            ModelSpec::Builtin(name) => builtin_model(name).ok_or_else(|| schema("model", format!("unknown builtin model `{name}`"))),
            ModelSpec::Inline(m) => {
                let field = builtin_field(&m.vector_field)
                    .ok_or_else(|| schema("model.vector_field", format!("unknown vector field `{}`", m.vector_field)))?;
                let boxes = |pairs: &[[f64; 2]], what: &str| -> Result<BoxDomain, ConfigError> {
                    if pairs.is_empty() {
                        return Err(range(&format!("model.{what}"), "needs at least one dimension"));
                    }
                    for (d, [lo, hi]) in pairs.iter().enumerate() {
                        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                            return Err(range(&format!("model.{what}[{d}]"), format!("[{lo}, {hi}] is not a finite nonempty interval")));
                        }
                    }
                    Ok(BoxDomain::new(pairs.iter().map(|[lo, hi]| Interval::new(*lo, *hi)).collect()))
                };
                let state_box = boxes(&m.state_box, "state_box")?;
                let action_box = boxes(&m.action_box, "action_box")?;
                if field.state_dim.is_some_and(|n| n != state_box.dim()) || field.action_dim.is_some_and(|n| n != action_box.dim()) {
                    return Err(schema("model.vector_field", format!("`{}` does not match the box dimensions", m.vector_field)));
                }
                if !(m.hold_duration.is_finite() && m.hold_duration > 0.0) {
                    return Err(range("model.hold_duration", format!("must be positive, got {}", m.hold_duration)));
                }
                if !(m.substep.is_finite() && m.substep > 0.0) {
                    return Err(range("model.substep", format!("must be positive, got {}", m.substep)));
                }
                let name = m.name.clone().unwrap_or_else(|| m.vector_field.clone());
                SystemModel::new(&name, state_box, action_box, field.field, m.hold_duration, m.substep, m.failure.clone())
                    .map_err(|e| range("model", e.to_string()))
            }
        }
    }

    fn builtin_name(&self) -> Option<&str> {
        match self {
            ModelSpec::Builtin(name) => Some(name),
            ModelSpec::Inline(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Points per state dimension; the axes span the state box.
    pub state_points: Vec<usize>,
    /// Points per action dimension; the axes span the action box.
    pub action_points: Vec<usize>,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Config {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub grid: GridConfig,
    pub policy: NominalPolicy,
    pub learner: LearnerConfig,
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
}

/// Top level with every section still undecoded, so that section errors
/// can name their path.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    schema_version: Option<u32>,
    #[serde(default)]
    model: Value,
    #[serde(default)]
    grid: Value,
    #[serde(default)]
    policy: Value,
    #[serde(default)]
    learner: Value,
    #[serde(default)]
    experiment: Value,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLearner {
    threshold: Option<f64>,
    prior_mean: Option<f64>,
    hyperparameters: Option<Hyperparameters>,
    seed_region: Option<SeedRegion>,
    search_grid: Option<Vec<Hyperparameters>>,
    #[serde(default)]
    refit: RefitSchedule,
}

/// Search grid used when the config gives none: lengthscales
/// {0.1, 0.2, 0.4, 0.8} per state dimension and {0.05, 0.1, 0.2, 0.4} per
/// action dimension, unit signal variance, noise 1e-4.
pub fn default_search_grid(state_dim: usize, action_dim: usize) -> Vec<Hyperparameters> {
    let mut per_dim = vec![vec![0.1, 0.2, 0.4, 0.8]; state_dim];
    per_dim.extend(std::iter::repeat_n(vec![0.05, 0.1, 0.2, 0.4], action_dim));
    search_grid(&per_dim, &[1.0], &[1e-4])
}

pub fn default_hyperparameters(state_dim: usize, action_dim: usize) -> Hyperparameters {
    let mut ls = vec![0.2; state_dim];
    ls.extend(std::iter::repeat_n(0.1, action_dim));
    Hyperparameters::new(ls, 1.0, 1e-4)
}

fn json_error(e: serde_json::Error, path: &str) -> ConfigError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Syntax | Category::Eof | Category::Io => {
            ConfigError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
        }
        Category::Data => schema(path, e.to_string()),
    }
}

fn section<T: for<'de> Deserialize<'de>>(value: Value, path: &str) -> Result<T, ConfigError> {
    serde_json::from_value(value).map_err(|e| json_error(e, path))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| json_error(e, "$"))?;
        if !value.is_object() {
            return Err(schema("$", "top level must be an object"));
        }
        Self::resolve(section(value, "$")?)
    }

    fn resolve(raw: RawConfig) -> Result<Self, ConfigError> {
        let schema_version = raw.schema_version.unwrap_or(CONFIG_SCHEMA_VERSION);
        if schema_version != CONFIG_SCHEMA_VERSION {
            return Err(schema("schema_version", format!("unsupported version {schema_version}")));
        }
        let model = match raw.model {
            Value::Null => return Err(schema("model", "missing required key")),
            Value::String(name) => ModelSpec::Builtin(name),
            v @ Value::Object(_) => ModelSpec::Inline(section(v, "model")?),
            _ => return Err(schema("model", "expected a builtin name or an object")),
        };
        let system = model.build()?;
        let (n, m) = (system.state_dim(), system.action_dim());
        let hovership = model.builtin_name() == Some("hovership");

        let grid = optional::<GridConfig>(raw.grid, "grid")?
            .unwrap_or_else(|| GridConfig { state_points: vec![201; n], action_points: vec![161; m] });
        let policy = match optional(raw.policy, "policy")? {
            Some(p) => p,
            None if hovership => NominalPolicy::affine_1d(0.7, -0.3),
            None => return Err(schema("policy", "required for models other than the hovership")),
        };

        let raw_learner = optional(raw.learner, "learner")?.unwrap_or(RawLearner {
            threshold: None,
            prior_mean: None,
            hyperparameters: None,
            seed_region: None,
            search_grid: None,
            refit: RefitSchedule::PerSample,
        });
        let seed_region = match raw_learner.seed_region {
            Some(r) => r,
            None if policy.is_deterministic() => SeedRegion::PolicyGraph {
                operating_point: if hovership {
                    vec![0.6]
                } else {
                    system.state_box().intervals().iter().map(|iv| 0.5 * (iv.lower + iv.upper)).collect()
                },
                half_width: 0.1,
                points_per_dim: 5,
                policy: None,
            },
            None => return Err(schema("learner.seed_region", "required when the nominal policy is stochastic")),
        };
        let learner = LearnerConfig {
            threshold: raw_learner.threshold.unwrap_or(0.5),
            prior_mean: raw_learner.prior_mean.unwrap_or(0.0),
            hyperparameters: raw_learner.hyperparameters.unwrap_or_else(|| default_hyperparameters(n, m)),
            seed_region,
            search_grid: raw_learner.search_grid.unwrap_or_else(|| default_search_grid(n, m)),
            refit: raw_learner.refit,
        };

        let config = Config {
            schema_version,
            model,
            grid,
            policy,
            learner,
            experiment: optional(raw.experiment, "experiment")?.unwrap_or_default(),
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out")),
        };
        config.check_ranges(&system)?;
        Ok(config)
    }

    fn check_ranges(&self, system: &SystemModel) -> Result<(), ConfigError> {
        let (n, m) = (system.state_dim(), system.action_dim());
        if self.grid.state_points.len() != n || self.grid.action_points.len() != m {
            return Err(schema("grid", format!("expected {n} state and {m} action point counts")));
        }
        for (what, points) in [("state_points", &self.grid.state_points), ("action_points", &self.grid.action_points)] {
            if let Some(d) = points.iter().position(|&p| p < 2) {
                return Err(range(&format!("grid.{what}[{d}]"), "needs at least 2 points"));
            }
        }
        let grid = self.grid_spec(system).map_err(|e| range("grid", e.to_string()))?;
        self.policy.validate(&grid).map_err(|e| range("policy", e.to_string()))?;

        let l = &self.learner;
        if !(l.threshold > 0.0 && l.threshold < 1.0) {
            return Err(range("learner.threshold", format!("must lie strictly between 0 and 1, got {}", l.threshold)));
        }
        if !l.prior_mean.is_finite() {
            return Err(range("learner.prior_mean", "must be finite"));
        }
        l.hyperparameters.validate(n + m).map_err(|e| range("learner.hyperparameters", e.to_string()))?;
        if l.search_grid.is_empty() {
            return Err(range("learner.search_grid", "must not be empty"));
        }
        for (k, h) in l.search_grid.iter().enumerate() {
            h.validate(n + m).map_err(|e| range(&format!("learner.search_grid[{k}]"), e.to_string()))?;
        }
        if let SeedRegion::PolicyGraph { half_width, points_per_dim, .. } = &l.seed_region {
            if !(half_width.is_finite() && *half_width >= 0.0) {
                return Err(range("learner.seed_region.half_width", "must be finite and non-negative"));
            }
            if *points_per_dim == 0 {
                return Err(range("learner.seed_region.points_per_dim", "must be at least 1"));
            }
        }
        l.seed_region.samples(&grid, &self.policy).map_err(|e| range("learner.seed_region", e.to_string()))?;

        let e = &self.experiment;
        for (what, v) in [
            ("episodes_per_batch", e.episodes_per_batch),
            ("batch_count", e.batch_count),
            ("max_steps_per_episode", e.max_steps_per_episode),
        ] {
            if v == 0 {
                return Err(range(&format!("experiment.{what}"), "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn system(&self) -> Result<SystemModel, ConfigError> {
        self.model.build()
    }

    pub fn grid_spec(&self, system: &SystemModel) -> crate::Result<Arc<GridSpec>> {
        GridSpec::over_boxes(system.state_box(), &self.grid.state_points, system.action_box(), &self.grid.action_points)
            .map(Arc::new)
    }

    /// Applies a seed override to the experiment and any random policy.
    pub fn override_seed(&mut self, seed: u64) {
        self.experiment.seed = seed;
        if let NominalPolicy::UniformRandom { seed: s } = &mut self.policy {
            *s = seed;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }
}

fn optional<T: for<'de> Deserialize<'de>>(value: Value, path: &str) -> Result<Option<T>, ConfigError> {
    if value.is_null() {
        Ok(None)
    } else {
        section(value, path).map(Some)
    }
}
