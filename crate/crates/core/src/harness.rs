//! Greedy on-policy exploration constrained by the learned estimate `K̂`.
//!
//! Each step executes `OPT(K̂)` at the current state when its slice is
//! nonempty and the fallback action otherwise, observes the transition and
//! rebuilds `K̂`. Episodes start from a uniformly drawn cell of the projection
//! of `K̂` and end on failure or after the step cap; hyperparameters are
//! re-selected at the end of every batch.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::lattice::{GridSpec, Membership, QSet};
use crate::learner::{GpModel, Hyperparameters, LearnerConfig, RefitSchedule, Sample};
use crate::oracle::ViableSets;
use crate::policy::{
    critical_set, direct_check, is_admissible, opt, uniform_action, Cost, NominalPolicy, PolicySampler, SquaredDistance,
};

/// Action taken when the slice of `K̂` at the current state is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    Nominal,
    UniformRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_episodes")]
    pub episodes_per_batch: usize,
    #[serde(default = "default_batches")]
    pub batch_count: usize,
    #[serde(default = "default_steps")]
    pub max_steps_per_episode: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fallback: Fallback,
    #[serde(default)]
    pub membership: Membership,
}

fn default_episodes() -> usize {
    10
}

fn default_batches() -> usize {
    2
}

fn default_steps() -> usize {
    10
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            episodes_per_batch: default_episodes(),
            batch_count: default_batches(),
            max_steps_per_episode: default_steps(),
            seed: 0,
            fallback: Fallback::Nominal,
            membership: Membership::Nearest,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("episodes_per_batch", self.episodes_per_batch),
            ("batch_count", self.batch_count),
            ("max_steps_per_episode", self.max_steps_per_episode),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Result of one exploration decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Exploration {
    pub action: Vec<f64>,
    pub nominal: Vec<f64>,
    pub feasible: bool,
}

/// Cheapest cell of `slice` against `nominal`, ties to the earliest entry.
fn cheapest(grid: &GridSpec, slice: &[usize], nominal: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &j in slice {
        let c = SquaredDistance.cost(&grid.action_point(j), nominal);
        if best.is_none_or(|(_, b)| c < b) {
            best = Some((j, c));
        }
    }
    best.map(|(j, _)| j)
}

/// `π_K̂(s)`: the action in the slice of `khat` at `s` closest to the drawn
/// nominal action, or the fallback when the slice is empty.
pub fn explore_action<R: Rng + ?Sized>(
    khat: &QSet,
    s: &[f64],
    sampler: &mut PolicySampler,
    fallback: Fallback,
    membership: Membership,
    rng: &mut R,
) -> Result<Exploration> {
    let grid = khat.grid();
    let nominal = sampler.draw(grid, s);
    let slice = khat.slice_at(s, membership)?;
    Ok(match cheapest(grid, &slice, &nominal) {
        Some(j) => Exploration { action: grid.action_point(j), nominal, feasible: true },
        None => {
            let action = match fallback {
                Fallback::Nominal => nominal.clone(),
                Fallback::UniformRandom => uniform_action(grid, rng),
            };
            Exploration { action, nominal, feasible: false }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: usize,
    pub step: usize,
    pub state: Vec<f64>,
    pub nominal: Vec<f64>,
    pub action: Vec<f64>,
    pub feasible: bool,
    pub failed: bool,
    /// Final state when alive, first failing substep state otherwise.
    pub next_state: Vec<f64>,
}

impl StepRecord {
    pub fn label(&self) -> f64 {
        if self.failed {
            0.0
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub batch: usize,
    pub initial_cell: usize,
    pub steps: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn failed(&self) -> bool {
        self.steps.last().is_some_and(|s| s.failed)
    }
}

/// The mutable learning state threaded through steps.
#[derive(Clone, Debug)]
pub struct LearnerState {
    pub model: GpModel,
    pub khat: QSet,
    pub threshold: f64,
}

impl LearnerState {
    pub fn new(model: GpModel, grid: Arc<GridSpec>, threshold: f64) -> Self {
        let khat = model.constraint_estimate(grid, threshold);
        Self { model, khat, threshold }
    }

    fn refit(&mut self, model: GpModel) {
        self.khat = model.constraint_estimate(self.khat.grid_arc().clone(), self.threshold);
        self.model = model;
    }
}

/// Everything an episode needs besides the learner state.
pub struct EpisodeContext<'a> {
    pub model: &'a SystemModel,
    pub max_steps: usize,
    pub fallback: Fallback,
    pub membership: Membership,
    pub refit: RefitSchedule,
}

/// Runs one episode from `state0`, updating `learner` in place.
pub fn run_episode<R: Rng + ?Sized>(
    ctx: &EpisodeContext<'_>,
    episode: usize,
    state0: Vec<f64>,
    sampler: &mut PolicySampler,
    learner: &mut LearnerState,
    rng: &mut R,
) -> Result<Vec<StepRecord>> {
    let mut steps = Vec::with_capacity(ctx.max_steps);
    let mut pending = Vec::new();
    let mut s = state0;
    for step in 0..ctx.max_steps {
        let e = explore_action(&learner.khat, &s, sampler, ctx.fallback, ctx.membership, rng)?;
        let outcome = ctx.model.step(&s, &e.action)?;
        match ctx.refit {
            RefitSchedule::PerSample => {
                let model = learner.model.observe(&s, &e.action, &outcome)?;
                learner.refit(model);
            }
            RefitSchedule::PerEpisode => {
                pending.push(Sample::new(s.clone(), e.action.clone(), if outcome.is_failed() { 0.0 } else { 1.0 }));
            }
        }
        let failed = outcome.is_failed();
        let next = outcome.state().to_vec();
        steps.push(StepRecord {
            episode,
            step,
            state: s,
            nominal: e.nominal,
            action: e.action,
            feasible: e.feasible,
            failed,
            next_state: next.clone(),
        });
        if failed {
            break;
        }
        s = next;
    }
    if !pending.is_empty() {
        let model = learner.model.with_samples(pending)?;
        learner.refit(model);
    }
    Ok(steps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    /// Hyperparameters in force after the end-of-batch search.
    pub hyperparameters: Hyperparameters,
    /// Index of the selected candidate; `None` if every candidate failed.
    pub selected: Option<usize>,
    pub log_marginal_likelihood: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub episodes: Vec<EpisodeLog>,
    pub batches: Vec<BatchRecord>,
    pub initial_hyperparameters: Hyperparameters,
    pub khat_initial: QSet,
    pub khat_final: QSet,
    pub final_model: GpModel,
}

impl RunRecord {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.episodes.iter().flat_map(|e| &e.steps)
    }

    pub fn sample_count(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn failure_count(&self) -> usize {
        self.steps().filter(|s| s.failed).count()
    }
}

/// A complete learning problem.
pub struct Experiment<'a> {
    pub model: &'a SystemModel,
    pub grid: Arc<GridSpec>,
    pub policy: &'a NominalPolicy,
    pub learner: &'a LearnerConfig,
    pub config: &'a ExperimentConfig,
}

impl Experiment<'_> {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.grid.validate()?;
        self.policy.validate(&self.grid)?;
        self.learner.validate(&self.grid)?;
        if self.model.state_dim() != self.grid.state_dim() || self.model.action_dim() != self.grid.action_dim() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    pub fn run(&self) -> Result<RunRecord> {
        self.validate()?;
        let cfg = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sampler = self.policy.sampler();
        let initial = self.learner.initial_model(&self.grid, self.policy)?;
        let mut learner = LearnerState::new(initial, self.grid.clone(), self.learner.threshold);
        let khat_initial = learner.khat.clone();
        let ctx = EpisodeContext {
            model: self.model,
            max_steps: cfg.max_steps_per_episode,
            fallback: cfg.fallback,
            membership: cfg.membership,
            refit: self.learner.refit,
        };

        let mut episodes = Vec::new();
        let mut batches = Vec::new();
        for batch in 0..cfg.batch_count {
            for k in 0..cfg.episodes_per_batch {
                let episode = batch * cfg.episodes_per_batch + k;
                let starts: Vec<usize> = learner.khat.project().members().collect();
                if starts.is_empty() {
                    return Err(Error::EmptyProjection { batch, episode });
                }
                let initial_cell = starts[rng.random_range(0..starts.len())];
                let state0 = self.grid.state_point(initial_cell);
                let steps = run_episode(&ctx, episode, state0, &mut sampler, &mut learner, &mut rng)?;
                log::debug!("episode {episode}: {} steps, failed = {}", steps.len(), steps.last().is_some_and(|s| s.failed));
                episodes.push(EpisodeLog { episode, batch, initial_cell, steps });
            }
            let (selected, model) = if learner.model.samples().len() >= 2 {
                let search = learner.model.update_hyperparameters(&self.learner.search_grid)?;
                (search.selected, search.model)
            } else {
                (None, learner.model.clone())
            };
            learner.refit(model);
            log::info!("batch {batch}: hyperparameters {:?}", learner.model.hyperparameters());
            batches.push(BatchRecord {
                batch,
                hyperparameters: learner.model.hyperparameters().clone(),
                selected,
                log_marginal_likelihood: learner.model.log_marginal_likelihood(),
            });
        }
        Ok(RunRecord {
            episodes,
            batches,
            initial_hyperparameters: self.learner.hyperparameters.clone(),
            khat_initial,
            khat_final: learner.khat,
            final_model: learner.model,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub sample_count: usize,
    pub failure_count: usize,
    /// Percent of the action range; absent for stochastic nominal policies.
    pub deviation_max: Option<f64>,
    pub deviation_mean: Option<f64>,
    /// Percent of `Q_V` missing from `K̂`.
    pub underestimate: f64,
    /// Percent of `Q_crit` included in `K̂`.
    pub overreach: f64,
    pub khat_count: usize,
    pub viable_count: usize,
    pub critical_count: usize,
    pub overreach_count: usize,
}

/// Per-kernel-cell deviation of `OPT(K̂)` from `OPT(Q_V)`, as a percentage of
/// the action range (largest over action dimensions). Cells where `K̂` is
/// infeasible use the nominal action.
pub fn deviations(khat: &QSet, oracle: &impl ViableSets, pi: &NominalPolicy) -> Result<Vec<f64>> {
    let viable = oracle.viable();
    khat.check_grid(viable.grid())?;
    if !pi.is_deterministic() {
        return Err(Error::StochasticPolicy);
    }
    let grid = viable.grid();
    let ranges: Vec<f64> = grid.action_box().intervals().iter().map(|iv| iv.width()).collect();
    Ok(oracle
        .kernel()
        .members()
        .map(|i| {
            let nominal = pi.action(grid, &grid.state_point(i)).expect("deterministic");
            let best = grid.action_point(opt(viable, i, &nominal).expect("kernel cells have viable actions"));
            let ours = opt(khat, i, &nominal).map_or(nominal, |j| grid.action_point(j));
            ours.iter()
                .zip(&best)
                .zip(&ranges)
                .map(|((a, b), r)| (a - b).abs() / r * 100.0)
                .fold(0.0, f64::max)
        })
        .collect())
}

pub fn compute_metrics(
    khat: &QSet,
    oracle: &impl ViableSets,
    pi: &NominalPolicy,
    sample_count: usize,
    failure_count: usize,
) -> Result<Metrics> {
    let viable = oracle.viable();
    khat.check_grid(viable.grid())?;
    let (deviation_max, deviation_mean) = if pi.is_deterministic() && !oracle.kernel().is_empty() {
        let d = deviations(khat, oracle, pi)?;
        (Some(d.iter().copied().fold(0.0, f64::max)), Some(d.iter().sum::<f64>() / d.len() as f64))
    } else {
        (None, None)
    };
    let crit = critical_set(oracle, pi)?;
    let missing = viable.difference(khat)?.count();
    let overreach_count = khat.intersect(&crit)?.count();
    let viable_count = viable.count();
    Ok(Metrics {
        sample_count,
        failure_count,
        deviation_max,
        deviation_mean,
        underestimate: if viable_count == 0 { 0.0 } else { missing as f64 / viable_count as f64 * 100.0 },
        overreach: overreach_count as f64 / crit.count().max(1) as f64 * 100.0,
        khat_count: khat.count(),
        viable_count,
        critical_count: crit.count(),
        overreach_count,
    })
}

/// Metrics plus the admissibility verdict of a constraint estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub admissible: bool,
    pub missing_optimal: usize,
    pub critical_included: usize,
    /// Whether `OPT(K̂)` equals `OPT(Q_V)` on every kernel cell; absent for
    /// stochastic nominal policies.
    pub policy_matches: Option<bool>,
}

pub fn evaluate(
    khat: &QSet,
    oracle: &impl ViableSets,
    pi: &NominalPolicy,
    sample_count: usize,
    failure_count: usize,
) -> Result<Evaluation> {
    let metrics = compute_metrics(khat, oracle, pi, sample_count, failure_count)?;
    let verdict = is_admissible(khat, oracle, pi)?;
    let policy_matches = if pi.is_deterministic() { Some(direct_check(khat, oracle, pi)?.equal) } else { None };
    Ok(Evaluation {
        metrics,
        admissible: verdict.admissible,
        missing_optimal: verdict.missing_optimal.len(),
        critical_included: verdict.critical_included.len(),
        policy_matches,
    })
}

impl Evaluation {
    /// An admissible estimate must reproduce `OPT(Q_V)` exactly.
    pub fn check_greedy_sufficiency(&self) -> Result<()> {
        if self.admissible && self.metrics.deviation_max.is_some_and(|d| d != 0.0) {
            return Err(Error::Precondition(format!(
                "admissible constraint estimate deviates from the optimal policy by up to {}%",
                self.metrics.deviation_max.unwrap_or_default()
            )));
        }
        Ok(())
    }
}
