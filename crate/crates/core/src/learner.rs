//! Gaussian-process estimate of the constraint set.
//!
//! Every observed transition becomes a sample labelled 1 (survived) or 0
//! (failed). The estimate `K̂` is the set of grid pairs whose posterior mean
//! reaches the threshold. Exact GP regression with a squared-exponential
//! kernel over the concatenated (state, action) input.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::StepOutcome;
use crate::error::{Error, Result};
use crate::lattice::{GridSpec, QSet};
use crate::policy::NominalPolicy;

use std::sync::Arc;

/// Jitter added to the diagonal, tried in order until factorization succeeds.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub label: f64,
}

impl Sample {
    pub fn new(state: Vec<f64>, action: Vec<f64>, label: f64) -> Self {
        Self { state, action, label }
    }

    fn input(&self) -> impl Iterator<Item = f64> + '_ {
        self.state.iter().chain(&self.action).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    /// State dimensions first, then action dimensions.
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Hyperparameters {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Self {
        Self { lengthscales, signal_variance, noise_variance }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.lengthscales.len() != input_dim {
            return Err(Error::Dimension { expected: input_dim, got: self.lengthscales.len() });
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self.lengthscales.iter().all(|&l| positive(l)) {
            return Err(Error::Config("lengthscales must be positive".into()));
        }
        if !positive(self.signal_variance) || !positive(self.noise_variance) {
            return Err(Error::Config("signal and noise variances must be positive".into()));
        }
        Ok(())
    }
}

/// A fitted GP regressor. Immutable: `observe` and friends return new models.
#[derive(Clone, Debug)]
pub struct GpModel {
    samples: Vec<Sample>,
    hyper: Hyperparameters,
    prior_mean: f64,
    state_dim: usize,
    /// Training inputs divided by the lengthscales.
    scaled: Vec<Vec<f64>>,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    jitter: f64,
    log_marginal_likelihood: f64,
}

impl GpModel {
    /// Exact GP fit. `state_dim` splits each input into its state and action
    /// parts.
    pub fn fit(samples: Vec<Sample>, hyper: Hyperparameters, prior_mean: f64, state_dim: usize, action_dim: usize) -> Result<Self> {
        hyper.validate(state_dim + action_dim)?;
        if !prior_mean.is_finite() {
            return Err(Error::Config("prior mean must be finite".into()));
        }
        for s in &samples {
            if s.state.len() != state_dim || s.action.len() != action_dim {
                return Err(Error::Dimension { expected: state_dim + action_dim, got: s.state.len() + s.action.len() });
            }
            if s.input().chain([s.label]).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite);
            }
        }
        let scaled: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| s.input().zip(&hyper.lengthscales).map(|(x, l)| x / l).collect())
            .collect();
        let n = samples.len();
        if n == 0 {
            return Ok(Self {
                samples,
                hyper,
                prior_mean,
                state_dim,
                scaled,
                chol: None,
                alpha: DVector::zeros(0),
                jitter: 0.0,
                log_marginal_likelihood: 0.0,
            });
        }

        let sf2 = hyper.signal_variance;
        let base = DMatrix::from_fn(n, n, |i, j| sf2 * (-0.5 * sq_dist(&scaled[i], &scaled[j])).exp());
        let y = DVector::from_iterator(n, samples.iter().map(|s| s.label - prior_mean));

        for &jitter in &JITTER_LADDER {
            let mut k = base.clone();
            for i in 0..n {
                k[(i, i)] += hyper.noise_variance + jitter;
            }
            let Some(chol) = Cholesky::new(k) else { continue };
            let alpha = chol.solve(&y);
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let lml = -0.5 * y.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * PI).ln();
            return Ok(Self {
                samples,
                hyper,
                prior_mean,
                state_dim,
                scaled,
                chol: Some(chol),
                alpha,
                jitter,
                log_marginal_likelihood: lml,
            });
        }
        Err(Error::IllConditioned { jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.hyper.lengthscales.len() - self.state_dim
    }

    /// Exact log marginal likelihood of the labels (0 with no samples).
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    fn cross_covariance(&self, s: &[f64], a: &[f64]) -> DVector<f64> {
        let z: Vec<f64> = s.iter().chain(a).zip(&self.hyper.lengthscales).map(|(x, l)| x / l).collect();
        let sf2 = self.hyper.signal_variance;
        DVector::from_iterator(self.scaled.len(), self.scaled.iter().map(|x| sf2 * (-0.5 * sq_dist(&z, x)).exp()))
    }

    /// Predictive mean and latent variance at `(s, a)`.
    pub fn posterior(&self, s: &[f64], a: &[f64]) -> (f64, f64) {
        let Some(chol) = &self.chol else {
            return (self.prior_mean, self.hyper.signal_variance);
        };
        let kstar = self.cross_covariance(s, a);
        let mean = self.prior_mean + kstar.dot(&self.alpha);
        let v = chol.l_dirty().solve_lower_triangular(&kstar).expect("factor is nonsingular");
        let var = (self.hyper.signal_variance - v.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Posterior mean at every grid pair, indexed like [`QSet`] bits.
    pub fn mean_on_grid(&self, grid: &GridSpec) -> Vec<f64> {
        let ns = grid.state_cells();
        let na = grid.action_cells();
        let n = self.samples.len();
        if n == 0 {
            return vec![self.prior_mean; ns * na];
        }
        let sd = self.state_dim;
        let ls = &self.hyper.lengthscales;
        let factor = |point: Vec<f64>, offset: usize| -> Vec<f64> {
            let z: Vec<f64> = point.iter().zip(&ls[offset..]).map(|(x, l)| x / l).collect();
            self.scaled.iter().map(|x| (-0.5 * sq_dist(&z, &x[offset..offset + z.len()])).exp()).collect()
        };
        // the squared-exponential kernel factorizes into state and action parts
        let sf2 = self.hyper.signal_variance;
        let action_factors: Vec<Vec<f64>> = (0..na).map(|j| factor(grid.action_point(j), sd)).collect();
        let rows: Vec<Vec<f64>> = (0..ns)
            .into_par_iter()
            .map(|i| {
                let ks = factor(grid.state_point(i), 0);
                let w: Vec<f64> = ks.iter().zip(self.alpha.iter()).map(|(k, a)| sf2 * a * k).collect();
                action_factors
                    .iter()
                    .map(|ka| self.prior_mean + w.iter().zip(ka).map(|(w, k)| w * k).sum::<f64>())
                    .collect()
            })
            .collect();
        rows.into_iter().flatten().collect()
    }

    /// `K̂ = {(i, j) : posterior mean >= threshold}`.
    pub fn constraint_estimate(&self, grid: Arc<GridSpec>, threshold: f64) -> QSet {
        let bits = self.mean_on_grid(&grid).into_iter().map(|m| m >= threshold).collect();
        QSet::from_bits(grid, bits).expect("mean grid matches set size")
    }

    /// Appends one transition, labelled 0 if it failed and 1 otherwise, and
    /// refits.
    pub fn observe(&self, s: &[f64], a: &[f64], outcome: &StepOutcome) -> Result<Self> {
        let label = if outcome.is_failed() { 0.0 } else { 1.0 };
        self.with_samples([Sample::new(s.to_vec(), a.to_vec(), label)])
    }

    pub fn with_samples(&self, extra: impl IntoIterator<Item = Sample>) -> Result<Self> {
        let mut samples = self.samples.clone();
        samples.extend(extra);
        Self::fit(samples, self.hyper.clone(), self.prior_mean, self.state_dim, self.action_dim())
    }

    pub fn with_hyperparameters(&self, hyper: Hyperparameters) -> Result<Self> {
        Self::fit(self.samples.clone(), hyper, self.prior_mean, self.state_dim, self.action_dim())
    }

    /// Picks the candidate with the largest log marginal likelihood (first
    /// wins ties). If every candidate is ill-conditioned the current model is
    /// kept and `selected` is `None`.
    pub fn update_hyperparameters(&self, candidates: &[Hyperparameters]) -> Result<HyperSearch> {
        if self.samples.len() < 2 {
            return Err(Error::Precondition("hyperparameter search needs at least 2 samples".into()));
        }
        if candidates.is_empty() {
            return Err(Error::Precondition("empty hyperparameter search grid".into()));
        }
        let fits: Vec<Option<GpModel>> = candidates
            .par_iter()
            .map(|h| self.with_hyperparameters(h.clone()).ok())
            .collect();
        let log_likelihoods: Vec<Option<f64>> = fits.iter().map(|f| f.as_ref().map(|m| m.log_marginal_likelihood)).collect();
        let mut best: Option<(usize, f64)> = None;
        for (k, ll) in log_likelihoods.iter().enumerate() {
            if let Some(ll) = *ll {
                if best.is_none_or(|(_, b)| ll > b) {
                    best = Some((k, ll));
                }
            }
        }
        match best {
            Some((k, _)) => {
                let model = fits.into_iter().nth(k).flatten().expect("selected fit exists");
                Ok(HyperSearch { model, selected: Some(k), log_likelihoods })
            }
            None => {
                log::warn!("every hyperparameter candidate was ill-conditioned; keeping {:?}", self.hyper);
                Ok(HyperSearch { model: self.clone(), selected: None, log_likelihoods })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct HyperSearch {
    pub model: GpModel,
    pub selected: Option<usize>,
    pub log_likelihoods: Vec<Option<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Where the initial label-1 samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SeedRegion {
    /// Samples on the graph of a deterministic policy, on a regular grid of
    /// `points_per_dim` states per dimension spanning
    /// `operating_point ± half_width` (clipped to the state box). The graph
    /// defaults to the nominal policy.
    PolicyGraph {
        operating_point: Vec<f64>,
        half_width: f64,
        points_per_dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        policy: Option<NominalPolicy>,
    },
    Explicit { points: Vec<SeedPoint> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedPoint {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

impl SeedRegion {
    pub fn samples(&self, grid: &GridSpec, nominal: &NominalPolicy) -> Result<Vec<Sample>> {
        let out: Vec<Sample> = match self {
            SeedRegion::Explicit { points } => {
                points.iter().map(|p| Sample::new(p.state.clone(), p.action.clone(), 1.0)).collect()
            }
            SeedRegion::PolicyGraph { operating_point, half_width, points_per_dim, policy } => {
                let policy = policy.as_ref().unwrap_or(nominal);
                if !policy.is_deterministic() {
                    return Err(Error::Config("seed region needs a deterministic policy graph".into()));
                }
                policy.validate(grid)?;
                if operating_point.len() != grid.state_dim() {
                    return Err(Error::Dimension { expected: grid.state_dim(), got: operating_point.len() });
                }
                if !(half_width.is_finite() && *half_width >= 0.0) || *points_per_dim == 0 {
                    return Err(Error::Config("seed region needs half_width >= 0 and points_per_dim >= 1".into()));
                }
                let sbox = grid.state_box();
                let per_axis: Vec<Vec<f64>> = operating_point
                    .iter()
                    .zip(sbox.intervals())
                    .map(|(&c, iv)| {
                        let lo = iv.clamp(c - half_width);
                        let hi = iv.clamp(c + half_width);
                        if *points_per_dim == 1 {
                            vec![iv.clamp(c)]
                        } else {
                            (0..*points_per_dim)
                                .map(|k| lo + (hi - lo) * k as f64 / (*points_per_dim - 1) as f64)
                                .collect()
                        }
                    })
                    .collect();
                let mut states: Vec<Vec<f64>> = vec![Vec::new()];
                for axis in &per_axis {
                    states = states
                        .into_iter()
                        .flat_map(|prefix| {
                            axis.iter().map(move |&v| {
                                let mut p = prefix.clone();
                                p.push(v);
                                p
                            })
                        })
                        .collect();
                }
                states
                    .into_iter()
                    .map(|s| {
                        let a = policy.action(grid, &s).expect("deterministic");
                        Sample::new(s, a, 1.0)
                    })
                    .collect()
            }
        };
        if out.is_empty() {
            return Err(Error::Config("seed region is empty".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefitSchedule {
    #[default]
    PerSample,
    PerEpisode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub threshold: f64,
    pub prior_mean: f64,
    pub hyperparameters: Hyperparameters,
    pub seed_region: SeedRegion,
    pub search_grid: Vec<Hyperparameters>,
    #[serde(default)]
    pub refit: RefitSchedule,
}

impl LearnerConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        let dim = grid.state_dim() + grid.action_dim();
        self.hyperparameters.validate(dim)?;
        if self.search_grid.is_empty() {
            return Err(Error::Config("hyperparameter search grid is empty".into()));
        }
        self.search_grid.iter().try_for_each(|h| h.validate(dim))
    }

    /// Fits the initial model on the seed samples.
    pub fn initial_model(&self, grid: &GridSpec, nominal: &NominalPolicy) -> Result<GpModel> {
        let seeds = self.seed_region.samples(grid, nominal)?;
        GpModel::fit(seeds, self.hyperparameters.clone(), self.prior_mean, grid.state_dim(), grid.action_dim())
    }
}

/// Candidate tuples: every combination of the given per-dimension
/// lengthscale lists, signal variances and noise variances, in that nesting
/// order.
pub fn search_grid(lengthscales: &[Vec<f64>], signal_variances: &[f64], noise_variances: &[f64]) -> Vec<Hyperparameters> {
    let mut combos: Vec<Vec<f64>> = vec![Vec::new()];
    for options in lengthscales {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                options.iter().map(move |&l| {
                    let mut p = prefix.clone();
                    p.push(l);
                    p
                })
            })
            .collect();
    }
    let mut out = Vec::new();
    for ls in &combos {
        for &sf in signal_variances {
            for &sn in noise_variances {
                out.push(Hyperparameters::new(ls.clone(), sf, sn));
            }
        }
    }
    out
}
