mod common;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viability::dynamics::{hovership_model, SystemModel};
use viability::harness::{compute_metrics, Experiment, ExperimentConfig, Fallback, RunRecord};
use viability::io::{load_run, save_run, RunDocument};
use viability::lattice::{Axis, GridSpec, Membership, QSet};
use viability::learner::{search_grid, GpModel, Hyperparameters, LearnerConfig, RefitSchedule, Sample, SeedRegion};
use viability::oracle::compute_viability;
use viability::policy::{critical_set, uniform_action, NominalPolicy};

fn small_grid() -> Arc<GridSpec> {
    Arc::new(GridSpec::new(vec![Axis::new(0.0, 2.0, 41).unwrap()], vec![Axis::new(0.0, 0.8, 33).unwrap()]).unwrap())
}

fn learner_config(refit: RefitSchedule) -> LearnerConfig {
    LearnerConfig {
        threshold: 0.5,
        prior_mean: 0.0,
        hyperparameters: Hyperparameters::new(vec![0.2, 0.1], 1.0, 1e-4),
        seed_region: SeedRegion::PolicyGraph { operating_point: vec![0.6], half_width: 0.1, points_per_dim: 5, policy: None },
        search_grid: search_grid(&[vec![0.1, 0.4], vec![0.05, 0.2]], &[1.0], &[1e-4]),
        refit,
    }
}

fn experiment_config(seed: u64, fallback: Fallback) -> ExperimentConfig {
    ExperimentConfig {
        episodes_per_batch: 5,
        batch_count: 2,
        max_steps_per_episode: 10,
        seed,
        fallback,
        membership: Membership::Nearest,
    }
}

fn run(model: &SystemModel, pi: &NominalPolicy, learner: &LearnerConfig, config: &ExperimentConfig) -> RunRecord {
    Experiment { model, grid: small_grid(), policy: pi, learner, config }.run().unwrap()
}

/// Nearest grid point along one axis, or `None` outside it.
fn nearest(axis_lo: f64, axis_hi: f64, points: usize, x: f64) -> Option<usize> {
    if !(axis_lo..=axis_hi).contains(&x) {
        return None;
    }
    let h = (axis_hi - axis_lo) / (points - 1) as f64;
    Some((((x - axis_lo) / h).round() as usize).min(points - 1))
}

/// One reference step: (state, nominal, action, feasible, failed, next).
type RefStep = (Vec<f64>, Vec<f64>, Vec<f64>, bool, bool, Vec<f64>);

/// Straight-line greedy exploration with per-sample refits from scratch.
fn reference_run(model: &SystemModel, pi: &NominalPolicy, learner: &LearnerConfig, config: &ExperimentConfig) -> (Vec<(usize, Vec<RefStep>)>, QSet) {
    let grid = small_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples: Vec<Sample> = learner.seed_region.samples(&grid, pi).unwrap();
    let mut hyper = learner.hyperparameters.clone();
    let estimate = |samples: &[Sample], hyper: &Hyperparameters| {
        GpModel::fit(samples.to_vec(), hyper.clone(), learner.prior_mean, 1, 1).unwrap().constraint_estimate(grid.clone(), learner.threshold)
    };
    let mut khat = estimate(&samples, &hyper);
    let mut episodes = Vec::new();
    for _ in 0..config.batch_count {
        for _ in 0..config.episodes_per_batch {
            let starts: Vec<usize> = (0..grid.state_cells()).filter(|&i| (0..grid.action_cells()).any(|j| khat.contains(i, j))).collect();
            let cell = starts[rng.random_range(0..starts.len())];
            let mut s = grid.state_point(cell);
            let mut steps = Vec::new();
            for _ in 0..config.max_steps_per_episode {
                let nominal = pi.action(&grid, &s).unwrap();
                let row = nearest(0.0, 2.0, 41, s[0]);
                let mut best: Option<(usize, f64)> = None;
                for j in 0..grid.action_cells() {
                    if row.is_some_and(|i| khat.contains(i, j)) {
                        let c = (grid.action_point(j)[0] - nominal[0]).powi(2);
                        if best.is_none_or(|(_, b)| c < b) {
                            best = Some((j, c));
                        }
                    }
                }
                let (action, feasible) = match (best, config.fallback) {
                    (Some((j, _)), _) => (grid.action_point(j), true),
                    (None, Fallback::Nominal) => (nominal.clone(), false),
                    (None, Fallback::UniformRandom) => (uniform_action(&grid, &mut rng), false),
                };
                let outcome = model.step(&s, &action).unwrap();
                let failed = outcome.is_failed();
                let next = outcome.state().to_vec();
                samples.push(Sample::new(s.clone(), action.clone(), if failed { 0.0 } else { 1.0 }));
                khat = estimate(&samples, &hyper);
                steps.push((s.clone(), nominal, action, feasible, failed, next.clone()));
                if failed {
                    break;
                }
                s = next;
            }
            episodes.push((cell, steps));
        }
        let mut best: Option<(usize, f64)> = None;
        for (k, h) in learner.search_grid.iter().enumerate() {
            if let Ok(m) = GpModel::fit(samples.clone(), h.clone(), learner.prior_mean, 1, 1) {
                if best.is_none_or(|(_, b)| m.log_marginal_likelihood() > b) {
                    best = Some((k, m.log_marginal_likelihood()));
                }
            }
        }
        hyper = learner.search_grid[best.unwrap().0].clone();
        khat = estimate(&samples, &hyper);
    }
    (episodes, khat)
}

fn assert_matches_reference(model: &SystemModel, pi: &NominalPolicy, config: &ExperimentConfig) -> RunRecord {
    let learner = learner_config(RefitSchedule::PerSample);
    let record = run(model, pi, &learner, config);
    let (episodes, khat) = reference_run(model, pi, &learner, config);
    assert_eq!(record.episodes.len(), episodes.len());
    for (log, (cell, steps)) in record.episodes.iter().zip(&episodes) {
        assert_eq!(log.initial_cell, *cell, "episode {}", log.episode);
        assert_eq!(log.steps.len(), steps.len(), "episode {}", log.episode);
        for (got, want) in log.steps.iter().zip(steps) {
            let got_tuple = (&got.state, &got.nominal, &got.action, got.feasible, got.failed, &got.next_state);
            assert_eq!(got_tuple, (&want.0, &want.1, &want.2, want.3, want.4, &want.5), "episode {} step {}", log.episode, got.step);
        }
    }
    assert_eq!(record.khat_final, khat);
    record
}

#[test]
fn affine_run_matches_reference() {
    let record = assert_matches_reference(&hovership_model(), &NominalPolicy::affine_1d(0.7, -0.3), &experiment_config(7, Fallback::Nominal));
    assert!(record.sample_count() <= 100);
}

#[test]
fn failing_run_matches_reference() {
    // without thrust the ship always sinks, so failures shrink the estimate
    let pi = NominalPolicy::affine_1d(0.0, 0.0);
    let record = assert_matches_reference(&hovership_model(), &pi, &experiment_config(3, Fallback::UniformRandom));
    assert!(record.failure_count() > 0);
    assert!(record.steps().any(|s| !s.feasible));
}

#[test]
fn episode_accounting() {
    let pi = NominalPolicy::affine_1d(0.0, 0.0);
    let learner = learner_config(RefitSchedule::PerSample);
    for seed in 0..4 {
        let config = experiment_config(seed, Fallback::Nominal);
        let record = run(&hovership_model(), &pi, &learner, &config);
        assert_eq!(record.episodes.len(), 10);
        assert_eq!(record.batches.len(), 2);
        assert!(record.sample_count() <= 100);
        for e in &record.episodes {
            assert!(!e.steps.is_empty() && e.steps.len() <= 10);
            assert_eq!(e.batch, e.episode / 5);
            // failures are logged and end their episode
            for (k, s) in e.steps.iter().enumerate() {
                assert_eq!(s.step, k);
                assert_eq!(s.failed, k + 1 == e.steps.len() && e.failed());
                if k + 1 < e.steps.len() {
                    assert_eq!(s.next_state, e.steps[k + 1].state);
                }
            }
            if !e.failed() {
                assert_eq!(e.steps.len(), 10);
            }
        }
        let failed_samples = record.steps().filter(|s| s.label() == 0.0).count();
        assert_eq!(failed_samples, record.failure_count());
        assert_eq!(record.failure_count(), record.episodes.iter().filter(|e| e.failed()).count());
        assert_eq!(record.final_model.samples().len(), 5 + record.sample_count());
    }
}

#[test]
fn per_episode_refit_defers_updates() {
    let pi = NominalPolicy::affine_1d(0.7, -0.3);
    let learner = learner_config(RefitSchedule::PerEpisode);
    let record = run(&hovership_model(), &pi, &learner, &experiment_config(5, Fallback::Nominal));
    let initial_rows = record.khat_initial.project();
    // the first episode explores with the initial estimate throughout
    let first = &record.episodes[0];
    assert!(initial_rows.contains(first.initial_cell));
    for s in &first.steps {
        let i = nearest(0.0, 2.0, 41, s.state[0]).unwrap();
        assert_eq!(s.feasible, !record.khat_initial.action_slice(i).is_empty());
    }
    assert_eq!(record.final_model.samples().len(), 5 + record.sample_count());
}

#[test]
fn metrics_recomputed_from_stored_sets() {
    let model = hovership_model();
    let pi = NominalPolicy::affine_1d(0.15, 0.0);
    let learner = learner_config(RefitSchedule::PerSample);
    let record = run(&model, &pi, &learner, &experiment_config(9, Fallback::Nominal));
    let oracle = compute_viability(&model, small_grid()).unwrap();
    let metrics = compute_metrics(&record.khat_final, &oracle, &pi, record.sample_count(), record.failure_count()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let doc = RunDocument::new(&record, "hovership", 9, serde_json::Value::Null, Some(metrics.clone()));
    save_run(dir.path(), &record, &doc).unwrap();
    let stored = load_run(dir.path()).unwrap();
    assert_eq!(stored.document, doc);
    assert_eq!(stored.khat_final, record.khat_final);
    assert_eq!(stored.samples.len(), record.sample_count());

    let khat = &stored.khat_final;
    let g = khat.grid();
    let (ns, na) = (g.state_cells(), g.action_cells());
    let viable = |i, j| oracle.viable.contains(i, j);
    let viable_count = (0..ns * na).filter(|&c| viable(c / na, c % na)).count();
    let missing = (0..ns * na).filter(|&c| viable(c / na, c % na) && !khat.contains(c / na, c % na)).count();
    assert_eq!(metrics.viable_count, viable_count);
    assert!((metrics.underestimate - missing as f64 / viable_count as f64 * 100.0).abs() < 1e-12);

    let crit = critical_set(&oracle, &pi).unwrap();
    let over = crit.members().filter(|&(i, j)| khat.contains(i, j)).count();
    assert_eq!(metrics.overreach_count, over);
    assert_eq!(metrics.critical_count, crit.count());

    // deviation with the nominal fallback on infeasible rows
    let cost = |j: usize| (g.action_point(j)[0] - 0.15f64).powi(2);
    let argmin = |row: &dyn Fn(usize) -> bool| (0..na).filter(|&j| row(j)).fold(None, |b: Option<usize>, j| match b {
        Some(b) if cost(b) <= cost(j) => Some(b),
        _ => Some(j),
    });
    let devs: Vec<f64> = (0..ns)
        .filter(|&i| oracle.kernel.contains(i))
        .map(|i| {
            let best = g.action_point(argmin(&|j| viable(i, j)).unwrap())[0];
            let ours = argmin(&|j| khat.contains(i, j)).map_or(0.15, |j| g.action_point(j)[0]);
            (ours - best).abs() / 0.8 * 100.0
        })
        .collect();
    let max = devs.iter().copied().fold(0.0, f64::max);
    assert!((metrics.deviation_max.unwrap() - max).abs() < 1e-9);
    assert!((metrics.deviation_mean.unwrap() - devs.iter().sum::<f64>() / devs.len() as f64).abs() < 1e-9);
}
