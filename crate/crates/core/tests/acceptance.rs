//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viability::dynamics::hovership_model;
use viability::harness::{evaluate, Evaluation, Experiment, RunRecord};
use viability::io::{save_run, Config, RunDocument};
use viability::lattice::QSet;
use viability::learner::{GpModel, Hyperparameters, Sample};
use viability::oracle::{compute_viability, Pruned, ViabilityResult};
use viability::policy::{critical_set, direct_check, is_admissible, opt_graph, NominalPolicy};

use common::{gp_oracle, largest_control_constraint_within, random_result, random_subset, random_table, survival_kernel};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tables = 150;
    let mut mismatches = 0;
    let mut over_bound = 0;
    let mut nontrivial = 0;
    for _ in 0..tables {
        let ns = rng.random_range(2..=21);
        let na = rng.random_range(2..=17);
        let p_alive = rng.random_range(0.02..0.6);
        let table = random_table(&mut rng, ns, na, 0.15, p_alive);
        let expected = survival_kernel(&table, ns);
        let result = ViabilityResult::from_table(table);
        if result.kernel.bits() != expected.as_slice() {
            mismatches += 1;
        }
        if result.iterations > ns {
            over_bound += 1;
        }
        if result.iterations > 2 {
            nontrivial += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && over_bound == 0 && within(Duration::from_secs(10), elapsed),
        format!("{tables} tables, {mismatches} kernel mismatches, {over_bound} over the iteration bound, {nontrivial} needing > 2 sweeps, {elapsed:.2?}"),
    )
}

/// Nominal table mixing arbitrary actions with exact grid midpoints, which
/// produce cost ties.
fn random_nominal<R: Rng>(rng: &mut R, ns: usize, na: usize) -> NominalPolicy {
    let actions = (0..ns)
        .map(|_| {
            if rng.random_bool(0.3) {
                let j = rng.random_range(0..na - 1);
                vec![(j as f64 + 0.5) / (na - 1) as f64]
            } else {
                vec![rng.random_range(0.0..=1.0)]
            }
        })
        .collect();
    NominalPolicy::Table { actions }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 1500;
    let (mut agree, mut admissible, mut inadmissible) = (0, 0, 0);
    for _ in 0..cases {
        let result = random_result(&mut rng, 15, 15);
        let grid = result.viable.grid_arc().clone();
        let pi = random_nominal(&mut rng, grid.state_cells(), grid.action_cells());
        let graph = opt_graph(&result, &pi).unwrap();
        let density = rng.random_range(0.0..0.3);
        let extra = QSet::from_fn(grid.clone(), |_, _| rng.random_bool(density));
        let k = graph.union(&extra).unwrap();
        let crit = critical_set(&result, &pi).unwrap();
        let avoids_crit = k.is_disjoint(&crit).unwrap();
        let same_policy = direct_check(&k, &result, &pi).unwrap().equal;
        let verdict = is_admissible(&k, &result, &pi).unwrap().admissible;
        if avoids_crit == same_policy && verdict == avoids_crit {
            agree += 1;
        }
        if avoids_crit {
            admissible += 1;
        } else {
            inadmissible += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        agree == cases && admissible > 0 && inadmissible > 0 && within(Duration::from_secs(30), elapsed),
        format!("{agree}/{cases} agree ({admissible} admissible, {inadmissible} not), {elapsed:.2?}"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = 300;
    let mut failures = Vec::new();
    let (mut nonempty, mut kept, mut rejected) = (0, 0, 0);
    for case in 0..cases {
        let result = random_result(&mut rng, 21, 17);
        let (ka, kb) = (rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));
        let a = largest_control_constraint_within(&result.table, &random_subset(&mut rng, &result.viable, ka));
        let b = largest_control_constraint_within(&result.table, &random_subset(&mut rng, &result.viable, kb));
        if !a.is_empty() && !b.is_empty() {
            nonempty += 1;
        }
        for q in [&a, &b] {
            if !result.is_control_constraint(q).unwrap() || !q.is_subset(&result.viable).unwrap() {
                failures.push(format!("case {case}: constructed constraint invalid"));
            }
        }
        if !result.is_control_constraint(&a.union(&b).unwrap()).unwrap() {
            failures.push(format!("case {case}: union fails"));
        }
        let kc = rng.random_range(0.0..0.4);
        let c = random_subset(&mut rng, &a, kc);
        match result.prune(&a, &c).unwrap() {
            Pruned::Kept(rest) => {
                kept += 1;
                if rest.project() != a.project() || !result.is_control_constraint(&rest).unwrap() {
                    failures.push(format!("case {case}: pruned set invalid"));
                }
            }
            Pruned::Rejected { state_cell } => {
                rejected += 1;
                if !a.project().contains(state_cell) || a.difference(&c).unwrap().project().contains(state_cell) {
                    failures.push(format!("case {case}: bad rejection witness"));
                }
            }
        }
        // arbitrary sets that happen to pass must lie inside the viable set
        let arbitrary = QSet::from_fn(result.viable.grid_arc().clone(), |_, _| rng.random_bool(0.9));
        let lcc = largest_control_constraint_within(&result.table, &arbitrary);
        for q in [&arbitrary, &lcc] {
            if result.is_control_constraint(q).unwrap() && !q.is_subset(&result.viable).unwrap() {
                failures.push(format!("case {case}: passing set leaves the viable set"));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && nonempty > 0 && kept > 0 && rejected > 0 && within(Duration::from_secs(10), elapsed),
        format!(
            "{cases} cases ({nonempty} with nonempty pairs, prune kept {kept} / rejected {rejected}), {} violations{}, {elapsed:.2?}",
            failures.len(),
            failures.first().map(|f| format!(" e.g. {f}")).unwrap_or_default()
        ),
    )
}

struct Learned {
    config: Config,
    record: RunRecord,
    evaluation: Evaluation,
    elapsed: Duration,
}

fn learn(name: &str) -> Learned {
    let start = Instant::now();
    let config = Config::load(&common::configs_dir().join(name)).expect("shipped config loads");
    let system = config.system().unwrap();
    let grid = config.grid_spec(&system).unwrap();
    let oracle = compute_viability(&system, grid.clone()).unwrap();
    let experiment = Experiment {
        model: &system,
        grid,
        policy: &config.policy,
        learner: &config.learner,
        config: &config.experiment,
    };
    let record = experiment.run().unwrap();
    let evaluation = evaluate(&record.khat_final, &oracle, &config.policy, record.sample_count(), record.failure_count()).unwrap();
    Learned { config, record, evaluation, elapsed: start.elapsed() }
}

fn criterion_4(run: &Learned) -> Outcome {
    let m = &run.evaluation.metrics;
    let episodes = run.record.episodes.len();
    let (dev_mean, dev_max) = (m.deviation_mean.unwrap_or(f64::INFINITY), m.deviation_max.unwrap_or(f64::INFINITY));
    let pass = episodes == 20
        && m.sample_count <= 200
        && m.failure_count <= 10
        && dev_mean <= 5.0
        && dev_max <= 15.0
        && m.overreach <= 1.0
        && within(Duration::from_secs(60), run.elapsed);
    outcome(
        pass,
        format!(
            "{episodes} episodes, {} samples, {} failures, deviation mean {dev_mean:.3}% max {dev_max:.3}%, overreach {:.3}% of {} critical cells, {:.2?}",
            m.sample_count, m.failure_count, m.overreach, m.critical_count, run.elapsed
        ),
    )
}

fn criterion_5(random: &Learned, affine: &Learned) -> Outcome {
    let m = &random.evaluation.metrics;
    let larger = m.khat_count > affine.evaluation.metrics.khat_count;
    let pass = m.sample_count <= 200 && m.underestimate <= 20.0 && larger && within(Duration::from_secs(60), random.elapsed);
    outcome(
        pass,
        format!(
            "{} samples, underestimate {:.3}%, |K̂| {} vs {} under the affine policy, {:.2?}",
            m.sample_count, m.underestimate, m.khat_count, affine.evaluation.metrics.khat_count, random.elapsed
        ),
    )
}

fn criterion_6(runs: &[&Learned]) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for run in runs {
        let e = &run.evaluation;
        let ok = e.check_greedy_sufficiency().is_ok() && (!e.admissible || e.metrics.deviation_max.is_none_or(|d| d == 0.0));
        pass &= ok;
        notes.push(format!(
            "{}: admissible {}, deviation max {:?}",
            run.config.output_dir.display(),
            e.admissible,
            e.metrics.deviation_max
        ));
    }
    outcome(pass, notes.join("; "))
}

fn rk4_ratios() -> Vec<f64> {
    let model = hovership_model();
    let fine = model.with_substep(1e-4).unwrap();
    let coarse = model.with_substep(0.1).unwrap();
    let half = model.with_substep(0.05).unwrap();
    [(1.0, 0.0), (0.3, 0.8), (1.8, 0.2), (0.6, 0.52)]
        .iter()
        .map(|&(s, a)| {
            let reference = fine.flow(&[s], &[a], 1.0).unwrap()[0];
            let e1 = (coarse.flow(&[s], &[a], 1.0).unwrap()[0] - reference).abs();
            let e2 = (half.flow(&[s], &[a], 1.0).unwrap()[0] - reference).abs();
            e1 / e2
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let ratios = rk4_ratios();
    let rk4_ok = ratios.iter().all(|&r| r >= 8.0);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_gp = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let h = Hyperparameters::new(vec![rng.random_range(0.1..1.0), rng.random_range(0.05..0.5)], rng.random_range(0.5..2.0), rng.random_range(1e-3..1e-1));
        let mu = rng.random_range(-0.5..0.5);
        let xs: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..0.8)]).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let samples = xs.iter().zip(&ys).map(|(x, &y)| Sample::new(vec![x[0]], vec![x[1]], y)).collect();
        let model = GpModel::fit(samples, h.clone(), mu, 1, 1).unwrap();
        let q = [rng.random_range(0.0..2.0), rng.random_range(0.0..0.8)];
        let (mean, var) = model.posterior(&[q[0]], &[q[1]]);
        let (em, ev) = gp_oracle(&xs, &ys, q, &h, mu);
        worst_gp = worst_gp.max((mean - em).abs()).max((var - ev).abs());
    }
    let gp_ok = worst_gp <= 1e-9;

    let configs = 10_000;
    let mut violations = 0;
    for _ in 0..configs {
        let n = rng.random_range(0..=6);
        let h = Hyperparameters::new(vec![rng.random_range(0.05..1.0), rng.random_range(0.05..0.5)], rng.random_range(0.2..2.0), rng.random_range(1e-4..1e-1));
        let samples: Vec<Sample> = (0..=n)
            .map(|_| Sample::new(vec![rng.random_range(0.0..2.0)], vec![rng.random_range(0.0..0.8)], rng.random_range(0..2) as f64))
            .collect();
        let fewer = GpModel::fit(samples[..n].to_vec(), h.clone(), 0.0, 1, 1).unwrap();
        let more = GpModel::fit(samples, h.clone(), 0.0, 1, 1).unwrap();
        let q = [rng.random_range(0.0..2.0), rng.random_range(0.0..0.8)];
        let (_, v0) = fewer.posterior(&[q[0]], &[q[1]]);
        let (_, v1) = more.posterior(&[q[0]], &[q[1]]);
        if v1 > v0 + 1e-12 || v0 > h.signal_variance + 1e-12 {
            violations += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        rk4_ok && gp_ok && violations == 0,
        format!(
            "RK4 error ratios {:?}, GP max deviation from closed form {worst_gp:.2e}, {violations}/{configs} variance violations, {elapsed:.2?}",
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>()
        ),
    )
}

fn write_run(run: &Learned, dir: &std::path::Path) {
    let system = run.config.system().unwrap();
    let doc = RunDocument::new(
        &run.record,
        system.name(),
        run.config.experiment.seed,
        serde_json::to_value(&run.config).unwrap(),
        Some(run.evaluation.metrics.clone()),
    );
    save_run(dir, &run.record, &doc).unwrap();
}

fn criterion_8(first: &[&Learned], names: &[&str]) -> Outcome {
    let mut identical = true;
    let mut notes = Vec::new();
    for (run, name) in first.iter().zip(names) {
        let again = learn(name);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_run(run, a.path());
        write_run(&again, b.path());
        for file in ["samples.csv", "run.json", "khat_final.json"] {
            let same = std::fs::read(a.path().join(file)).unwrap() == std::fs::read(b.path().join(file)).unwrap();
            identical &= same;
            if !same {
                notes.push(format!("{name}/{file} differs"));
            }
        }
    }
    let detail = if notes.is_empty() { "samples.csv, run.json and khat_final.json byte-identical on rerun".to_string() } else { notes.join(", ") };
    outcome(identical, detail)
}

fn main() -> ExitCode {
    // libtest-style flags (e.g. --nocapture, filters) are accepted and ignored
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("[{}] criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "oracle correctness", criterion_1());
    report(2, "critical-set equivalence", criterion_2());
    report(3, "control-constraint algebra", criterion_3());
    let names = ["hovership_affine.json", "hovership_random.json"];
    let affine = learn(names[0]);
    let random = learn(names[1]);
    report(4, "hovership affine reproduction", criterion_4(&affine));
    report(5, "hovership random reproduction", criterion_5(&random, &affine));
    report(6, "greedy sufficiency", criterion_6(&[&affine, &random]));
    report(7, "numerics", criterion_7());
    report(8, "determinism", criterion_8(&[&affine, &random], &names));
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
