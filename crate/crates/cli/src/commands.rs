//! Subcommand bodies. Each returns the process exit code on success paths
//! that still produce output (non-convergence, aborted execution).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use log::{info, warn};
use nalgebra::DVector;
use tlqg_core::executor::run_tlqg_with;
use tlqg_core::obstacles::{inflate_polygon, mvee, MVEE_DEFAULT_TOLERANCE};
use tlqg_core::planner::{evaluate_plan, polyline_seed, solve, straight_line_seed, PlanEvaluation};
use tlqg_core::{ExecutionStatus, ExecutionTrace, PlanResult};

use crate::io::{read_plan, render_ellipses, render_trace, PlanFile};
use crate::scenario::{Resolved, Scenario};
use crate::svg::{self, Plot};
use crate::validate::{self, ValidateOptions};
use crate::{exit, fmt_f64, CliError};

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn traces(ev: &PlanEvaluation, r: &Resolved) -> Vec<f64> {
    std::iter::once(r.problem.p0.trace())
        .chain(ev.steps.iter().map(|s| s.p_plus.trace()))
        .collect()
}

fn base_plot(r: &Resolved, title: &str) -> Plot {
    let mut plot = Plot::new(title);
    if let Some(set) = &r.problem.obstacles {
        for e in set.ellipsoids() {
            plot.ellipsoid(e, svg::OBSTACLE_STYLE);
        }
    }
    plot.markers(&r.landmarks, svg::LANDMARK_STYLE);
    let goal = &r.problem.goal;
    plot.circle([goal[0], goal.get(1).copied().unwrap_or(0.0)], r.problem.goal_radius, svg::GOAL_STYLE);
    plot
}

/// Result of the plan subcommand.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub file: PlanFile,
    pub result: PlanResult,
}

/// Solves from the straight-line seed, and from the via-point polyline when
/// the scenario lists via points, keeping the better plan.
pub fn compute_plan(r: &Resolved) -> Result<PlanOutcome, CliError> {
    let p = &r.problem;
    let mut seeds = vec![("straight_line", straight_line_seed(p)?)];
    if !r.via.is_empty() {
        seeds.push(("via_polyline", polyline_seed(p, &r.via)?));
    }
    let mut best: Option<(&str, &Vec<DVector<f64>>, PlanResult)> = None;
    let mut last_err = None;
    for (label, seed) in &seeds {
        match solve(p, seed, &r.options) {
            Ok(res) => {
                info!("{label} seed: cost {:.6}, converged {}", res.cost, res.converged);
                let better = match &best {
                    None => true,
                    Some((_, _, b)) => (res.converged, -res.cost) > (b.converged, -b.cost),
                };
                if better {
                    best = Some((label, seed, res));
                }
            }
            Err(e) => {
                warn!("{label} seed failed: {e}");
                last_err = Some(e);
            }
        }
    }
    let Some((label, seed, result)) = best else {
        return Err(last_err.map(CliError::from).unwrap_or_else(|| CliError::NotConverged("no plan".into())));
    };
    let seed_ev = evaluate_plan(p, seed)?;
    let ev = evaluate_plan(p, &result.trajectory.controls)?;
    let file = PlanFile {
        scenario: r.name.clone(),
        seed_label: label.to_string(),
        seed_cost: seed_ev.breakdown.total(),
        breakdown: ev.breakdown,
        converged: result.converged,
        iterations: result.iterations,
        constraint_violation: result.constraint_violation,
        terminal_residual: result.terminal_residual(&p.goal),
        seed_traces: traces(&seed_ev, r),
        seed: seed_ev.trajectory,
        otraj_traces: traces(&ev, r),
        otraj: ev.trajectory,
    };
    Ok(PlanOutcome { file, result })
}

pub fn plan(scenario: &Path, out: &Path, svg_path: Option<&Path>) -> Result<i32, CliError> {
    let r = Scenario::load(scenario)?.resolve()?;
    let outcome = compute_plan(&r)?;
    write_file(out, &outcome.file.render())?;
    if let Some(path) = svg_path {
        let mut plot = base_plot(&r, &r.name);
        let ev = evaluate_plan(&r.problem, &outcome.file.otraj.controls)?;
        for (x, s) in ev.trajectory.states.iter().skip(1).zip(&ev.steps) {
            plot.covariance(x, &s.p_plus, svg::COVARIANCE_STYLE);
        }
        plot.path(&outcome.file.seed.states, svg::SEED_STYLE)
            .path(&outcome.file.otraj.states, svg::OTRAJ_STYLE);
        write_file(path, &plot.render())?;
    }
    let f = &outcome.file;
    println!(
        "{}: cost {:.6} (seed {:.6}), terminal residual {:.3e}, converged {}",
        r.name,
        f.breakdown.total(),
        f.seed_cost,
        f.terminal_residual,
        f.converged
    );
    if f.converged {
        Ok(exit::SUCCESS)
    } else {
        warn!("solver did not converge; plan written anyway");
        Ok(exit::NOT_CONVERGED)
    }
}

/// Runs one closed-loop execution for `seed`.
pub fn execute_once(r: &Resolved, plan_file: Option<&Path>, seed: u64) -> Result<ExecutionTrace, CliError> {
    let initial = match plan_file {
        Some(path) => {
            let loaded = read_plan(path)?;
            Some(loaded.otraj)
        }
        None => None,
    };
    let mut exec = r.execution.clone();
    exec.seed = seed;
    Ok(run_tlqg_with(&r.problem, &exec, &r.options, initial.as_ref(), &r.via)?)
}

fn status_code(status: ExecutionStatus) -> i32 {
    match status {
        ExecutionStatus::PlannerAborted => exit::NOT_CONVERGED,
        _ => exit::SUCCESS,
    }
}

pub struct ExecuteArgs<'a> {
    pub scenario: &'a Path,
    pub plan: Option<&'a Path>,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub svg: Option<&'a Path>,
}

pub fn execute(args: &ExecuteArgs<'_>) -> Result<i32, CliError> {
    let r = Scenario::load(args.scenario)?.resolve()?;
    let base = args.seed.unwrap_or(r.execution.seed);
    if let Some(n) = args.seeds {
        return execute_batch(&r, args.plan, args.out, base, n);
    }
    let trace = execute_once(&r, args.plan, base)?;
    write_file(args.out, &render_trace(&r.name, &trace))?;
    if let Some(path) = args.svg {
        let mut plot = base_plot(&r, &format!("{} (seed {base})", r.name));
        let truth: Vec<DVector<f64>> = std::iter::once(trace.initial_state.clone())
            .chain(trace.records.iter().map(|s| s.true_state.clone()))
            .collect();
        let estimate: Vec<DVector<f64>> = std::iter::once(r.problem.x0_mean.clone())
            .chain(trace.records.iter().map(|s| s.estimate.clone()))
            .collect();
        plot.path(&truth, svg::TRUE_STYLE).path(&estimate, svg::ESTIMATE_STYLE);
        write_file(path, &plot.render())?;
    }
    println!(
        "{}: {} after {} steps, {} replans, goal probability {:.4}",
        r.name,
        trace.status,
        trace.records.len(),
        trace.replans,
        trace.final_goal_probability
    );
    Ok(status_code(trace.status))
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.csv")
}

/// Runs seeds `base..base + n` across worker threads. Each run writes its
/// own trace into the `out` directory; `summary.csv` collects the outcome.
pub fn execute_batch(r: &Resolved, plan: Option<&Path>, out: &Path, base: u64, n: usize) -> Result<i32, CliError> {
    if n == 0 {
        return Err(CliError::Parse("--seeds must be at least 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let workers = thread::available_parallelism().map_or(1, |w| w.get()).min(n);
    let seeds: Vec<u64> = (0..n as u64).map(|i| base + i).collect();
    let mut results: Vec<(u64, Result<ExecutionTrace, CliError>)> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let mine: Vec<u64> = seeds.iter().copied().skip(w).step_by(workers).collect();
                scope.spawn(move || {
                    mine.into_iter()
                        .map(|seed| {
                            let res = execute_once(r, plan, seed).and_then(|trace| {
                                let path: PathBuf = out.join(trace_file_name(seed));
                                write_file(&path, &render_trace(&r.name, &trace))?;
                                Ok(trace)
                            });
                            (seed, res)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    results.sort_by_key(|(seed, _)| *seed);

    let mut rows = String::new();
    let mut reached = 0usize;
    let mut aborted = false;
    for (seed, res) in &results {
        match res {
            Ok(trace) => {
                reached += usize::from(trace.reached_goal());
                aborted |= trace.status == ExecutionStatus::PlannerAborted;
                let _ = writeln!(
                    rows,
                    "{seed},{},{},{},{}",
                    trace.status,
                    trace.records.len(),
                    trace.replans,
                    fmt_f64(trace.final_goal_probability)
                );
            }
            Err(e) => {
                aborted = true;
                let _ = writeln!(rows, "{seed},error,0,0,{}", fmt_f64(0.0));
                warn!("seed {seed}: {e}");
            }
        }
    }
    let rate = reached as f64 / n as f64;
    let mut summary = String::new();
    let _ = writeln!(summary, "# scenario: {}", r.name);
    let _ = writeln!(summary, "# runs: {n}");
    let _ = writeln!(summary, "# reached: {reached}");
    let _ = writeln!(summary, "# reach_rate: {}", fmt_f64(rate));
    let _ = writeln!(summary, "seed,status,steps,replans,final_goal_probability");
    summary.push_str(&rows);
    write_file(&out.join("summary.csv"), &summary)?;
    println!("{}: {reached}/{n} runs reached the goal", r.name);
    Ok(if aborted { exit::NOT_CONVERGED } else { exit::SUCCESS })
}

pub fn validate(opts: &ValidateOptions) -> Result<i32, CliError> {
    let report = validate::run(opts)?;
    print!("{}", report.render());
    let failures = report.failures();
    if failures.is_empty() {
        println!("all checks passed");
        Ok(exit::SUCCESS)
    } else {
        Err(CliError::Validation(failures.join("; ")))
    }
}

pub fn mvee_cmd(vertices: &Path, inflation: f64, out: &Path, svg_path: Option<&Path>) -> Result<i32, CliError> {
    if !(inflation >= 0.0) {
        return Err(CliError::Parse("inflation radius must be non-negative".into()));
    }
    let text = fs::read_to_string(vertices).map_err(|e| CliError::Io(format!("{}: {e}", vertices.display())))?;
    let polygons = crate::io::parse_polygons(&text)?;
    let mut ellipses = Vec::with_capacity(polygons.len());
    for (i, poly) in polygons.iter().enumerate() {
        if poly.len() < 3 {
            return Err(CliError::Parse(format!("polygon {i}: needs at least 3 vertices, got {}", poly.len())));
        }
        let res = mvee(&inflate_polygon(poly, inflation)?, MVEE_DEFAULT_TOLERANCE)?;
        if !res.converged {
            warn!("polygon {i}: mvee stopped at the iteration cap");
        }
        ellipses.push(res.ellipsoid);
    }
    write_file(out, &render_ellipses(&ellipses, inflation))?;
    if let Some(path) = svg_path {
        let mut plot = Plot::new("inflated polygons");
        for (poly, e) in polygons.iter().zip(&ellipses) {
            plot.ellipsoid(e, svg::OBSTACLE_STYLE);
            let mut ring: Vec<DVector<f64>> = poly.iter().map(|p| DVector::from_column_slice(p)).collect();
            ring.push(ring[0].clone());
            plot.path(&ring, svg::SEED_STYLE);
        }
        write_file(path, &plot.render())?;
    }
    println!("{} ellipses written to {}", ellipses.len(), out.display());
    Ok(exit::SUCCESS)
}
