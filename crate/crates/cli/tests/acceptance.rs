//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlqg_cli::commands::{compute_plan, execute_once};
use tlqg_cli::scenario::{Resolved, Scenario};
use tlqg_cli::validate::{self, ValidateOptions};
use tlqg_core::belief::riccati_step;
use tlqg_core::controller::lqr_gains;
use tlqg_core::models::{LightDarkProfile, LightDarkSensor};
use tlqg_core::obstacles::{mvee, MVEE_DEFAULT_TOLERANCE};
use tlqg_core::planner::{plan_cost, straight_line_seed};
use tlqg_core::{CostWeights, NoiseSpec};

type Outcome = (bool, String);

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn resolve(name: &str) -> Resolved {
    Scenario::load(&scenario_path(name)).unwrap().resolve().unwrap()
}

fn s(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

fn riccati_hand_check() -> Outcome {
    let noise = NoiseSpec::new(s(1.0), s(1.0)).unwrap();
    let step = riccati_step(&s(1.0), &s(1.0), &s(1.0), &s(1.0), &s(1.0), &noise).unwrap();
    let err = [
        (step.p_minus[(0, 0)] - 2.0).abs(),
        (step.s[(0, 0)] - 3.0).abs(),
        (step.k[(0, 0)] - 2.0 / 3.0).abs(),
        (step.p_plus[(0, 0)] - 2.0 / 3.0).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    (err <= 1e-14, format!("max error {err:.1e}"))
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn lemmas_1_to_4() -> Outcome {
    let (res, took) = timed(|| validate::lemma_residuals(&ValidateOptions::default()).unwrap());
    let worst = res.into_iter().fold(0.0, f64::max);
    let ok = worst <= 1e-10 && took < Duration::from_secs(10);
    (ok, format!("max residual {worst:.2e} over 100x100, {:.2}s", took.as_secs_f64()))
}

fn lemma_5() -> Outcome {
    let r = validate::belief_residual(&ValidateOptions::default()).unwrap();
    (r <= 1e-8, format!("max residual {r:.2e}"))
}

fn theorem_1() -> Outcome {
    let (est, took) = timed(|| validate::cost_error(&ValidateOptions::default()).unwrap());
    let ok = est.samples == 100_000 && est.within(4.0) && took < Duration::from_secs(30);
    let z = est.mean.abs() / est.standard_error;
    (ok, format!("mean {:.3e}, SE {:.3e}, |z| = {z:.2}, {:.2}s", est.mean, est.standard_error, took.as_secs_f64()))
}

fn trace_identity() -> Outcome {
    let t = validate::trace_identity(&ValidateOptions::default()).unwrap();
    let z = t.z_score();
    (
        t.simulated.samples == 100_000 && z <= 3.0,
        format!("simulated {:.5}, predicted {:.5}, z = {z:.2}", t.simulated.mean, t.predicted),
    )
}

fn lqr_fixed_point() -> Outcome {
    let k = 100;
    let pairs = vec![(s(1.0), s(1.0)); k];
    let weights = CostWeights::uniform(k, s(1.0), s(1.0)).unwrap();
    let (_, gains) = lqr_gains(&pairs, &weights).unwrap();
    // Fixed-point iteration of p = q + a²p − (abp)²/(r + b²p) with a = b = q = r = 1.
    let mut p: f64 = 1.0;
    loop {
        let next = 1.0 + p - p * p / (1.0 + p);
        if (next - p).abs() < 1e-16 {
            break;
        }
        p = next;
    }
    let oracle = p / (1.0 + p);
    let err = (gains[0][(0, 0)] - oracle).abs();
    (err <= 1e-8, format!("gain {:.10}, oracle {oracle:.10}", gains[0][(0, 0)]))
}

fn mvee_checks() -> Outcome {
    let square: Vec<DVector<f64>> = [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]
        .iter()
        .map(|p| DVector::from_column_slice(p))
        .collect();
    let e = mvee(&square, MVEE_DEFAULT_TOLERANCE).unwrap().ellipsoid;
    let center_err = e.center.amax();
    let shape_err = (&e.shape - DMatrix::identity(2, 2) * 0.5).amax();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(2..=3);
        let count = rng.random_range(dim + 2..40);
        let cloud: Vec<DVector<f64>> = (0..count)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0)))
            .collect();
        let ell = mvee(&cloud, MVEE_DEFAULT_TOLERANCE).unwrap().ellipsoid;
        worst = worst.max(cloud.iter().map(|p| ell.level(p)).fold(0.0, f64::max));
    }
    let ok = center_err <= 1e-4 && shape_err <= 1e-4 && worst <= 1.0 + 1e-7;
    (ok, format!("center {center_err:.1e}, shape {shape_err:.1e}, worst level {worst:.9}"))
}

fn light_dark(name: &str, profile: LightDarkProfile) -> Outcome {
    let r = resolve(name);
    let sensor = LightDarkSensor::new(profile, r.light_dark.unwrap()).unwrap();
    let (plan, took) = timed(|| compute_plan(&r).unwrap());
    let f = &plan.file;
    let closest = |states: &[DVector<f64>]| states.iter().map(|x| sensor.distance_to_low_noise(x)).fold(f64::INFINITY, f64::min);
    let (seed_d, opt_d) = (closest(&f.seed.states), closest(&f.otraj.states));
    let cost = f.breakdown.total();
    let ok = f.seed_label == "straight_line" && cost < f.seed_cost && opt_d < seed_d && took < Duration::from_secs(60);
    (
        ok,
        format!(
            "cost {cost:.4} vs seed {:.4}, closest approach {opt_d:.3} vs seed {seed_d:.3}, {:.1}s",
            f.seed_cost,
            took.as_secs_f64()
        ),
    )
}

fn light_dark_both() -> Outcome {
    let (q_ok, q) = light_dark("light_dark_quadratic", LightDarkProfile::Quadratic);
    let (h_ok, h) = light_dark("light_dark_hyperbolic", LightDarkProfile::Hyperbolic);
    (q_ok && h_ok, format!("quadratic: {q}; hyperbolic: {h}"))
}

fn obstacle_scenario() -> Outcome {
    let r = resolve("obstacles");
    let (plan, took) = timed(|| compute_plan(&r).unwrap());
    let set = r.problem.obstacles.as_ref().unwrap();
    let d = set.dim();
    let min_level = plan
        .file
        .otraj
        .states
        .iter()
        .flat_map(|x| set.ellipsoids().iter().map(move |e| e.level(&x.rows(0, d).into_owned())))
        .fold(f64::INFINITY, f64::min);
    let residual = plan.file.terminal_residual;
    let ok = r.problem.horizon == 25 && min_level > 1.0 && residual < r.problem.goal_radius && took < Duration::from_secs(300);
    (
        ok,
        format!(
            "K = {}, smallest ellipse level {min_level:.3}, terminal residual {residual:.4}, {:.1}s",
            r.problem.horizon,
            took.as_secs_f64()
        ),
    )
}

fn closed_loop() -> Outcome {
    let r = resolve("range_bearing_free");
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(20);
    let reached: usize = thread::scope(|scope| {
        let r = &r;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (1..=20u64)
                        .skip(w)
                        .step_by(workers)
                        .filter(|&seed| execute_once(r, None, seed).unwrap().reached_goal())
                        .count()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).sum()
    });
    (reached >= 18, format!("{reached}/20 runs reached the goal"))
}

fn scaling() -> Outcome {
    let time_for = |k: usize| {
        let mut scenario = Scenario::load(&scenario_path("range_bearing_free")).unwrap();
        scenario.horizon = k;
        let r = scenario.resolve().unwrap();
        let seed = straight_line_seed(&r.problem).unwrap();
        let mut best = f64::INFINITY;
        for _ in 0..7 {
            let (_, took) = timed(|| {
                for _ in 0..50 {
                    std::hint::black_box(plan_cost(&r.problem, &seed).unwrap());
                }
            });
            best = best.min(took.as_secs_f64());
        }
        best
    };
    let ratio = time_for(50) / time_for(25);
    (ratio <= 2.5, format!("K=50 / K=25 time ratio {ratio:.2}"))
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("tlqg-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let run = |file: &str| {
        let out = dir.join(file);
        let status = Command::new(env!("CARGO_BIN_EXE_tlqg"))
            .args(["execute", "--seed", "5", "--scenario"])
            .arg(scenario_path("range_bearing_free"))
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap()
            .status;
        assert!(status.success());
        std::fs::read(out).unwrap()
    };
    let (a, b) = (run("a.csv"), run("b.csv"));
    let _ = std::fs::remove_dir_all(&dir);
    (a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("riccati hand check", riccati_hand_check),
        ("estimation, state, control and observation closed forms", lemmas_1_to_4),
        ("belief error closed form", lemma_5),
        ("zero-mean linearized cost error", theorem_1),
        ("estimation cost trace identity", trace_identity),
        ("lqr fixed point", lqr_fixed_point),
        ("minimum-volume ellipse", mvee_checks),
        ("light-dark trajectories seek information", light_dark_both),
        ("obstacle avoidance at K = 25", obstacle_scenario),
        ("closed-loop robustness", closed_loop),
        ("plan cost scaling", scaling),
        ("deterministic traces", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let (ok, detail) = match std::panic::catch_unwind(check) {
            Ok(outcome) => outcome,
            Err(_) => (false, "panicked".to_string()),
        };
        failed += usize::from(!ok);
        println!("criterion {:>2} {}: {name} ({detail})", i + 1, if ok { "PASS" } else { "FAIL" });
    }
    if failed == 0 {
        println!("acceptance: all 12 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 12 criteria fail");
        ExitCode::FAILURE
    }
}
