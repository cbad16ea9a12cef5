use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use tlqg_cli::commands::compute_plan;
use tlqg_cli::io::{parse_plan, read_plan};
use tlqg_cli::scenario::Scenario;

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn tlqg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlqg")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a copy of a shipped scenario with `edit` applied.
fn edited(dir: &TempDir, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(scenario(name)).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.path().join(format!("{name}_edited.json"));
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn meta(text: &str, key: &str) -> String {
    parse_plan(text).unwrap().meta(key).unwrap().to_string()
}

#[test]
fn plan_reaches_goal_and_round_trips() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("plan.csv");
    let res = tlqg(&["plan", "--scenario", s(&scenario("range_bearing_free")), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let residual: f64 = meta(&text, "terminal_residual").parse().unwrap();
    assert!(residual < 0.1);
    for key in ["cost_estimation", "cost_control", "cost_obstacle", "converged", "seed_cost"] {
        assert!(text.contains(&format!("# {key}: ")), "missing {key}");
    }

    let resolved = Scenario::load(&scenario("range_bearing_free")).unwrap().resolve().unwrap();
    let direct = compute_plan(&resolved).unwrap();
    assert_eq!(read_plan(&out).unwrap().otraj, direct.file.otraj);
}

#[test]
fn goal_at_start_gives_near_zero_controls() {
    let dir = TempDir::new().unwrap();
    // A constant linear sensor makes the covariance independent of the path.
    let path = edited(&dir, "range_bearing_free", |v| {
        v["goal"]["state"] = serde_json::json!([0.0, 0.0, 0.0]);
        v["observation"] = serde_json::json!({"kind": "linear", "h": [[1, 0, 0], [0, 1, 0]], "m": [[1, 0], [0, 1]]});
    });
    let out = dir.path().join("plan.csv");
    let res = tlqg(&["plan", "--scenario", s(&path), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0));
    let plan = read_plan(&out).unwrap();
    let largest = plan.otraj.controls.iter().map(|u| u.amax()).fold(0.0, f64::max);
    assert!(largest < 1e-6, "largest control {largest:e}");
}

#[test]
fn malformed_config_exits_2_without_output() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("plan.csv");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"name\": \"x\",\n  \"horizon\": \"ten\"\n}\n").unwrap();
    let res = tlqg(&["plan", "--scenario", s(&bad), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line"));
    assert!(!out.exists());

    let typo = edited(&dir, "range_bearing_free", |v| v["horizn"] = 3.into());
    let res = tlqg(&["plan", "--scenario", s(&typo), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("horizn"));
    assert!(!out.exists());

    let dims = edited(&dir, "range_bearing_free", |v| v["initial"]["mean"] = serde_json::json!([0.0, 0.0]));
    let res = tlqg(&["execute", "--scenario", s(&dims), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("initial.mean"));
    assert!(!out.exists());
}

#[test]
fn non_convergence_exits_3_and_still_writes() {
    let dir = TempDir::new().unwrap();
    let path = edited(&dir, "light_dark_quadratic", |v| {
        v["solver"] = serde_json::json!({"max_iterations": 1, "outer_rounds": 1});
    });
    let out = dir.path().join("plan.csv");
    let res = tlqg(&["plan", "--scenario", s(&path), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(3));
    assert_eq!(meta(&fs::read_to_string(&out).unwrap(), "converged"), "false");
}

#[test]
fn zero_noise_execution_needs_no_replanning() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("trace.csv");
    let res = tlqg(&["execute", "--scenario", s(&scenario("zero_noise")), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("# status: goal_reached"));
    assert!(text.contains("# replans: 0"));
}

#[test]
fn supplied_plan_is_tracked_exactly() {
    let dir = TempDir::new().unwrap();
    let plan = dir.path().join("plan.csv");
    let with_plan = dir.path().join("a.csv");
    let without = dir.path().join("b.csv");
    let sc = scenario("range_bearing_free");
    assert!(tlqg(&["plan", "--scenario", s(&sc), "--out", s(&plan)]).status.success());
    assert!(tlqg(&["execute", "--scenario", s(&sc), "--plan", s(&plan), "--seed", "3", "--out", s(&with_plan)]).status.success());
    assert!(tlqg(&["execute", "--scenario", s(&sc), "--seed", "3", "--out", s(&without)]).status.success());
    // Only the "replanned" flag of the first record may differ.
    let a = fs::read_to_string(with_plan).unwrap();
    let b = fs::read_to_string(without).unwrap();
    let strip = |t: &str| -> Vec<String> {
        t.lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                if f.len() > 2 && f[0] == "0" {
                    f[2] = "-";
                }
                f.join(",")
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn batch_writes_one_trace_per_seed_and_a_summary() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("batch");
    let res = tlqg(&["execute", "--scenario", s(&scenario("range_bearing_free")), "--seeds", "3", "--seed", "10", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(0));
    for seed in 10..13 {
        assert!(out.join(format!("trace_seed{seed}.csv")).exists());
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.contains("# reach_rate: "));
    assert_eq!(summary.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn validate_passes_and_fault_injection_fails() {
    let quick = ["--systems", "10", "--realizations", "10", "--samples", "5000"];
    let res = tlqg(&[&["validate"][..], &quick].concat());
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));

    let res = tlqg(&[&["validate", "--inject-fault"][..], &quick].concat());
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("lemma 2"));
}

fn ellipse_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("polygon"))
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn mvee_of_unit_square_is_the_circumscribed_circle() {
    let dir = TempDir::new().unwrap();
    let vertices = dir.path().join("square.txt");
    fs::write(&vertices, "0 0\n1 0\n1 1\n0 1\n").unwrap();
    let tight = dir.path().join("tight.csv");
    let loose = dir.path().join("loose.csv");
    assert!(tlqg(&["mvee", "--vertices", s(&vertices), "--out", s(&tight)]).status.success());
    assert!(tlqg(&["mvee", "--vertices", s(&vertices), "--inflation", "0.1", "--out", s(&loose)]).status.success());

    // Circle through the corners: centre (0.5, 0.5), radius √0.5, so E = 2I.
    let row = &ellipse_rows(&tight)[0];
    let expected = [0.5, 0.5, 2.0, 0.0, 2.0];
    for (got, want) in row[1..6].iter().zip(expected) {
        assert!((got - want).abs() < 1e-4, "{row:?}");
    }
    let radius = ((row[6] - 0.5).powi(2) + (row[7] - 0.5).powi(2)).sqrt();
    assert!((radius - 0.5f64.sqrt()).abs() < 1e-4);

    let grown = &ellipse_rows(&loose)[0];
    assert!(grown[3] < row[3] && grown[5] < row[5]);
}

#[test]
fn mvee_rejects_degenerate_input() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("e.csv");
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    assert_eq!(tlqg(&["mvee", "--vertices", s(&empty), "--out", s(&out)]).status.code(), Some(2));
    let two = dir.path().join("two.txt");
    fs::write(&two, "0 0\n1 1\n").unwrap();
    assert_eq!(tlqg(&["mvee", "--vertices", s(&two), "--out", s(&out)]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn svg_output_is_written() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("plan.csv");
    let svg = dir.path().join("plan.svg");
    let res = tlqg(&["plan", "--scenario", s(&scenario("light_dark_quadratic")), "--out", s(&out), "--svg", s(&svg)]);
    assert!(res.status.success());
    let text = fs::read_to_string(svg).unwrap();
    assert!(text.contains("<polyline") && text.contains("<ellipse"));
}
