//! Plan, trace and ellipse files. All are comma-separated with a header
//! line, preceded by `# key: value` metadata lines.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use tlqg_core::executor::ExecutionTrace;
use tlqg_core::planner::CostBreakdown;
use tlqg_core::{Ellipsoid, NominalTrajectory};

use crate::{fmt_f64, CliError};

/// Everything written to a plan file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanFile {
    pub scenario: String,
    pub seed_label: String,
    pub seed_cost: f64,
    pub breakdown: CostBreakdown,
    pub converged: bool,
    pub iterations: usize,
    pub constraint_violation: f64,
    pub terminal_residual: f64,
    pub seed: NominalTrajectory,
    pub seed_traces: Vec<f64>,
    pub otraj: NominalTrajectory,
    pub otraj_traces: Vec<f64>,
}

fn join(values: impl IntoIterator<Item = String>) -> String {
    values.into_iter().collect::<Vec<_>>().join(",")
}

fn header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

impl PlanFile {
    pub fn render(&self) -> String {
        let n = self.otraj.states[0].len();
        let nu = self.otraj.controls.first().map_or(0, DVector::len);
        let mut out = String::new();
        let meta: [(&str, String); 11] = [
            ("scenario", self.scenario.clone()),
            ("seed_label", self.seed_label.clone()),
            ("seed_cost", fmt_f64(self.seed_cost)),
            ("cost_estimation", fmt_f64(self.breakdown.estimation)),
            ("cost_control", fmt_f64(self.breakdown.control)),
            ("cost_obstacle", fmt_f64(self.breakdown.obstacle)),
            ("cost_total", fmt_f64(self.breakdown.total())),
            ("converged", self.converged.to_string()),
            ("iterations", self.iterations.to_string()),
            ("constraint_violation", fmt_f64(self.constraint_violation)),
            ("terminal_residual", fmt_f64(self.terminal_residual)),
        ];
        for (k, v) in meta {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let cols = ["kind".to_string(), "t".to_string()]
            .into_iter()
            .chain(header("x", n))
            .chain(header("u", nu))
            .chain(["trace_p".to_string()]);
        let _ = writeln!(out, "{}", join(cols));
        for (kind, traj, traces) in [("seed", &self.seed, &self.seed_traces), ("otraj", &self.otraj, &self.otraj_traces)] {
            for (t, x) in traj.states.iter().enumerate() {
                let controls: Vec<String> = match traj.controls.get(t) {
                    Some(u) => u.iter().copied().map(fmt_f64).collect(),
                    None => vec![String::new(); nu],
                };
                let row = [kind.to_string(), t.to_string()]
                    .into_iter()
                    .chain(x.iter().copied().map(fmt_f64))
                    .chain(controls)
                    .chain([fmt_f64(traces[t])]);
                let _ = writeln!(out, "{}", join(row));
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.render()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

/// Metadata and the optimized trajectory read back from a plan file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPlan {
    pub metadata: Vec<(String, String)>,
    pub otraj: NominalTrajectory,
}

impl LoadedPlan {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64, CliError> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Parse(format!("line {line}: `{s}` is not a number")))
}

/// Reads a plan file; only the `otraj` rows are kept.
pub fn read_plan(path: &Path) -> Result<LoadedPlan, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_plan(&text)
}

pub fn parse_plan(text: &str) -> Result<LoadedPlan, CliError> {
    let mut metadata = Vec::new();
    let mut columns: Option<Vec<String>> = None;
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if let Some(meta) = raw.strip_prefix('#') {
            if let Some((k, v)) = meta.split_once(':') {
                metadata.push((k.trim().to_string(), v.trim().to_string()));
            }
            continue;
        }
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        let Some(cols) = &columns else {
            columns = Some(fields.iter().map(|s| s.trim().to_string()).collect());
            continue;
        };
        if fields.len() != cols.len() {
            return Err(CliError::Parse(format!("line {line}: expected {} fields, got {}", cols.len(), fields.len())));
        }
        if fields[0] != "otraj" {
            continue;
        }
        let t: usize = fields[1]
            .parse()
            .map_err(|_| CliError::Parse(format!("line {line}: bad step index")))?;
        if t != states.len() {
            return Err(CliError::Parse(format!("line {line}: steps must be consecutive from 0")));
        }
        let mut x = Vec::new();
        let mut u = Vec::new();
        for (name, value) in cols.iter().zip(&fields).skip(2) {
            if name.starts_with('x') {
                x.push(parse_f64(value, line)?);
            } else if name.starts_with('u') && !value.trim().is_empty() {
                u.push(parse_f64(value, line)?);
            }
        }
        states.push(DVector::from_vec(x));
        if !u.is_empty() {
            controls.push(DVector::from_vec(u));
        }
    }
    if states.len() < 2 || controls.len() + 1 != states.len() {
        return Err(CliError::Parse("plan needs K + 1 otraj states and K controls".into()));
    }
    Ok(LoadedPlan {
        metadata,
        otraj: NominalTrajectory { states, controls },
    })
}

/// Renders an execution trace.
pub fn render_trace(scenario: &str, trace: &ExecutionTrace) -> String {
    let mut out = String::new();
    let meta: [(&str, String); 7] = [
        ("scenario", scenario.to_string()),
        ("seed", trace.seed.to_string()),
        ("status", trace.status.as_str().to_string()),
        ("replans", trace.replans.to_string()),
        ("planner_warnings", trace.planner_warnings.to_string()),
        ("final_goal_probability", fmt_f64(trace.final_goal_probability)),
        ("initial_state", trace.initial_state.iter().copied().map(fmt_f64).collect::<Vec<_>>().join(" ")),
    ];
    for (k, v) in meta {
        let _ = writeln!(out, "# {k}: {v}");
    }
    let n = trace.initial_state.len();
    let nu = trace.records.first().map_or(0, |r| r.control.len());
    let nz = trace.records.first().map_or(0, |r| r.observation.len());
    let cols = ["step", "plan_step", "replanned", "planner_warning", "kl_distance"]
        .map(String::from)
        .into_iter()
        .chain(header("x", n))
        .chain(header("xhat", n))
        .chain(["trace_p".to_string()])
        .chain(header("u", nu))
        .chain(header("z", nz));
    let _ = writeln!(out, "{}", join(cols));
    for r in &trace.records {
        let row = [
            r.step.to_string(),
            r.plan_step.to_string(),
            u8::from(r.replanned).to_string(),
            u8::from(r.planner_warning).to_string(),
            fmt_f64(r.kl_distance),
        ]
        .into_iter()
        .chain(r.true_state.iter().copied().map(fmt_f64))
        .chain(r.estimate.iter().copied().map(fmt_f64))
        .chain([fmt_f64(r.covariance_trace)])
        .chain(r.control.iter().copied().map(fmt_f64))
        .chain(r.observation.iter().copied().map(fmt_f64));
        let _ = writeln!(out, "{}", join(row));
    }
    out
}

/// Axis endpoints of a planar ellipse, major axis first.
pub fn axis_endpoints(e: &Ellipsoid) -> [[f64; 2]; 4] {
    let [a, b] = &e.major;
    let [c, d] = &e.minor;
    [[a[0], a[1]], [b[0], b[1]], [c[0], c[1]], [d[0], d[1]]]
}

/// One row per ellipse: centre, shape entries and axis endpoints.
pub fn render_ellipses(ellipses: &[Ellipsoid], inflation: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# inflation: {}", fmt_f64(inflation));
    let _ = writeln!(out, "# ellipses: {}", ellipses.len());
    let _ = writeln!(
        out,
        "polygon,cx,cy,e11,e12,e22,major_x1,major_y1,major_x2,major_y2,minor_x1,minor_y1,minor_x2,minor_y2"
    );
    for (i, e) in ellipses.iter().enumerate() {
        let row = e.planar_row().expect("planar ellipse");
        let ends = axis_endpoints(e);
        let values = row.into_iter().chain(ends.into_iter().flatten()).map(fmt_f64);
        let _ = writeln!(out, "{}", join(std::iter::once(i.to_string()).chain(values)));
    }
    out
}

/// Parses polygons: one `x y` vertex per line, polygons separated by blank
/// lines, `#` starts a comment.
pub fn parse_polygons(text: &str) -> Result<Vec<Vec<[f64; 2]>>, CliError> {
    let mut polygons = Vec::new();
    let mut current: Vec<[f64; 2]> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            if !current.is_empty() && raw.trim().is_empty() {
                polygons.push(std::mem::take(&mut current));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if parts.len() != 2 {
            return Err(CliError::Parse(format!("line {}: expected `x y`", i + 1)));
        }
        current.push([parse_f64(parts[0], i + 1)?, parse_f64(parts[1], i + 1)?]);
    }
    if !current.is_empty() {
        polygons.push(current);
    }
    if polygons.is_empty() {
        return Err(CliError::Parse("no polygons found".into()));
    }
    Ok(polygons)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn traj() -> NominalTrajectory {
        NominalTrajectory {
            states: vec![DVector::from_vec(vec![0.1, 1.0 / 3.0]), DVector::from_vec(vec![-2.5e-17, 7.0])],
            controls: vec![DVector::from_vec(vec![std::f64::consts::PI])],
        }
    }

    #[test]
    fn plan_round_trip_is_lossless() {
        let plan = PlanFile {
            scenario: "t".into(),
            seed_label: "straight_line".into(),
            seed_cost: 1.5,
            breakdown: CostBreakdown::default(),
            converged: true,
            iterations: 3,
            constraint_violation: 0.0,
            terminal_residual: 0.01,
            seed: traj(),
            seed_traces: vec![1.0, 2.0],
            otraj: traj(),
            otraj_traces: vec![0.5, 0.25],
        };
        let loaded = parse_plan(&plan.render()).unwrap();
        assert_eq!(loaded.otraj, traj());
        assert_eq!(loaded.meta("converged"), Some("true"));
    }

    #[test]
    fn polygons_split_on_blank_lines() {
        let p = parse_polygons("0 0\n1 0\n1 1\n\n# second\n2 2\n3 2\n3 3\n").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[1][2], [3.0, 3.0]);
        assert!(parse_polygons("").is_err());
        assert!(parse_polygons("1 2 3\n").is_err());
    }

    #[test]
    fn axis_endpoints_of_axis_aligned_ellipse() {
        let e = Ellipsoid::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0]))).unwrap();
        let ends = axis_endpoints(&e);
        assert!(((ends[0][0] - ends[1][0]).abs() - 4.0).abs() < 1e-12);
        assert!(((ends[2][1] - ends[3][1]).abs() - 2.0).abs() < 1e-12);
    }
}
