//! Static SVG plots of trajectories, landmarks, obstacles and covariance
//! ellipses in the plane.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix2};
use tlqg_core::Ellipsoid;

const SIZE: f64 = 640.0;
const PAD: f64 = 30.0;

#[derive(Debug, Clone)]
struct EllipseShape {
    center: [f64; 2],
    semi: [f64; 2],
    /// Angle of the first semi-axis, radians, in world coordinates.
    angle: f64,
    style: String,
}

#[derive(Debug, Clone)]
enum Item {
    Path { points: Vec<[f64; 2]>, style: String },
    Ellipse(EllipseShape),
    Marker { at: [f64; 2], style: String },
}

/// Accumulates shapes in world coordinates and renders them with a shared
/// scale so circles stay circular.
#[derive(Debug, Clone, Default)]
pub struct Plot {
    title: String,
    items: Vec<Item>,
}

fn planar(x: &DVector<f64>) -> [f64; 2] {
    [x[0], x.get(1).copied().unwrap_or(0.0)]
}

impl Plot {
    pub fn new(title: &str) -> Self {
        Self {
            title: title.to_string(),
            items: Vec::new(),
        }
    }

    pub fn path(&mut self, states: &[DVector<f64>], style: &str) -> &mut Self {
        self.items.push(Item::Path {
            points: states.iter().map(planar).collect(),
            style: style.to_string(),
        });
        self
    }

    pub fn markers(&mut self, points: &[[f64; 2]], style: &str) -> &mut Self {
        for p in points {
            self.items.push(Item::Marker {
                at: *p,
                style: style.to_string(),
            });
        }
        self
    }

    pub fn circle(&mut self, center: [f64; 2], radius: f64, style: &str) -> &mut Self {
        self.items.push(Item::Ellipse(EllipseShape {
            center,
            semi: [radius, radius],
            angle: 0.0,
            style: style.to_string(),
        }));
        self
    }

    /// Planar ellipsoid `{x : (x − c)ᵀ E (x − c) ≤ 1}`.
    pub fn ellipsoid(&mut self, e: &Ellipsoid, style: &str) -> &mut Self {
        if e.dim() == 2 {
            let major = &e.major[0] - &e.center;
            let minor = &e.minor[0] - &e.center;
            self.items.push(Item::Ellipse(EllipseShape {
                center: planar(&e.center),
                semi: [major.norm(), minor.norm()],
                angle: major[1].atan2(major[0]),
                style: style.to_string(),
            }));
        }
        self
    }

    /// One-sigma ellipse of the position block of `cov` around `mean`.
    pub fn covariance(&mut self, mean: &DVector<f64>, cov: &DMatrix<f64>, style: &str) -> &mut Self {
        if cov.nrows() < 2 {
            return self;
        }
        let block = Matrix2::new(cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]);
        let eig = block.symmetric_eigen();
        let v = eig.eigenvectors.column(0);
        self.items.push(Item::Ellipse(EllipseShape {
            center: planar(mean),
            semi: [eig.eigenvalues[0].max(0.0).sqrt(), eig.eigenvalues[1].max(0.0).sqrt()],
            angle: v[1].atan2(v[0]),
            style: style.to_string(),
        }));
        self
    }

    fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut add = |p: [f64; 2], r: f64| {
            for i in 0..2 {
                if p[i].is_finite() {
                    lo[i] = lo[i].min(p[i] - r);
                    hi[i] = hi[i].max(p[i] + r);
                }
            }
        };
        for item in &self.items {
            match item {
                Item::Path { points, .. } => points.iter().for_each(|p| add(*p, 0.0)),
                Item::Marker { at, .. } => add(*at, 0.0),
                Item::Ellipse(e) => add(e.center, e.semi[0].max(e.semi[1])),
            }
        }
        if !lo[0].is_finite() {
            return ([0.0, 0.0], [1.0, 1.0]);
        }
        (lo, hi)
    }

    pub fn render(&self) -> String {
        let (lo, hi) = self.bounds();
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        let scale = (SIZE - 2.0 * PAD) / span;
        let map = |p: [f64; 2]| [PAD + (p[0] - lo[0]) * scale, SIZE - PAD - (p[1] - lo[1]) * scale];

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{PAD}" y="20" font-family="sans-serif" font-size="14">{}</text>"#, escape(&self.title));
        for item in &self.items {
            match item {
                Item::Path { points, style } => {
                    let pts: Vec<String> = points
                        .iter()
                        .map(|p| {
                            let q = map(*p);
                            format!("{:.3},{:.3}", q[0], q[1])
                        })
                        .collect();
                    let _ = writeln!(out, r#"<polyline points="{}" fill="none" {style}/>"#, pts.join(" "));
                }
                Item::Marker { at, style } => {
                    let q = map(*at);
                    let _ = writeln!(out, r#"<rect x="{:.3}" y="{:.3}" width="8" height="8" {style}/>"#, q[0] - 4.0, q[1] - 4.0);
                }
                Item::Ellipse(e) => {
                    let q = map(e.center);
                    // The y axis is flipped on screen, so rotations change sign.
                    let _ = writeln!(
                        out,
                        r#"<ellipse cx="{:.3}" cy="{:.3}" rx="{:.3}" ry="{:.3}" transform="rotate({:.3} {:.3} {:.3})" {}/>"#,
                        q[0],
                        q[1],
                        e.semi[0] * scale,
                        e.semi[1] * scale,
                        -e.angle.to_degrees(),
                        q[0],
                        q[1],
                        e.style
                    );
                }
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub const SEED_STYLE: &str = r#"stroke="green" stroke-width="2" stroke-dasharray="6 4""#;
pub const OTRAJ_STYLE: &str = r#"stroke="goldenrod" stroke-width="2.5""#;
pub const TRUE_STYLE: &str = r#"stroke="steelblue" stroke-width="1.5""#;
pub const ESTIMATE_STYLE: &str = r#"stroke="crimson" stroke-width="1" stroke-dasharray="3 2""#;
pub const OBSTACLE_STYLE: &str = r#"fill="gray" fill-opacity="0.4" stroke="black""#;
pub const COVARIANCE_STYLE: &str = r#"fill="none" stroke="purple" stroke-width="0.8""#;
pub const GOAL_STYLE: &str = r#"fill="none" stroke="black" stroke-width="1.5""#;
pub const LANDMARK_STYLE: &str = r#"fill="black""#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_all_items() {
        let mut plot = Plot::new("a < b");
        plot.path(&[DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![1.0, 1.0])], OTRAJ_STYLE)
            .markers(&[[0.5, 0.2]], LANDMARK_STYLE)
            .circle([1.0, 1.0], 0.1, GOAL_STYLE)
            .covariance(&DVector::zeros(3), &DMatrix::identity(3, 3), COVARIANCE_STYLE);
        let svg = plot.render();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("polyline") && svg.contains("ellipse") && svg.contains("a &lt; b"));
    }
}
