//! Closed reference paths traversed at constant speed.

use std::f64::consts::PI;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// Circle with a 60 degree wedge cut out, apex at the origin.
    Pacman,
    /// Five-pointed star polygon.
    Star,
    /// Outline of a block capital M.
    BlockM,
    Circle,
    /// A single point at `(scale, 0)`.
    Setpoint,
}

impl FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pacman" => Ok(Shape::Pacman),
            "star" => Ok(Shape::Star),
            "block-m" => Ok(Shape::BlockM),
            "circle" => Ok(Shape::Circle),
            "setpoint" => Ok(Shape::Setpoint),
            other => Err(Error::InvalidArgument(format!("unknown shape {other:?}"))),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Shape::Pacman => "pacman",
            Shape::Star => "star",
            Shape::BlockM => "block-m",
            Shape::Circle => "circle",
            Shape::Setpoint => "setpoint",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingTask {
    pub name: String,
    pub sample_period: f64,
    /// One row per sample.
    pub reference: DMatrix<f64>,
}

impl TrackingTask {
    pub fn len(&self) -> usize {
        self.reference.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.nrows() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.sample_period
    }

    pub fn point(&self, k: usize) -> DVector<f64> {
        self.reference.row(k).transpose()
    }

    /// `r[k..=k+horizon]`, holding the final point past the end.
    pub fn window(&self, k: usize, horizon: usize) -> Vec<DVector<f64>> {
        let last = self.len() - 1;
        (k..=k + horizon).map(|i| self.point(i.min(last))).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.reference.ncols();
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=n).map(|i| format!("r{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut fields = vec![(k as f64 * self.sample_period).to_string()];
            fields.extend(self.reference.row(k).iter().map(|v| v.to_string()));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

type Point = [f64; 2];

fn arc(center: Point, radius: f64, from: f64, to: f64, pieces: usize) -> Vec<Point> {
    (0..=pieces)
        .map(|i| {
            let a = from + (to - from) * i as f64 / pieces as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

/// Closed polyline (first vertex repeated at the end).
fn outline(shape: Shape, scale: f64) -> Vec<Point> {
    let mut pts: Vec<Point> = match shape {
        Shape::Circle => arc([0.0, 0.0], scale, 0.0, 2.0 * PI, 720),
        Shape::Setpoint => vec![[scale, 0.0]],
        Shape::Pacman => {
            let mouth = PI / 6.0;
            let mut p = vec![[0.0, 0.0]];
            p.extend(arc([0.0, 0.0], scale, mouth, 2.0 * PI - mouth, 600));
            p
        }
        Shape::Star => (0..10)
            .map(|i| {
                let r = if i % 2 == 0 { scale } else { 0.382 * scale };
                let a = PI / 2.0 + i as f64 * PI / 5.0;
                [r * a.cos(), r * a.sin()]
            })
            .collect(),
        Shape::BlockM => [
            [-1.0, -1.0],
            [-1.0, 1.0],
            [-0.6, 1.0],
            [0.0, 0.2],
            [0.6, 1.0],
            [1.0, 1.0],
            [1.0, -1.0],
            [0.6, -1.0],
            [0.6, 0.4],
            [0.0, -0.4],
            [-0.6, 0.4],
            [-0.6, -1.0],
        ]
        .iter()
        .map(|p| [p[0] * scale, p[1] * scale])
        .collect(),
    };
    if pts.len() > 1 && pts.first() != pts.last() {
        pts.push(pts[0]);
    }
    pts
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Re-threads a closed polyline so it starts at its point nearest the origin.
fn start_near_origin(pts: &[Point]) -> Vec<Point> {
    let mut best = (f64::INFINITY, 0, [0.0, 0.0]);
    for s in 0..pts.len() - 1 {
        let (p, q) = (pts[s], pts[s + 1]);
        let d = [q[0] - p[0], q[1] - p[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 > 0.0 {
            (-(p[0] * d[0] + p[1] * d[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let c = [p[0] + t * d[0], p[1] + t * d[1]];
        let r = dist(c, [0.0, 0.0]);
        if r < best.0 - 1e-12 {
            best = (r, s, c);
        }
    }
    let (_, s, c) = best;
    let body = &pts[..pts.len() - 1];
    let mut out = vec![c];
    for i in 1..=body.len() {
        out.push(body[(s + i) % body.len()]);
    }
    out.push(c);
    out.dedup_by(|a, b| dist(*a, *b) == 0.0);
    out
}

/// Samples `round(duration / T_s)` points of the closed path at uniform
/// arc-length spacing; the first and last samples coincide.
pub fn make_reference(shape: Shape, scale: f64, duration: f64, sample_period: f64) -> Result<TrackingTask> {
    if !(duration > 0.0 && sample_period > 0.0) {
        return Err(Error::InvalidArgument("duration and sample period must be positive".into()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    let count = (duration / sample_period).round().max(1.0) as usize;
    let name = shape.to_string();
    let pts = outline(shape, scale);
    if pts.len() == 1 {
        let reference = DMatrix::from_fn(count, 2, |_, j| pts[0][j]);
        return Ok(TrackingTask {
            name,
            sample_period,
            reference,
        });
    }
    let pts = start_near_origin(&pts);
    let mut cumulative = vec![0.0];
    for w in pts.windows(2) {
        cumulative.push(cumulative.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cumulative.last().unwrap();
    let mut reference = DMatrix::zeros(count, 2);
    let mut seg = 0;
    for k in 0..count {
        let s = if count == 1 {
            0.0
        } else {
            total * k as f64 / (count - 1) as f64
        };
        while seg + 2 < cumulative.len() && cumulative[seg + 1] < s {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = if len > 0.0 { ((s - cumulative[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (p, q) = (pts[seg], pts[seg + 1]);
        reference[(k, 0)] = p[0] + t * (q[0] - p[0]);
        reference[(k, 1)] = p[1] + t * (q[1] - p[1]);
    }
    // close exactly
    let first = reference.row(0).into_owned();
    reference.row_mut(count - 1).copy_from(&first);
    Ok(TrackingTask {
        name,
        sample_period,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ninety_seconds_is_nine_hundred_samples() {
        let t = make_reference(Shape::Pacman, 4.0, 90.0, 0.1).unwrap();
        assert_eq!(t.len(), 900);
    }

    #[test]
    fn pacman_starts_at_apex() {
        let t = make_reference(Shape::Pacman, 4.0, 90.0, 0.1).unwrap();
        assert!(t.point(0).norm() < 1e-12);
    }

    #[test]
    fn window_holds_last_point() {
        let t = make_reference(Shape::Circle, 1.0, 1.0, 0.1).unwrap();
        let w = t.window(8, 4);
        assert_eq!(w.len(), 5);
        assert_eq!(w[4], t.point(9));
    }
}
