//! Reference paths resampled to uniform arc-length spacing.

use nalgebra::Vector2;
use thiserror::Error;

use crate::vehicle::wrap_angle;

pub const DEFAULT_SPACING: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PathError {
    #[error("path needs at least two distinct points")]
    TooShort,
    #[error("path point {0} is not finite")]
    NonFinite(usize),
    #[error("vertex spacing must be positive, got {0}")]
    BadSpacing(f64),
    #[error("multiple laps require a closed path")]
    OpenLaps,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathVertex {
    pub id: usize,
    pub position: Vector2<f64>,
    pub heading: f64,
    pub arc_length: f64,
    pub tangent: Vector2<f64>,
    /// Left-hand normal of the tangent.
    pub normal: Vector2<f64>,
}

/// Interpolated reference at an arbitrary arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub s: f64,
    pub position: Vector2<f64>,
    /// Unwrapped heading.
    pub heading: f64,
    pub tangent: Vector2<f64>,
    pub normal: Vector2<f64>,
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    vertices: Vec<PathVertex>,
    /// Unwrapped headings, one per vertex.
    unwrapped: Vec<f64>,
    spacing: f64,
    length: f64,
}

fn left_normal(t: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-t.y, t.x)
}

impl Path {
    /// Build a path from polyline points. A closed path gets its first point
    /// appended; `laps > 1` repeats the closed loop.
    pub fn from_points(
        points: &[[f64; 2]],
        closed: bool,
        laps: usize,
        spacing: f64,
    ) -> Result<Self, PathError> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(PathError::BadSpacing(spacing));
        }
        if laps > 1 && !closed {
            return Err(PathError::OpenLaps);
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(PathError::NonFinite(i));
        }
        let mut poly: Vec<Vector2<f64>> = Vec::new();
        for p in points {
            let v = Vector2::new(p[0], p[1]);
            if poly.last().is_none_or(|l: &Vector2<f64>| (l - v).norm() > 1e-12) {
                poly.push(v);
            }
        }
        if closed && poly.len() > 1 && (poly[0] - poly[poly.len() - 1]).norm() < 1e-12 {
            poly.pop();
        }
        if poly.len() < 2 {
            return Err(PathError::TooShort);
        }
        if closed {
            let lap = poly.clone();
            for _ in 1..laps.max(1) {
                poly.extend(lap.iter().copied());
            }
            poly.push(lap[0]);
        }

        let mut cum = Vec::with_capacity(poly.len());
        cum.push(0.0);
        for w in poly.windows(2) {
            let last = *cum.last().unwrap();
            cum.push(last + (w[1] - w[0]).norm());
        }
        let total = *cum.last().unwrap();
        let count = ((total + 1e-9) / spacing).floor() as usize + 1;
        let mut positions = Vec::with_capacity(count);
        let mut seg = 0;
        for i in 0..count {
            let s = (i as f64 * spacing).min(total);
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let t = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
            positions.push(poly[seg] + (poly[seg + 1] - poly[seg]) * t.clamp(0.0, 1.0));
        }
        Self::from_resampled(positions, spacing)
    }

    fn from_resampled(positions: Vec<Vector2<f64>>, spacing: f64) -> Result<Self, PathError> {
        let n = positions.len();
        if n < 2 {
            return Err(PathError::TooShort);
        }
        let mut raw = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = match i {
                0 => (positions[0], positions[1]),
                i if i == n - 1 => (positions[n - 2], positions[n - 1]),
                i => (positions[i - 1], positions[i + 1]),
            };
            let d = b - a;
            raw.push(d.y.atan2(d.x));
        }
        let mut unwrapped = Vec::with_capacity(n);
        unwrapped.push(raw[0]);
        for i in 1..n {
            let prev = unwrapped[i - 1];
            unwrapped.push(prev + wrap_angle(raw[i] - prev));
        }
        let vertices = positions
            .iter()
            .enumerate()
            .map(|(id, &position)| {
                let tangent = Vector2::new(raw[id].cos(), raw[id].sin());
                PathVertex {
                    id,
                    position,
                    heading: raw[id],
                    arc_length: id as f64 * spacing,
                    tangent,
                    normal: left_normal(tangent),
                }
            })
            .collect();
        Ok(Self {
            vertices,
            unwrapped,
            spacing,
            length: (n - 1) as f64 * spacing,
        })
    }

    pub fn vertices(&self) -> &[PathVertex] {
        &self.vertices
    }

    pub fn vertex(&self, id: usize) -> Option<&PathVertex> {
        self.vertices.get(id)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Vertex whose arc length is closest to `s`.
    pub fn vertex_at(&self, s: f64) -> usize {
        ((s / self.spacing).round().max(0.0) as usize).min(self.vertices.len() - 1)
    }

    fn segment_curvature(&self, i: usize) -> f64 {
        (self.unwrapped[i + 1] - self.unwrapped[i]) / self.spacing
    }

    /// Reference at arc length `s`. Outside `[0, length]` the path is
    /// extended straight along the end tangents.
    pub fn point_at(&self, s: f64) -> PathPoint {
        let n = self.vertices.len();
        if s <= 0.0 || s >= self.length {
            let (v, curv) = if s <= 0.0 {
                (&self.vertices[0], self.segment_curvature(0))
            } else {
                (&self.vertices[n - 1], self.segment_curvature(n - 2))
            };
            let ds = s - v.arc_length;
            let inside = ds.abs() < 1e-12;
            return PathPoint {
                s,
                position: v.position + v.tangent * ds,
                heading: self.unwrapped[v.id],
                tangent: v.tangent,
                normal: v.normal,
                curvature: if inside { curv } else { 0.0 },
            };
        }
        let i = ((s / self.spacing).floor() as usize).min(n - 2);
        let t = (s - i as f64 * self.spacing) / self.spacing;
        let a = &self.vertices[i];
        let b = &self.vertices[i + 1];
        // Heading blends between vertices; the frame is the segment's own so
        // that errors at the nearest point are exactly orthogonal.
        let heading = self.unwrapped[i] + t * (self.unwrapped[i + 1] - self.unwrapped[i]);
        let tangent = (b.position - a.position).normalize();
        PathPoint {
            s,
            position: a.position + (b.position - a.position) * t,
            heading,
            tangent,
            normal: left_normal(tangent),
            curvature: self.segment_curvature(i),
        }
    }

    /// Orthogonal projection of `pos` onto the polyline, searching segments
    /// within `window` metres of `hint_s`. Returns the arc length of the
    /// closest point.
    pub fn project(&self, pos: &Vector2<f64>, hint_s: f64, window: f64) -> f64 {
        let n = self.vertices.len();
        let lo = (((hint_s - window) / self.spacing).floor().max(0.0) as usize).min(n - 2);
        let hi = (((hint_s + window) / self.spacing).ceil().max(0.0) as usize).clamp(lo + 1, n - 1);
        let mut best = (f64::INFINITY, hint_s.clamp(0.0, self.length));
        for i in lo..hi {
            let a = self.vertices[i].position;
            let d = self.vertices[i + 1].position - a;
            let t = ((pos - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
            let dist = (a + d * t - pos).norm_squared();
            if dist < best.0 {
                best = (dist, (i as f64 + t) * self.spacing);
            }
        }
        best.1
    }

    /// Signed lateral offset of `pos` from the reference at `s` (positive to
    /// the left).
    pub fn lateral_offset(&self, pos: &Vector2<f64>, s: f64) -> f64 {
        let p = self.point_at(s);
        p.normal.dot(&(pos - p.position))
    }
}

/// Regular polygon approximating a circle whose polyline perimeter is exactly
/// `circumference`, starting at the bottom and running counter-clockwise.
pub fn circle_points(circumference: f64, segments: usize) -> Vec<[f64; 2]> {
    let n = segments as f64;
    let r = circumference / (2.0 * n * (std::f64::consts::PI / n).sin());
    (0..segments)
        .map(|k| {
            let a = -std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / n;
            [r * a.cos(), r + r * a.sin()]
        })
        .collect()
}
