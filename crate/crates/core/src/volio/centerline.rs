//! Ordered 3D point sequences with cached arc-length parameterization.

use super::{io_err, VolIoError};
use crate::geom::{self, Vec3};
use std::fs;
use std::path::Path;

const MIN_SEGMENT_MM: f64 = 1e-9;

/// An ordered polyline in world mm with cumulative arc length per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    points: Vec<Vec3>,
    arc: Vec<f64>,
}

impl Centerline {
    pub fn new(points: Vec<Vec3>) -> Result<Self, VolIoError> {
        if points.len() < 2 {
            return Err(VolIoError::InvalidCenterline(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        let mut arc = Vec::with_capacity(points.len());
        arc.push(0.0);
        for (i, w) in points.windows(2).enumerate() {
            let d = geom::dist(w[0], w[1]);
            if !(d > MIN_SEGMENT_MM) {
                return Err(VolIoError::InvalidCenterline(format!(
                    "consecutive points {i} and {} are coincident (distance {d:.3e} mm)",
                    i + 1
                )));
            }
            arc.push(arc[i] + d);
        }
        Ok(Self { points, arc })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn arc_lengths(&self) -> &[f64] {
        &self.arc
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // >= 2 points by construction
    }

    pub fn total_length_mm(&self) -> f64 {
        *self.arc.last().expect("non-empty")
    }

    /// Position at arc length `s`, linearly interpolated along the
    /// polyline; `s` is clamped to [0, total].
    pub fn point_at_arc(&self, s: f64) -> Vec3 {
        let total = self.total_length_mm();
        let s = s.clamp(0.0, total);
        // partition_point: first segment whose end arc is >= s
        let hi = self.arc.partition_point(|&a| a < s).max(1);
        let lo = hi - 1;
        let seg = self.arc[hi] - self.arc[lo];
        let t = if seg > 0.0 { (s - self.arc[lo]) / seg } else { 0.0 };
        geom::add(
            self.points[lo],
            geom::scale(geom::sub(self.points[hi], self.points[lo]), t),
        )
    }

    /// Load from CSV with header `x_mm,y_mm,z_mm`.
    pub fn load(path: &Path) -> Result<Self, VolIoError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut saw_header = false;
        let mut points = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != "x_mm,y_mm,z_mm" {
                    return Err(VolIoError::InvalidCenterline(format!(
                        "line {}: expected header \"x_mm,y_mm,z_mm\", got {line:?}",
                        lineno + 1
                    )));
                }
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(VolIoError::InvalidCenterline(format!(
                    "line {}: expected 3 columns",
                    lineno + 1
                )));
            }
            let mut p = [0.0f64; 3];
            for (k, c) in cols.iter().enumerate() {
                p[k] = c.trim().parse::<f64>().map_err(|e| {
                    VolIoError::InvalidCenterline(format!("line {}: {e}", lineno + 1))
                })?;
            }
            points.push(p);
        }
        Self::new(points)
    }

    pub fn save(&self, path: &Path) -> Result<(), VolIoError> {
        let mut out = String::from("x_mm,y_mm,z_mm\n");
        for p in &self.points {
            // Display for f64 prints the shortest round-trip representation.
            out.push_str(&format!("{},{},{}\n", p[0], p[1], p[2]));
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arc_lengths_accumulate() {
        let c = Centerline::new(vec![[0.0, 0.0, 0.0], [0.0, 0.0, 3.0], [0.0, 4.0, 3.0]]).unwrap();
        assert_eq!(c.arc_lengths(), &[0.0, 3.0, 7.0]);
        assert_eq!(c.total_length_mm(), 7.0);
    }

    #[test]
    fn coincident_points_rejected() {
        assert!(Centerline::new(vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0]]).is_err());
        assert!(Centerline::new(vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn point_at_arc_interpolates_and_clamps() {
        let c = Centerline::new(vec![[0.0, 0.0, 0.0], [0.0, 0.0, 10.0]]).unwrap();
        assert_eq!(c.point_at_arc(2.5), [0.0, 0.0, 2.5]);
        assert_eq!(c.point_at_arc(-1.0), [0.0, 0.0, 0.0]);
        assert_eq!(c.point_at_arc(99.0), [0.0, 0.0, 10.0]);
    }

    #[test]
    fn save_load_round_trip_value_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let c = Centerline::new(vec![
            [0.1, -0.2, 0.30000000000000004],
            [1.5e-3, 2.0, 3.7],
            [10.0, 20.0, 30.5],
        ])
        .unwrap();
        c.save(&p).unwrap();
        assert_eq!(Centerline::load(&p).unwrap(), c);
    }
}
