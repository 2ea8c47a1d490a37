//! Straightened MPR reconstruction from a CT volume and an artery
//! centerline: arc-length resampling, rotation-minimizing frame transport,
//! and trilinear resampling of cross-sectional planes.

use crate::geom::{self, Vec3};
use crate::volio::{Centerline, VolIoError, Volume3D};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MprError {
    #[error("resampling step {step_mm} mm exceeds the centerline length {total_mm} mm")]
    StepTooLarge { step_mm: f64, total_mm: f64 },
    #[error("invalid resampling step {0} (must be positive and finite)")]
    InvalidStep(f64),
    #[error("degenerate centerline: {0}")]
    DegenerateCenterline(String),
    #[error("cross-section size {0} must be odd so the centerline lies on the central pixel")]
    EvenCrossSection(usize),
    #[error(transparent)]
    Volume(#[from] VolIoError),
}

/// Orthonormal (tangent, normal, binormal) triple per resampled point.
///
/// Normals are propagated with the double-reflection rotation-minimizing
/// scheme, so consecutive frames never flip.
#[derive(Debug, Clone)]
pub struct FrameField {
    pub tangents: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub binormals: Vec<Vec3>,
}

impl FrameField {
    pub fn len(&self) -> usize {
        self.tangents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tangents.is_empty()
    }

    /// Largest orthonormality defect over all frames (unit-length and
    /// pairwise-orthogonality residuals).
    pub fn max_orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            let (t, u, v) = (self.tangents[i], self.normals[i], self.binormals[i]);
            for w in [t, u, v] {
                worst = worst.max((geom::norm(w) - 1.0).abs());
            }
            worst = worst.max(geom::dot(t, u).abs());
            worst = worst.max(geom::dot(t, v).abs());
            worst = worst.max(geom::dot(u, v).abs());
        }
        worst
    }

    /// Largest rotation angle (radians) between consecutive frames.
    pub fn max_consecutive_rotation(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 1..self.len() {
            for (a, b) in [
                (self.tangents[i - 1], self.tangents[i]),
                (self.normals[i - 1], self.normals[i]),
                (self.binormals[i - 1], self.binormals[i]),
            ] {
                let angle = geom::dot(a, b).clamp(-1.0, 1.0).acos();
                worst = worst.max(angle);
            }
        }
        worst
    }
}

/// Reconstruction parameters. `cross_section` must be odd.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MprConfig {
    pub slice_thickness_mm: f64,
    pub in_plane_spacing_mm: f64,
    pub cross_section: usize,
    pub fill_value: f64,
}

impl Default for MprConfig {
    fn default() -> Self {
        Self {
            slice_thickness_mm: 0.5,
            in_plane_spacing_mm: 0.3,
            cross_section: 21,
            fill_value: 0.0,
        }
    }
}

/// Resample a centerline at uniform arc-length steps: samples at 0, step,
/// 2·step, …; the curve endpoint is appended when the leftover past the
/// last multiple exceeds half a step.
pub fn resample_centerline(c: &Centerline, step_mm: f64) -> Result<Centerline, MprError> {
    if !(step_mm > 0.0) || !step_mm.is_finite() {
        return Err(MprError::InvalidStep(step_mm));
    }
    let total = c.total_length_mm();
    if step_mm > total {
        return Err(MprError::StepTooLarge {
            step_mm,
            total_mm: total,
        });
    }
    let count = (total / step_mm + 1e-9).floor() as usize;
    let mut points = Vec::with_capacity(count + 2);
    for k in 0..=count {
        points.push(c.point_at_arc(k as f64 * step_mm));
    }
    let leftover = total - count as f64 * step_mm;
    if leftover > step_mm / 2.0 {
        points.push(c.point_at_arc(total));
    }
    Centerline::new(points).map_err(MprError::from)
}

/// Tangents by central differences (one-sided at the ends), then normals
/// propagated by the double-reflection rotation-minimizing-frame method.
/// The initial normal starts from the coordinate axis least aligned with
/// the first tangent, orthogonalized against it.
pub fn compute_frames(c: &Centerline) -> Result<FrameField, MprError> {
    let pts = c.points();
    let n = pts.len();
    let mut tangents = Vec::with_capacity(n);
    for i in 0..n {
        let raw = if i == 0 {
            geom::sub(pts[1], pts[0])
        } else if i == n - 1 {
            geom::sub(pts[n - 1], pts[n - 2])
        } else {
            geom::sub(pts[i + 1], pts[i - 1])
        };
        let len = geom::norm(raw);
        if !(len > 1e-12) {
            return Err(MprError::DegenerateCenterline(format!(
                "zero-length tangent at point {i}"
            )));
        }
        tangents.push(geom::scale(raw, 1.0 / len));
    }

    // Seed normal: coordinate axis least aligned with the first tangent,
    // projected into its normal plane.
    let t0 = tangents[0];
    let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let seed = axes
        .into_iter()
        .min_by(|a, b| {
            geom::dot(*a, t0)
                .abs()
                .partial_cmp(&geom::dot(*b, t0).abs())
                .expect("finite dot products")
        })
        .expect("three axes");
    let u0 = geom::normalize(geom::sub(seed, geom::scale(t0, geom::dot(seed, t0))));

    let mut normals = Vec::with_capacity(n);
    let mut binormals = Vec::with_capacity(n);
    normals.push(u0);
    binormals.push(geom::cross(t0, u0));

    // Double-reflection transport (Wang et al. 2008).
    for i in 1..n {
        let v1 = geom::sub(pts[i], pts[i - 1]);
        let c1 = geom::dot(v1, v1);
        let u_prev = normals[i - 1];
        let t_prev = tangents[i - 1];
        let u_next = if c1 > 1e-20 {
            let r_l = geom::sub(u_prev, geom::scale(v1, 2.0 / c1 * geom::dot(v1, u_prev)));
            let t_l = geom::sub(t_prev, geom::scale(v1, 2.0 / c1 * geom::dot(v1, t_prev)));
            let v2 = geom::sub(tangents[i], t_l);
            let c2 = geom::dot(v2, v2);
            if c2 > 1e-20 {
                geom::sub(r_l, geom::scale(v2, 2.0 / c2 * geom::dot(v2, r_l)))
            } else {
                r_l
            }
        } else {
            u_prev
        };
        // Re-orthogonalize against the tangent; transport keeps this tiny,
        // the projection only scrubs accumulated round-off.
        let t = tangents[i];
        let u = geom::normalize(geom::sub(u_next, geom::scale(t, geom::dot(u_next, t))));
        normals.push(u);
        binormals.push(geom::cross(t, u));
    }

    Ok(FrameField {
        tangents,
        normals,
        binormals,
    })
}

/// Trilinear interpolation in voxel-center coordinates. Points outside the
/// voxel-center hull return `fill`.
pub fn trilinear_sample(vol: &Volume3D, p_mm: Vec3, fill: f64) -> f64 {
    let [cx, cy, cz] = vol.to_voxel_coords(p_mm);
    let [nz, ny, nx] = vol.dims();
    let (Some((x0, x1, fx)), Some((y0, y1, fy)), Some((z0, z1, fz))) =
        (axis_cell(cx, nx), axis_cell(cy, ny), axis_cell(cz, nz))
    else {
        return fill;
    };
    let c000 = vol.get(z0, y0, x0) as f64;
    let c001 = vol.get(z0, y0, x1) as f64;
    let c010 = vol.get(z0, y1, x0) as f64;
    let c011 = vol.get(z0, y1, x1) as f64;
    let c100 = vol.get(z1, y0, x0) as f64;
    let c101 = vol.get(z1, y0, x1) as f64;
    let c110 = vol.get(z1, y1, x0) as f64;
    let c111 = vol.get(z1, y1, x1) as f64;
    let c00 = c000 + (c001 - c000) * fx;
    let c01 = c010 + (c011 - c010) * fx;
    let c10 = c100 + (c101 - c100) * fx;
    let c11 = c110 + (c111 - c110) * fx;
    let c0 = c00 + (c01 - c00) * fy;
    let c1 = c10 + (c11 - c10) * fy;
    c0 + (c1 - c0) * fz
}

/// Cell lookup along one axis: continuous coordinate → (lower index,
/// upper index, fraction), or None outside [0, n-1].
#[inline]
fn axis_cell(c: f64, n: usize) -> Option<(usize, usize, f64)> {
    let max = (n - 1) as f64;
    if !(0.0..=max).contains(&c) {
        return None;
    }
    if n == 1 {
        return Some((0, 0, 0.0));
    }
    let mut i0 = c.floor() as usize;
    if i0 >= n - 1 {
        i0 = n - 2; // exact upper edge: interpolate with fraction 1
    }
    Some((i0, i0 + 1, c - i0 as f64))
}

/// Reconstruct a straightened MPR volume: one `d × d` cross-sectional
/// slice per resampled centerline point, sampled on the rotation-
/// minimizing frame plane. Output dims are (L, d, d) with spacing
/// (slice thickness, s, s) and the centerline on the central pixel.
pub fn reconstruct_mpr(
    vol: &Volume3D,
    c: &Centerline,
    cfg: &MprConfig,
) -> Result<Volume3D, MprError> {
    let d = cfg.cross_section;
    if d % 2 == 0 {
        return Err(MprError::EvenCrossSection(d));
    }
    let resampled = resample_centerline(c, cfg.slice_thickness_mm)?;
    let frames = compute_frames(&resampled)?;
    let slices = resampled.len();
    let s = cfg.in_plane_spacing_mm;
    let half = (d as f64 - 1.0) / 2.0;
    let mut data = vec![0.0f32; slices * d * d];
    for k in 0..slices {
        let center = resampled.points()[k];
        let u = frames.normals[k];
        let v = frames.binormals[k];
        let base = k * d * d;
        for i in 0..d {
            let du = (i as f64 - half) * s;
            let row = geom::add(center, geom::scale(u, du));
            for j in 0..d {
                let dv = (j as f64 - half) * s;
                let p = geom::add(row, geom::scale(v, dv));
                data[base + i * d + j] = trilinear_sample(vol, p, cfg.fill_value) as f32;
            }
        }
    }
    Volume3D::new(
        [slices, d, d],
        [cfg.slice_thickness_mm, s, s],
        [0.0; 3],
        data,
    )
    .map_err(MprError::from)
}
