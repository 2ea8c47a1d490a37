//! Volume rendering: paint a vessel tube with class-dependent intensity
//! signatures into a CT-like volume around an analytic centerline.

use super::plan::plan_intervals;
use super::{PhantomBundle, PhantomSpec, SynthError, VesselPath};
use crate::geom::{self, Vec3};
use crate::mprrec;
use crate::volio::{Centerline, OctClass, Volume3D};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FINE_STEP_MM: f64 = 0.25;
const WALL_THICKNESS_MM: f64 = 1.2;
const BACKGROUND: f64 = 50.0;
const LUMEN_CONTRAST: f64 = 400.0;
/// Axial period of the bright strut flashes in the ambiguous-stent mode.
/// Must exceed the model's window span so some stent windows carry no
/// local evidence.
pub(crate) const FLASH_PERIOD_MM: f64 = 8.0;
const FLASH_HALF_WIDTH_MM: f64 = 0.45;

/// Analytic path position for a normalized parameter in [0, 1].
fn path_point(path: &VesselPath, u: f64, length_mm: f64) -> Vec3 {
    match path {
        VesselPath::Line => {
            // Gently tilted so frames and sampling are non-axis-aligned.
            let dir = geom::normalize([0.12, 0.08, 0.99]);
            geom::scale(dir, u * length_mm)
        }
        VesselPath::Helix {
            radius_mm,
            pitch_mm,
        } => {
            let turns = length_mm / pitch_mm.max(1.0);
            let angle = 2.0 * std::f64::consts::PI * turns * u;
            [
                radius_mm * angle.cos(),
                radius_mm * angle.sin(),
                u * length_mm,
            ]
        }
        VesselPath::Spline { control } => catmull_rom(control, u),
    }
}

/// Catmull-Rom evaluation over the control polygon at t ∈ [0, 1].
fn catmull_rom(control: &[Vec3], t: f64) -> Vec3 {
    let n = control.len();
    if n < 4 {
        // Degenerate control set: fall back to linear interpolation.
        let p0 = control.first().copied().unwrap_or([0.0; 3]);
        let p1 = control.last().copied().unwrap_or([1.0; 3]);
        return geom::add(p0, geom::scale(geom::sub(p1, p0), t));
    }
    let segments = n - 3;
    let scaled = (t * segments as f64).min(segments as f64 - 1e-9);
    let seg = scaled.floor() as usize;
    let local = scaled - seg as f64;
    let p0 = control[seg];
    let p1 = control[seg + 1];
    let p2 = control[seg + 2];
    let p3 = control[seg + 3];
    let t2 = local * local;
    let t3 = t2 * local;
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = 0.5
            * ((2.0 * p1[k])
                + (-p0[k] + p2[k]) * local
                + (2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k]) * t2
                + (-p0[k] + 3.0 * p1[k] - 3.0 * p2[k] + p3[k]) * t3);
    }
    out
}

/// Build the fine centerline polyline for a spec.
pub(crate) fn build_centerline(spec: &PhantomSpec) -> Result<Centerline, SynthError> {
    let samples = ((spec.vessel_length_mm / FINE_STEP_MM).ceil() as usize).max(8);
    let points: Vec<Vec3> = (0..=samples)
        .map(|i| path_point(&spec.path, i as f64 / samples as f64, spec.vessel_length_mm))
        .collect();
    Centerline::new(points).map_err(|e| SynthError::Internal(e.to_string()))
}

/// Class-dependent intensity at radial distance `rho`, circumferential
/// coordinates (cu, cv), and arc position `arc_mm`.
fn tissue_intensity(
    class: u8,
    rho: f64,
    cu: f64,
    cv: f64,
    arc_mm: f64,
    lumen_radius: f64,
    ambiguous_stent: bool,
) -> f64 {
    let wall_outer = lumen_radius + WALL_THICKNESS_MM;
    if rho >= wall_outer {
        return BACKGROUND;
    }
    let class = OctClass::from_id(class).unwrap_or(OctClass::Healthy);
    if rho < lumen_radius {
        // Inside the lumen: contrast, unless thrombus blocks part of it.
        if class == OctClass::Thrombus && rho > 0.25 * lumen_radius && cu > 0.1 * rho {
            return 80.0;
        }
        return LUMEN_CONTRAST;
    }
    // Wall band.
    match class {
        OctClass::Healthy => 60.0,
        OctClass::Calcified => 900.0,
        OctClass::Fibrous => 150.0,
        OctClass::LipidRich => {
            // Dark crescent on one side, fibrous-like elsewhere.
            if cu > 0.0 {
                25.0
            } else {
                150.0
            }
        }
        OctClass::Thrombus => 60.0,
        OctClass::Stent => {
            if ambiguous_stent {
                // Fibrous-identical wall; sparse bright flash rings are the
                // only local evidence.
                let phase = arc_mm.rem_euclid(FLASH_PERIOD_MM);
                if (phase - FLASH_PERIOD_MM / 2.0).abs() < FLASH_HALF_WIDTH_MM {
                    900.0
                } else {
                    150.0
                }
            } else {
                // Dense strut lattice: bright spokes over a moderate wall.
                let angle = cv.atan2(cu);
                let spokes = ((angle * 8.0 / std::f64::consts::PI).floor() as i64).rem_euclid(2);
                let ring = (arc_mm.rem_euclid(1.5) - 0.75).abs() < 0.35;
                if spokes == 0 || ring {
                    800.0
                } else {
                    200.0
                }
            }
        }
    }
}

/// Render the full phantom bundle: CT volume, centerline, pullback labels,
/// references, and ground truth.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<PhantomBundle, SynthError> {
    let centerline = build_centerline(spec)?;
    let plan = plan_intervals(spec, centerline.total_length_mm())?;

    // Frames along the fine polyline give circumferential coordinates.
    let frames = mprrec::compute_frames(&centerline)
        .map_err(|e| SynthError::Internal(e.to_string()))?;
    let points = centerline.points();
    let arcs = centerline.arc_lengths();

    // Volume box around the tube.
    let r_max = spec.lumen_radius_mm + WALL_THICKNESS_MM + 1.0;
    let margin = r_max + 1.5;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    for k in 0..3 {
        lo[k] -= margin;
        hi[k] += margin;
    }
    let [sz, sy, sx] = spec.ccta_spacing_mm;
    let nx = ((hi[0] - lo[0]) / sx).ceil() as usize + 1;
    let ny = ((hi[1] - lo[1]) / sy).ceil() as usize + 1;
    let nz = ((hi[2] - lo[2]) / sz).ceil() as usize + 1;
    let origin = [lo[2], lo[1], lo[0]]; // (oz, oy, ox)

    // Nearest-sample assignment: for every voxel near the tube, keep the
    // closest fine sample. Fine steps are far smaller than the wall, so
    // distance-to-sample approximates distance-to-curve well.
    let voxels = nz * ny * nx;
    let mut best_d2 = vec![f32::INFINITY; voxels];
    let mut best_sample = vec![u32::MAX; voxels];
    let r2_max = (r_max * r_max) as f32;
    for (si, p) in points.iter().enumerate() {
        let zi_lo = (((p[2] - r_max) - origin[0]) / sz).floor().max(0.0) as usize;
        let zi_hi = ((((p[2] + r_max) - origin[0]) / sz).ceil() as usize).min(nz - 1);
        let yi_lo = (((p[1] - r_max) - origin[1]) / sy).floor().max(0.0) as usize;
        let yi_hi = ((((p[1] + r_max) - origin[1]) / sy).ceil() as usize).min(ny - 1);
        let xi_lo = (((p[0] - r_max) - origin[2]) / sx).floor().max(0.0) as usize;
        let xi_hi = ((((p[0] + r_max) - origin[2]) / sx).ceil() as usize).min(nx - 1);
        for zi in zi_lo..=zi_hi {
            let wz = origin[0] + zi as f64 * sz;
            let dz = wz - p[2];
            for yi in yi_lo..=yi_hi {
                let wy = origin[1] + yi as f64 * sy;
                let dy = wy - p[1];
                let row = (zi * ny + yi) * nx;
                for xi in xi_lo..=xi_hi {
                    let wx = origin[2] + xi as f64 * sx;
                    let dx = wx - p[0];
                    let d2 = (dx * dx + dy * dy + dz * dz) as f32;
                    if d2 < r2_max && d2 < best_d2[row + xi] {
                        best_d2[row + xi] = d2;
                        best_sample[row + xi] = si as u32;
                    }
                }
            }
        }
    }

    // Paint.
    let t_mpr = spec.mpr_thickness_mm;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
    let mut data = vec![0.0f32; voxels];
    for idx in 0..voxels {
        let mut value = BACKGROUND;
        let si = best_sample[idx];
        if si != u32::MAX {
            let si = si as usize;
            let p = points[si];
            let zi = idx / (ny * nx);
            let yi = (idx / nx) % ny;
            let xi = idx % nx;
            let w = [
                origin[2] + xi as f64 * sx,
                origin[1] + yi as f64 * sy,
                origin[0] + zi as f64 * sz,
            ];
            let d = geom::sub(w, p);
            let rho = geom::norm(d);
            let cu = geom::dot(d, frames.normals[si]);
            let cv = geom::dot(d, frames.binormals[si]);
            let arc = arcs[si];
            let slice = ((arc / t_mpr).round() as usize).min(plan.mpr_len.saturating_sub(1));
            let class = plan.class_at_slice(slice);
            value = tissue_intensity(
                class,
                rho,
                cu,
                cv,
                arc,
                spec.lumen_radius_mm,
                spec.ambiguous_stent,
            );
        }
        // Box-Muller Gaussian noise.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let gauss = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        data[idx] = (value + spec.noise_sigma * gauss) as f32;
    }

    let ccta = Volume3D::new([nz, ny, nx], spec.ccta_spacing_mm, origin, data)
        .map_err(|e| SynthError::Internal(e.to_string()))?;
    Ok(PhantomBundle {
        ccta,
        centerline,
        oct_labels: plan.oct_labels(spec.oct_thickness_mm),
        references: plan.references(),
        truth: plan.ground_truth(spec.mpr_thickness_mm),
    })
}
