//! Multi-plane fusion: per-plane estimates to global coordinates, the
//! reflection function and the closed-form least-squares consistency solve.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::geometry::{reflect_across, PlaneTransform};
use crate::patchnet::{FrameEstimates, PlaneEstimate};

/// Weight of the pull of the fused velocity towards the area-weighted mean velocity.
pub const VELOCITY_ANCHOR: f64 = 1e-3;

/// Planes beyond this many (by area) are ignored.
pub const MAX_FUSED_PLANES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("degenerate normal equations: {0}")]
    Degenerate(String),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalEstimate {
    /// Metres, `z = 0`.
    pub x: Vector3<f64>,
    /// Metres per second, `z = 0`.
    pub v: Vector3<f64>,
    pub plane: u32,
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub area: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedState {
    pub x: [f64; 2],
    pub v: [f64; 2],
    pub residual: f64,
    pub planes_used: usize,
}

/// One row of the estimated trajectory file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub planes_used: usize,
    /// 1 when the state was carried forward from an earlier frame.
    pub flag: u8,
}

/// De-normalizes a wall-frame estimate and maps it through the plane's transform.
///
/// `interval` is the time spanned by one unit of the normalized velocity.
pub fn to_global(est: &PlaneEstimate, scale: f64, interval: f64) -> Result<GlobalEstimate, FusionError> {
    if !(scale > 0.0) || !(interval > 0.0) {
        return Err(FusionError::Invalid(format!("scale {scale} and interval {interval} must be positive")));
    }
    let t = PlaneTransform::from_rows(&est.transform);
    let mut x = t.apply(&Vector3::new(est.x[0] * scale, est.x[1] * scale, 0.0));
    let mut v = t.rotation() * Vector3::new(est.v[0] * scale / interval, est.v[1] * scale / interval, 0.0);
    x.z = 0.0;
    v.z = 0.0;
    Ok(GlobalEstimate { x, v, plane: est.plane, normal: Vector3::from(est.normal), offset: est.offset, area: est.area })
}

pub fn propagate(x: [f64; 2], v: [f64; 2], dt: f64) -> [f64; 2] {
    [x[0] + v[0] * dt, x[1] + v[1] * dt]
}

/// Propagates, lifts to `z = 0`, mirrors across the plane and drops `z`.
pub fn reflect_fn(x: [f64; 2], v: [f64; 2], normal: &Vector3<f64>, offset: f64, dt: f64) -> [f64; 2] {
    let p = propagate(x, v, dt);
    let r = reflect_across(&Vector3::new(p[0], p[1], 0.0), normal, offset);
    [r.x, r.y]
}

/// `reflect_fn` as `A (x + v dt) + b` restricted to the ground plane.
fn reflection_affine(normal: &Vector3<f64>, offset: f64) -> (Matrix2<f64>, Vector2<f64>) {
    let n = Vector2::new(normal.x, normal.y);
    (Matrix2::identity() - 2.0 * n * n.transpose(), 2.0 * offset * n)
}

fn ranked(estimates: &[GlobalEstimate]) -> Vec<GlobalEstimate> {
    let mut v = estimates.to_vec();
    v.sort_by(|a, b| b.area.cmp(&a.area).then(a.plane.cmp(&b.plane)));
    v.truncate(MAX_FUSED_PLANES);
    v
}

fn mean_velocity(used: &[GlobalEstimate]) -> Vector2<f64> {
    let total: usize = used.iter().map(|e| e.area).sum();
    let w = |e: &GlobalEstimate| if total > 0 { e.area as f64 / total as f64 } else { 1.0 / used.len() as f64 };
    used.iter().map(|e| Vector2::new(e.v.x, e.v.y) * w(e)).sum()
}

/// The consistency cost for the largest plane's estimate against the others.
pub fn cost(estimates: &[GlobalEstimate], x: [f64; 2], v: [f64; 2], dt: f64) -> f64 {
    let used = ranked(estimates);
    if used.len() < 2 {
        return 0.0;
    }
    let anchor = Vector2::new(used[0].x.x, used[0].x.y);
    let vbar = mean_velocity(&used);
    let mut j = VELOCITY_ANCHOR * (Vector2::new(v[0], v[1]) - vbar).norm_squared();
    for e in &used[1..] {
        let r = reflect_fn(x, v, &e.normal, e.offset, dt);
        j += (anchor - Vector2::new(r[0], r[1])).norm_squared();
    }
    j
}

/// Closed-form minimizer of [`cost`]; a single plane is passed through unchanged.
pub fn fuse(estimates: &[GlobalEstimate], dt: f64) -> Result<FusedState, FusionError> {
    if estimates.is_empty() {
        return Err(FusionError::Invalid("fuse needs at least one estimate".into()));
    }
    if !(dt >= 0.0) {
        return Err(FusionError::Invalid(format!("dt {dt} must be non-negative")));
    }
    let used = ranked(estimates);
    let first = used[0];
    if used.len() == 1 {
        return Ok(FusedState { x: [first.x.x, first.x.y], v: [first.v.x, first.v.y], residual: 0.0, planes_used: 1 });
    }
    let anchor = Vector2::new(first.x.x, first.x.y);
    let vbar = mean_velocity(&used);
    let mut lhs = Matrix4::<f64>::zeros();
    let mut rhs = Vector4::<f64>::zeros();
    for e in &used[1..] {
        let (a, b) = reflection_affine(&e.normal, e.offset);
        // residual anchor - b - C [x; v] with C = [A, dt A]
        let mut c = nalgebra::Matrix2x4::<f64>::zeros();
        c.fixed_view_mut::<2, 2>(0, 0).copy_from(&a);
        c.fixed_view_mut::<2, 2>(0, 2).copy_from(&(a * dt));
        lhs += c.transpose() * c;
        rhs += c.transpose() * (anchor - b);
    }
    for k in 2..4 {
        lhs[(k, k)] += VELOCITY_ANCHOR;
        rhs[k] += VELOCITY_ANCHOR * vbar[k - 2];
    }
    let z = lhs.cholesky().map(|c| c.solve(&rhs)).ok_or_else(|| {
        FusionError::Degenerate(format!(
            "{} planes, dt {dt}, normals {:?}",
            used.len(),
            used.iter().map(|e| [e.normal.x, e.normal.y, e.normal.z]).collect::<Vec<_>>()
        ))
    })?;
    if !z.iter().all(|v| v.is_finite()) {
        return Err(FusionError::Degenerate("non-finite solution".into()));
    }
    let (x, v) = ([z[0], z[1]], [z[2], z[3]]);
    Ok(FusedState { x, v, residual: cost(&used, x, v, dt).max(0.0), planes_used: used.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub time: f64,
    pub estimates: Vec<GlobalEstimate>,
}

/// Fuses frame by frame; frames without planes carry the last state forward and are flagged.
///
/// Frames before the first fused frame have nothing to carry and are skipped.
pub fn track(frames: &[FrameInput], dt: f64) -> Result<Vec<TrackPoint>, FusionError> {
    let mut out: Vec<TrackPoint> = Vec::with_capacity(frames.len());
    for f in frames {
        if let Some(prev) = out.last() {
            if f.time <= prev.t {
                return Err(FusionError::Invalid(format!("frame time {} does not follow {}", f.time, prev.t)));
            }
        }
        if f.estimates.is_empty() {
            if let Some(prev) = out.last().copied() {
                let p = propagate([prev.x, prev.y], [prev.vx, prev.vy], f.time - prev.t);
                out.push(TrackPoint { t: f.time, x: p[0], y: p[1], planes_used: 0, flag: 1, ..prev });
            }
            continue;
        }
        let s = fuse(&f.estimates, dt)?;
        out.push(TrackPoint { t: f.time, x: s.x[0], y: s.x[1], vx: s.v[0], vy: s.v[1], planes_used: s.planes_used, flag: 0 });
    }
    Ok(out)
}

/// Network estimates to a global trajectory; estimates are fused at their own time stamp.
pub fn track_estimates(frames: &[FrameEstimates], scale: f64) -> Result<Vec<TrackPoint>, FusionError> {
    let inputs = frames
        .iter()
        .map(|f| {
            Ok(FrameInput {
                time: f.time,
                estimates: f.estimates.iter().map(|e| to_global(e, scale, f.dt)).collect::<Result<_, _>>()?,
            })
        })
        .collect::<Result<Vec<_>, FusionError>>()?;
    track(&inputs, 0.0)
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> FusionError {
    FusionError::Format { path: path.to_path_buf(), msg: e.to_string() }
}

pub fn write_track(path: &Path, points: &[TrackPoint]) -> Result<(), FusionError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| format_err(path, e))?;
    w.write_record(["t", "x", "y", "vx", "vy", "planes_used", "flag"]).map_err(|e| format_err(path, e))?;
    for p in points {
        w.serialize(p).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(|e| format_err(path, e))
}

pub fn read_track(path: &Path) -> Result<Vec<TrackPoint>, FusionError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let header = r.headers().map_err(|e| format_err(path, e))?;
    if header != vec!["t", "x", "y", "vx", "vy", "planes_used", "flag"] {
        return Err(format_err(path, "expected header t,x,y,vx,vy,planes_used,flag"));
    }
    r.deserialize().map(|p| p.map_err(|e| format_err(path, e))).collect()
}
