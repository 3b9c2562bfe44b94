//! Synthetic Manhattan-room scenes: Bézier paths, point-source wall radiance,
//! ray-cast rendering with ground-truth masks, and dataset serialization.

mod config;
mod dataset;
mod io;

use nalgebra::Vector3;

use crate::geometry::{back_project, Intrinsics, Plane3D, Pose, Raster};
use crate::numerics::Rng;

pub use config::{SceneConfig, Side, WallConfig};
pub use dataset::{camera_poses, frame_noise, generate_dataset, load_manifest, person_path, DatasetManifest, FrameRecord, MaskRef, PlaneEntry, PoseRecord, MANIFEST_VERSION};
pub use io::{read_pfm, read_pgm, read_trajectory, write_pfm, write_pgm, write_trajectory};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

impl SimError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn format(path: &std::path::Path, msg: impl Into<String>) -> Self {
        Self::Format { path: path.display().to_string(), msg: msg.into() }
    }
}

/// One timestamped sample of the hidden person.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

pub type Trajectory = Vec<TrajectoryPoint>;

pub const BEZIER_CONTROL_POINTS: usize = 10;

/// Position and parameter-derivative of a Bézier curve at `u ∈ [0, 1]`.
pub fn bezier_eval<const D: usize>(control: &[[f64; D]], u: f64) -> ([f64; D], [f64; D]) {
    let n = control.len() - 1;
    let mut pos = [0.0; D];
    let mut der = [0.0; D];
    for (i, c) in control.iter().enumerate() {
        let b = bernstein(n, i, u);
        for d in 0..D {
            pos[d] += b * c[d];
        }
    }
    for i in 0..n {
        let b = bernstein(n - 1, i, u);
        for d in 0..D {
            der[d] += n as f64 * b * (control[i + 1][d] - control[i][d]);
        }
    }
    (pos, der)
}

fn bernstein(n: usize, i: usize, u: f64) -> f64 {
    let mut binom = 1.0;
    for j in 0..i {
        binom = binom * (n - j) as f64 / (j + 1) as f64;
    }
    binom * u.powi(i as i32) * (1.0 - u).powi((n - i) as i32)
}

/// Number of frames and their timestamps: `fps · duration` samples spread
/// uniformly over `[0, duration]`, so the first and last frames sit on the curve ends.
pub fn frame_times(duration: f64, fps: f64) -> Result<Vec<f64>, SimError> {
    if !(duration > 0.0 && fps > 0.0) {
        return Err(SimError::Config("duration and fps must be positive".into()));
    }
    let frames = fps * duration;
    let n = frames.round();
    if (frames - n).abs() > 1e-9 || n < 2.0 {
        return Err(SimError::Config(format!("fps * duration = {frames} is not an integer frame count >= 2")));
    }
    let n = n as usize;
    Ok((0..n).map(|i| duration * i as f64 / (n - 1) as f64).collect())
}

/// Degree-9 Bézier path sampled per frame; velocity is the parameter derivative over `duration`.
pub fn bezier_path(control: &[[f64; 2]], duration: f64, fps: f64) -> Result<Trajectory, SimError> {
    if control.len() != BEZIER_CONTROL_POINTS {
        return Err(SimError::Config(format!("expected {BEZIER_CONTROL_POINTS} control points, got {}", control.len())));
    }
    Ok(frame_times(duration, fps)?
        .into_iter()
        .map(|t| {
            let (p, d) = bezier_eval(control, t / duration);
            TrajectoryPoint { t, x: p[0], y: p[1], vx: d[0] / duration, vy: d[1] / duration }
        })
        .collect())
}

/// Radiometric constants shared by every wall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lighting {
    pub ambient: f64,
    pub intensity: f64,
    pub source_height: f64,
    pub min_range: f64,
}

/// Wall radiance at `q` lit by an isotropic point source above `person`.
pub fn radiance_at(q: &Vector3<f64>, wall: &Plane3D, reflectivity: f64, person: [f64; 2], light: &Lighting) -> f64 {
    let source = Vector3::new(person[0], person[1], light.source_height);
    let to_source = source - q;
    let r = to_source.norm();
    let cos = if r > 0.0 { wall.normal.dot(&to_source) / r } else { 0.0 };
    let falloff = (r * r).max(light.min_range * light.min_range);
    light.ambient + reflectivity * light.intensity * cos.max(0.0) / falloff
}

/// Noise-free radiance image plus per-wall masks (1 where that wall is the nearest hit).
pub fn render_clean(
    walls: &[(Plane3D, f64)],
    k: &Intrinsics,
    pose: &Pose,
    person: [f64; 2],
    light: &Lighting,
) -> (Raster, Vec<Raster>) {
    let mut img = Raster::zeros(k.width, k.height);
    let mut masks = vec![Raster::zeros(k.width, k.height); walls.len()];
    for v in 0..k.height {
        for u in 0..k.width {
            let dir = back_project(pose, k, u as f64, v as f64);
            let nearest = walls
                .iter()
                .enumerate()
                .filter_map(|(i, (w, _))| w.intersect(&pose.p, &dir).map(|t| (i, t)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, t)) = nearest {
                let q = pose.p + dir * t;
                let (wall, rho) = &walls[i];
                img.set(u, v, radiance_at(&q, wall, *rho, person, light));
                masks[i].set(u, v, 1.0);
            }
        }
    }
    (img, masks)
}

/// Renders one frame and adds `N(0, sigma²)` pixel noise from `noise`.
pub fn render_frame(
    walls: &[(Plane3D, f64)],
    k: &Intrinsics,
    pose: &Pose,
    person: [f64; 2],
    light: &Lighting,
    sigma: f64,
    noise: &mut Rng,
) -> (Raster, Vec<Raster>) {
    let (mut img, masks) = render_clean(walls, k, pose, person, light);
    if sigma > 0.0 {
        for px in &mut img.data {
            *px += sigma * noise.normal();
        }
    }
    (img, masks)
}
