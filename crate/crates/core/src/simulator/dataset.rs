use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::io::{write_pfm, write_pgm, write_trajectory};
use super::{bezier_eval, bezier_path, render_frame, SceneConfig, SimError, TrajectoryPoint, BEZIER_CONTROL_POINTS};
use crate::geometry::{Plane3D, Pose};
use crate::numerics::Rng;

pub const MANIFEST_VERSION: u32 = 1;

const STREAM_PERSON: u64 = 1;
const STREAM_CAMERA: u64 = 2;
const STREAM_TARGET: u64 = 3;
const STREAM_JITTER: u64 = 4;
const STREAM_FRAME_NOISE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneEntry {
    pub id: u32,
    pub normal: [f64; 3],
    pub offset: f64,
    pub corners: [[f64; 3]; 4],
    pub reflectivity: f64,
}

impl PlaneEntry {
    pub fn plane(&self) -> Result<Plane3D, SimError> {
        Ok(Plane3D::new(Vector3::from(self.normal), self.offset, self.corners.map(Vector3::from))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub position: [f64; 3],
    /// Row-major global-from-camera rotation.
    pub rotation: [[f64; 3]; 3],
}

impl PoseRecord {
    pub fn from_pose(p: &Pose) -> Self {
        Self {
            position: p.p.into(),
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| p.r[(i, j)])),
        }
    }

    pub fn pose(&self) -> Result<Pose, SimError> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        Ok(Pose::new(Vector3::from(self.position), r)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRef {
    pub plane: u32,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub index: usize,
    pub time: f64,
    pub pose: PoseRecord,
    pub person: TrajectoryPoint,
    pub image: String,
    pub masks: Vec<MaskRef>,
    pub visible: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: SceneConfig,
    pub planes: Vec<PlaneEntry>,
    pub trajectory: String,
    pub frames: Vec<FrameRecord>,
}

fn draw_box<const D: usize>(rng: &mut Rng, region: &[[f64; D]; 2]) -> Vec<[f64; D]> {
    (0..BEZIER_CONTROL_POINTS)
        .map(|_| std::array::from_fn(|d| rng.uniform_in(region[0][d], region[1][d])))
        .collect()
}

/// Camera poses along a 3D Bézier path, looking at a second Bézier path with yaw jitter.
pub fn camera_poses(config: &SceneConfig, times: &[f64]) -> Result<Vec<Pose>, SimError> {
    let cam_ctrl = draw_box(&mut Rng::new(config.seed, STREAM_CAMERA), &config.camera_region);
    let tgt_ctrl = draw_box(&mut Rng::new(config.seed, STREAM_TARGET), &config.target_region);
    let mut jitter = Rng::new(config.seed, STREAM_JITTER);
    times
        .iter()
        .map(|&t| {
            let u = t / config.duration;
            let eye = Vector3::from(bezier_eval(&cam_ctrl, u).0);
            let target = Vector3::from(bezier_eval(&tgt_ctrl, u).0);
            let base = Pose::look_at(eye, target, Vector3::z())?;
            let yaw = jitter.normal() * config.yaw_jitter_deg.to_radians();
            let r = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).into_inner() * base.r;
            Ok(Pose::new(eye, r)?)
        })
        .collect()
}

pub fn person_path(config: &SceneConfig) -> Result<Vec<TrajectoryPoint>, SimError> {
    let ctrl = draw_box(&mut Rng::new(config.seed, STREAM_PERSON), &config.person_region);
    bezier_path(&ctrl, config.duration, config.fps)
}

/// Noise stream for one frame; independent of render order.
pub fn frame_noise(seed: u64, frame: usize) -> Rng {
    Rng::new(seed, STREAM_FRAME_NOISE + frame as u64)
}

fn create_dir(path: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(path).map_err(|e| SimError::io(path, e))
}

/// Renders every frame of `config` into `out_dir` and writes `manifest.json`.
pub fn generate_dataset(config: &SceneConfig, out_dir: &Path) -> Result<DatasetManifest, SimError> {
    config.validate()?;
    create_dir(&out_dir.join("frames"))?;
    create_dir(&out_dir.join("masks"))?;
    let walls = config.wall_planes()?;
    let light = config.lighting();
    let person = person_path(config)?;
    let times: Vec<f64> = person.iter().map(|p| p.t).collect();
    let poses = camera_poses(config, &times)?;

    let mut frames = Vec::with_capacity(person.len());
    for (i, (pose, who)) in poses.iter().zip(&person).enumerate() {
        let mut noise = frame_noise(config.seed, i);
        let (img, masks) = render_frame(&walls, &config.intrinsics, pose, [who.x, who.y], &light, config.noise_sigma, &mut noise);
        let image = format!("frames/frame_{i:05}.pfm");
        write_pfm(&out_dir.join(&image), &img)?;
        let mut refs = Vec::new();
        for (k, mask) in masks.iter().enumerate() {
            if mask.count_nonzero() == 0 {
                continue;
            }
            let path = format!("masks/frame_{i:05}_plane_{k:02}.pgm");
            write_pgm(&out_dir.join(&path), mask)?;
            refs.push(MaskRef { plane: k as u32, path });
        }
        frames.push(FrameRecord {
            index: i,
            time: who.t,
            pose: PoseRecord::from_pose(pose),
            person: *who,
            image,
            visible: refs.iter().map(|m| m.plane).collect(),
            masks: refs,
        });
    }
    write_trajectory(&out_dir.join("trajectory.csv"), &person)?;

    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        config: config.clone(),
        planes: config
            .walls
            .iter()
            .enumerate()
            .map(|(k, w)| PlaneEntry {
                id: k as u32,
                normal: w.normal,
                offset: w.offset,
                corners: w.corners,
                reflectivity: w.reflectivity,
            })
            .collect(),
        trajectory: "trajectory.csv".into(),
        frames,
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| SimError::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, SimError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| SimError::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| SimError::format(&path, e.to_string()))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == MANIFEST_VERSION as u64 => {}
        Some(v) => return Err(SimError::format(&path, format!("unsupported format_version {v}"))),
        None => return Err(SimError::format(&path, "missing format_version")),
    }
    serde_json::from_value(value).map_err(|e| SimError::format(&path, e.to_string()))
}
