use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Lighting, SimError};
use crate::geometry::{Intrinsics, Plane3D};

/// A wall rectangle with its inward unit normal and diffuse reflectivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallConfig {
    pub normal: [f64; 3],
    pub offset: f64,
    pub corners: [[f64; 3]; 4],
    pub reflectivity: f64,
}

/// Which side of an axis-aligned room a wall closes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    West,
    East,
    South,
    North,
}

impl WallConfig {
    /// Full-height wall on one side of the room `[0, lx] x [0, ly] x [0, lz]`.
    pub fn room_side(room: [f64; 3], side: Side, reflectivity: f64) -> Self {
        let [lx, ly, lz] = room;
        let (normal, offset, corners) = match side {
            Side::West => ([1.0, 0.0, 0.0], 0.0, [[0.0, ly, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, lz], [0.0, ly, lz]]),
            Side::East => ([-1.0, 0.0, 0.0], -lx, [[lx, 0.0, 0.0], [lx, ly, 0.0], [lx, ly, lz], [lx, 0.0, lz]]),
            Side::South => ([0.0, 1.0, 0.0], 0.0, [[0.0, 0.0, 0.0], [lx, 0.0, 0.0], [lx, 0.0, lz], [0.0, 0.0, lz]]),
            Side::North => ([0.0, -1.0, 0.0], -ly, [[lx, ly, 0.0], [0.0, ly, 0.0], [0.0, ly, lz], [lx, ly, lz]]),
        };
        Self { normal, offset, corners, reflectivity }
    }

    pub fn plane(&self) -> Result<Plane3D, SimError> {
        Ok(Plane3D::new(Vector3::from(self.normal), self.offset, self.corners.map(Vector3::from))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Room extents; the room spans `[0, room[i]]` on each axis.
    pub room: [f64; 3],
    pub walls: Vec<WallConfig>,
    pub ambient: f64,
    pub source_intensity: f64,
    pub source_height: f64,
    #[serde(default = "default_min_range")]
    pub min_range: f64,
    pub noise_sigma: f64,
    pub fps: f64,
    pub duration: f64,
    pub intrinsics: Intrinsics,
    pub seed: u64,
    /// `[min, max]` box the person's control points are drawn from.
    pub person_region: [[f64; 2]; 2],
    pub camera_region: [[f64; 3]; 2],
    /// Box the camera's look-at control points are drawn from.
    pub target_region: [[f64; 3]; 2],
    #[serde(default)]
    pub yaw_jitter_deg: f64,
}

fn default_min_range() -> f64 {
    0.25
}

impl SceneConfig {
    /// A 4 x 4 x 2.5 m room seen by a 64 x 48 camera at 10 fps.
    pub fn desk(frames: usize, sides: &[Side]) -> Self {
        let room = [4.0, 4.0, 2.5];
        Self {
            room,
            walls: sides.iter().map(|&s| WallConfig::room_side(room, s, 0.8)).collect(),
            ambient: 0.05,
            source_intensity: 1.0,
            source_height: 1.0,
            min_range: 0.25,
            noise_sigma: 0.005,
            fps: 10.0,
            duration: frames as f64 / 10.0,
            intrinsics: Intrinsics { fx: 46.6, fy: 46.6, cx: 32.0, cy: 24.0, width: 64, height: 48 },
            seed: 0,
            person_region: [[0.8, 0.8], [3.2, 3.2]],
            camera_region: [[1.2, 0.3, 1.2], [2.0, 0.8, 1.6]],
            target_region: [[1.6, 3.0, 0.9], [2.4, 4.0, 1.3]],
            yaw_jitter_deg: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.room.iter().any(|&l| !(l > 0.0)) {
            return bad("room extents must be positive".into());
        }
        if self.walls.is_empty() {
            return bad("scene has no walls".into());
        }
        for (i, w) in self.walls.iter().enumerate() {
            if !(0.0..=1.0).contains(&w.reflectivity) {
                return bad(format!("wall {i}: reflectivity outside [0, 1]"));
            }
            let axis_aligned = w.normal.iter().filter(|&&c| c.abs() == 1.0).count() == 1
                && w.normal.iter().filter(|&&c| c == 0.0).count() == 2;
            if !axis_aligned {
                return bad(format!("wall {i}: normal is not axis-aligned"));
            }
            w.plane().map_err(|e| SimError::Config(format!("wall {i}: {e}")))?;
        }
        if self.ambient < 0.0 || !(self.source_intensity > 0.0) || !(self.min_range > 0.0) || self.noise_sigma < 0.0 {
            return bad("ambient, noise must be >= 0 and intensity, min_range > 0".into());
        }
        self.intrinsics.validate()?;
        super::frame_times(self.duration, self.fps)?;
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.fps * self.duration).round() as usize
    }

    /// Largest horizontal room extent; positions are normalized by it.
    pub fn scale(&self) -> f64 {
        self.room[0].max(self.room[1])
    }

    pub fn lighting(&self) -> Lighting {
        Lighting {
            ambient: self.ambient,
            intensity: self.source_intensity,
            source_height: self.source_height,
            min_range: self.min_range,
        }
    }

    pub fn wall_planes(&self) -> Result<Vec<(Plane3D, f64)>, SimError> {
        self.walls.iter().map(|w| Ok((w.plane()?, w.reflectivity))).collect()
    }
}
