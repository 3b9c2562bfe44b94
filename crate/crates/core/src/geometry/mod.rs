//! Poses, pinhole projection, planes and plane-to-plane homographies.

mod homography;
mod raster;

use nalgebra::{Matrix3, Matrix3x4, Vector3};

pub use homography::{homography_dlt, ransac_homography, read_matches, write_matches, Homography, Match};
pub use raster::{warp_image, Raster};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid geometry: {0}")]
    Invalid(String),
    #[error("homography estimation failed: {0}")]
    Estimation(String),
    #[error("correspondence file: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rigid camera pose. `r` maps camera-frame vectors to the global frame, so
/// `x_cam = rᵀ (x_global - p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub p: Vector3<f64>,
    pub r: Matrix3<f64>,
}

impl Pose {
    pub fn new(p: Vector3<f64>, r: Matrix3<f64>) -> Result<Self, GeometryError> {
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::Invalid("pose rotation is not a proper rotation".into()));
        }
        Ok(Self { p, r })
    }

    /// Camera at `eye` looking at `target`; image x points right, y down.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::Invalid("look-at target equals eye".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::Invalid("look-at direction parallel to up".into()))?;
        let down = forward.cross(&right);
        Self::new(eye, Matrix3::from_columns(&[right, down, forward]))
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r.transpose() * (x - self.p)
    }

    pub fn to_global(&self, x_cam: &Vector3<f64>) -> Vector3<f64> {
        self.r * x_cam + self.p
    }

    /// `[r | p]`, the camera-to-global transform.
    pub fn transform(&self) -> PlaneTransform {
        PlaneTransform::from_parts(self.r, self.p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(GeometryError::Invalid(format!("bad intrinsics {self:?}")))
        }
    }
}

/// Pixel coordinates of `x`, or `None` when it lies at or behind the camera plane.
pub fn project(pose: &Pose, k: &Intrinsics, x: &Vector3<f64>) -> Option<[f64; 2]> {
    let c = pose.to_camera(x);
    if c.z <= 0.0 {
        return None;
    }
    Some([k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy])
}

/// Unit direction (global frame) of the viewing ray through pixel `(u, v)`.
/// The ray starts at `pose.p`.
pub fn back_project(pose: &Pose, k: &Intrinsics, u: f64, v: f64) -> Vector3<f64> {
    let d = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    (pose.r * d).normalize()
}

/// Rectangle on the plane `normal · x = offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane3D {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub corners: [Vector3<f64>; 4],
}

impl Plane3D {
    pub fn new(normal: Vector3<f64>, offset: f64, corners: [Vector3<f64>; 4]) -> Result<Self, GeometryError> {
        if (normal.norm() - 1.0).abs() > 1e-12 {
            return Err(GeometryError::Invalid("plane normal is not unit length".into()));
        }
        if corners.iter().any(|c| (normal.dot(c) - offset).abs() >= 1e-9) {
            return Err(GeometryError::Invalid("plane corner off the plane".into()));
        }
        Ok(Self { normal, offset, corners })
    }

    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(x) - self.offset
    }

    /// Ray parameter where `origin + t dir` meets the rectangle, if `t > 0`.
    ///
    /// Corners are taken in order, so edges `c0→c1` and `c0→c3` span the rectangle.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = (self.offset - self.normal.dot(origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let hit = origin + dir * t;
        let e1 = self.corners[1] - self.corners[0];
        let e2 = self.corners[3] - self.corners[0];
        let rel = hit - self.corners[0];
        let a = rel.dot(&e1) / e1.norm_squared();
        let b = rel.dot(&e2) / e2.norm_squared();
        ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(t)
    }

    pub fn area(&self) -> f64 {
        (self.corners[1] - self.corners[0]).norm() * (self.corners[3] - self.corners[0]).norm()
    }
}

/// Mirror image of `x` across the infinite plane.
pub fn reflect_point(x: &Vector3<f64>, plane: &Plane3D) -> Vector3<f64> {
    reflect_across(x, &plane.normal, plane.offset)
}

/// Mirror image of `x` across the unbounded plane `normal . p = offset`.
pub fn reflect_across(x: &Vector3<f64>, normal: &Vector3<f64>, offset: f64) -> Vector3<f64> {
    x - normal * (2.0 * (normal.dot(x) - offset))
}

/// Affine map `[R | t]` from a plane's local frame to global coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneTransform(pub Matrix3x4<f64>);

impl PlaneTransform {
    pub fn from_parts(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.set_column(3, &t);
        Self(m)
    }

    pub fn identity() -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::zeros())
    }

    /// Local frame of a vertical wall: axes (along-wall, normal, up-ish), origin at `offset · normal`.
    /// Local `(a, b, 0)` is the floor-level point `a` along the wall and `b` in front of it.
    pub fn wall_frame(normal: &Vector3<f64>, offset: f64) -> Result<Self, GeometryError> {
        let along = normal
            .cross(&Vector3::z())
            .try_normalize(1e-9)
            .ok_or_else(|| GeometryError::Invalid("wall frame needs a non-horizontal plane".into()))?;
        let third = along.cross(normal);
        Ok(Self::from_parts(Matrix3::from_columns(&[along, *normal, third]), normal * offset))
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.column(3).into_owned()
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.translation()
    }

    /// Inverse of a rigid transform.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        Self::from_parts(rt, -(rt * self.translation()))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self::from_parts(self.rotation() * other.rotation(), self.rotation() * other.translation() + self.translation())
    }

    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.0[(i, j)]))
    }

    pub fn from_rows(rows: &[[f64; 4]; 3]) -> Self {
        Self(Matrix3x4::from_fn(|i, j| rows[i][j]))
    }
}

/// Homography induced by `plane` between the images of two poses sharing intrinsics `k`.
pub fn plane_induced_homography(a: &Pose, b: &Pose, k: &Intrinsics, plane: &Plane3D) -> Result<Homography, GeometryError> {
    let depth = plane.offset - plane.normal.dot(&a.p);
    if depth.abs() < 1e-12 {
        return Err(GeometryError::Invalid("camera lies on the plane".into()));
    }
    let kmat = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
    let kinv = kmat.try_inverse().expect("intrinsics are invertible");
    let shift = Matrix3::identity() + (a.p - b.p) * plane.normal.transpose() / depth;
    Homography::new(kmat * b.r.transpose() * shift * a.r * kinv)
}

pub fn apply_plane_transform(t: &PlaneTransform, x_cam: &Vector3<f64>) -> Vector3<f64> {
    t.apply(x_cam)
}
