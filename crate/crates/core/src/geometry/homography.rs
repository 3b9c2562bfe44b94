use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::GeometryError;
use crate::numerics::Rng;

/// Pixel correspondence `src -> dst`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Match {
    pub u1: f64,
    pub v1: f64,
    pub u2: f64,
    pub v2: f64,
}

impl Match {
    pub fn new(src: [f64; 2], dst: [f64; 2]) -> Self {
        Self { u1: src[0], v1: src[1], u2: dst[0], v2: dst[1] }
    }

    pub fn src(&self) -> [f64; 2] {
        [self.u1, self.v1]
    }

    pub fn dst(&self) -> [f64; 2] {
        [self.u2, self.v2]
    }
}

/// Projective map between pixel planes, scaled so the largest-magnitude entry is `+1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(h: Matrix3<f64>) -> Result<Self, GeometryError> {
        let big = *h.iter().max_by(|a, b| a.abs().total_cmp(&b.abs())).expect("3x3 matrix");
        if !big.is_finite() || big == 0.0 {
            return Err(GeometryError::Estimation("zero or non-finite homography".into()));
        }
        let h = h / big;
        if !(h.determinant().abs() > 1e-12) {
            return Err(GeometryError::Estimation("singular homography".into()));
        }
        Ok(Self(h))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Image of pixel `p`; `None` when it maps to infinity.
    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let q = self.0 * Vector3::new(p[0], p[1], 1.0);
        if q.z.abs() < 1e-300 {
            return None;
        }
        let r = [q.x / q.z, q.y / q.z];
        (r[0].is_finite() && r[1].is_finite()).then_some(r)
    }

    pub fn inverse(&self) -> Self {
        let inv = self.0.try_inverse().expect("homographies are nonsingular");
        Self::new(inv).expect("inverse of a nonsingular matrix")
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Result<Self, GeometryError> {
        Self::new(self.0 * other.0)
    }

    pub fn transfer_error(&self, m: &Match) -> f64 {
        match self.apply(m.src()) {
            Some([u, v]) => (u - m.u2).hypot(v - m.v2),
            None => f64::INFINITY,
        }
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.0[(i, j)]))
    }

    pub fn from_rows(rows: &[[f64; 3]; 3]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_fn(|i, j| rows[i][j]))
    }
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn normalizer(points: impl Iterator<Item = [f64; 2]> + Clone) -> Result<Matrix3<f64>, GeometryError> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (mx, my) = (sx / n, sy / n);
    let mean_dist = points.map(|p| (p[0] - mx).hypot(p[1] - my)).sum::<f64>() / n;
    if !(mean_dist > 1e-12) {
        return Err(GeometryError::Estimation("coincident points".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0))
}

fn apply_affine(t: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    [t[(0, 0)] * p[0] + t[(0, 2)], t[(1, 1)] * p[1] + t[(1, 2)]]
}

fn has_collinear_triple(points: &[[f64; 2]], tol: f64) -> bool {
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            for k in j + 1..points.len() {
                let (a, b, c) = (points[i], points[j], points[k]);
                let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
                if cross.abs() < tol {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalized direct linear transform.
pub fn homography_dlt(matches: &[Match]) -> Result<Homography, GeometryError> {
    if matches.len() < 4 {
        return Err(GeometryError::Estimation(format!("need at least 4 matches, got {}", matches.len())));
    }
    let t1 = normalizer(matches.iter().map(Match::src))?;
    let t2 = normalizer(matches.iter().map(Match::dst))?;
    let src: Vec<[f64; 2]> = matches.iter().map(|m| apply_affine(&t1, m.src())).collect();
    let dst: Vec<[f64; 2]> = matches.iter().map(|m| apply_affine(&t2, m.dst())).collect();
    if matches.len() == 4 && has_collinear_triple(&src, 1e-9) {
        return Err(GeometryError::Estimation("three collinear source points".into()));
    }

    // two rows per match; zero rows pad a minimal set so the SVD yields a full 9x9 Vᵀ
    let rows = (2 * matches.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let (x, y, u, v) = (s[0], s[1], d[0], d[1]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    // a second (near-)null direction means the solution is not unique
    if svd.singular_values[order[1]] <= 1e-10 * svd.singular_values[order[8]] {
        return Err(GeometryError::Estimation("degenerate correspondence configuration".into()));
    }
    let h = vt.row(order[0]);
    let hn = Matrix3::from_fn(|i, j| h[3 * i + j]);
    let t2_inv = t2.try_inverse().expect("similarity is invertible");
    Homography::new(t2_inv * hn * t1)
}

/// Fixed-iteration RANSAC over minimal 4-point samples, refit on the best consensus set.
pub fn ransac_homography(
    matches: &[Match],
    threshold_px: f64,
    iterations: usize,
    rng: &mut Rng,
) -> Result<(Homography, Vec<bool>), GeometryError> {
    let n = matches.len();
    if n < 4 {
        return Err(GeometryError::Estimation(format!("need at least 4 matches, got {n}")));
    }
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..iterations {
        let mut idx = [0usize; 4];
        let mut k = 0;
        while k < 4 {
            let c = rng.below(n as u32) as usize;
            if !idx[..k].contains(&c) {
                idx[k] = c;
                k += 1;
            }
        }
        let sample: Vec<Match> = idx.iter().map(|&i| matches[i]).collect();
        let Ok(h) = homography_dlt(&sample) else { continue };
        let flags: Vec<bool> = matches.iter().map(|m| h.transfer_error(m) < threshold_px).collect();
        let count = flags.iter().filter(|&&f| f).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, flags));
        }
    }
    let Some((count, flags)) = best else {
        return Err(GeometryError::Estimation("no non-degenerate sample".into()));
    };
    if count < 4 {
        return Err(GeometryError::Estimation(format!("best model has only {count} inliers")));
    }
    let inliers: Vec<Match> = matches.iter().zip(&flags).filter(|(_, &f)| f).map(|(m, _)| *m).collect();
    let h = homography_dlt(&inliers)?;
    let refit: Vec<bool> = matches.iter().map(|m| h.transfer_error(m) < threshold_px).collect();
    if refit.iter().filter(|&&f| f).count() >= count {
        Ok((h, refit))
    } else {
        Ok((h, flags))
    }
}

pub fn read_matches(path: &Path) -> Result<Vec<Match>, GeometryError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["u1", "v1", "u2", "v2"] {
        return Err(GeometryError::Invalid(format!("{}: expected header u1,v1,u2,v2", path.display())));
    }
    let matches = reader.deserialize().collect::<Result<Vec<Match>, _>>()?;
    Ok(matches)
}

pub fn write_matches(path: &Path, matches: &[Match]) -> Result<(), GeometryError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["u1", "v1", "u2", "v2"])?;
    for m in matches {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}
