use super::Homography;

/// Row-major single-channel image. Pixel `(x, y)` has its center at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "raster size mismatch");
        Self { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Value at signed coordinates, zero outside the image.
    pub fn get_or_zero(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.get(x as usize, y as usize)
        }
    }

    /// Bilinear sample with zero padding. Coordinates within 1e-9 of an
    /// integer are snapped so round-off in `h⁻¹` does not blur exact shifts.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let snap = |c: f64| if (c - c.round()).abs() < 1e-9 { c.round() } else { c };
        let (x, y) = (snap(x), snap(y));
        if !(x.is_finite() && y.is_finite()) || x <= -1.0 || y <= -1.0 || x >= self.width as f64 || y >= self.height as f64 {
            return 0.0;
        }
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as i64, y0 as i64);
        let mut acc = 0.0;
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                let w = wx * wy;
                if w != 0.0 {
                    acc += w * self.get_or_zero(xi + dx, yi + dy);
                }
            }
        }
        acc
    }

    pub fn mul(&self, other: &Raster) -> Raster {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Raster::new(self.width, self.height, self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Inverse-mapping warp: output pixel `q` takes the bilinear sample of `img` at `h⁻¹ q`.
/// `h` maps source pixels to output pixels.
pub fn warp_image(img: &Raster, h: &Homography, width: usize, height: usize) -> Raster {
    let inv = h.inverse();
    Raster::from_fn(width, height, |x, y| match inv.apply([x as f64, y as f64]) {
        Some([sx, sy]) => img.sample(sx, sy),
        None => 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::homography::tests::random_homography;
    use crate::numerics::Rng;
    use nalgebra::{Matrix3, Vector3};

    fn noise_image(rng: &mut Rng, w: usize, h: usize) -> Raster {
        Raster::from_fn(w, h, |_, _| rng.uniform())
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut rng = Rng::new(1, 2);
        let img = noise_image(&mut rng, 17, 11);
        assert_eq!(warp_image(&img, &Homography::identity(), 17, 11), img);
    }

    #[test]
    fn integer_translation_shifts_pixels() {
        let mut rng = Rng::new(4, 2);
        let img = noise_image(&mut rng, 10, 8);
        let h = Homography::new(Matrix3::new(1.0, 0.0, 3.0, 0.0, 1.0, -2.0, 0.0, 0.0, 1.0)).unwrap();
        let out = warp_image(&img, &h, 10, 8);
        for y in 0..8 {
            for x in 0..10 {
                let expected = img.get_or_zero(x as i64 - 3, y as i64 + 2);
                assert_eq!(out.get(x, y), expected);
            }
        }
    }

    #[test]
    fn random_warp_matches_per_pixel_oracle() {
        let mut rng = Rng::new(8, 8);
        let img = noise_image(&mut rng, 64, 48);
        for _ in 0..5 {
            let m = random_homography(&mut rng);
            let h = Homography::new(m).unwrap();
            let out = warp_image(&img, &h, 64, 48);
            let minv = m.try_inverse().unwrap();
            for y in 0..48 {
                for x in 0..64 {
                    let q = minv * Vector3::new(x as f64, y as f64, 1.0);
                    let (sx, sy) = (q.x / q.z, q.y / q.z);
                    let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
                    let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
                    let expected = (1.0 - ax) * (1.0 - ay) * img.get_or_zero(x0, y0)
                        + ax * (1.0 - ay) * img.get_or_zero(x0 + 1, y0)
                        + (1.0 - ax) * ay * img.get_or_zero(x0, y0 + 1)
                        + ax * ay * img.get_or_zero(x0 + 1, y0 + 1);
                    assert!((out.get(x, y) - expected).abs() < 1e-12);
                }
            }
        }
    }
}
