//! Plane extraction: masked planes, per-plane homographies, ID tracking by
//! warped-mask overlap, difference images and top-M selection.

mod pipeline;

use nalgebra::Vector3;

use crate::geometry::{back_project, project, warp_image, Homography, Intrinsics, Match, Plane3D, Pose, Raster};
use crate::numerics::Rng;

pub use pipeline::{run_planes, FramePlanes, MatchSource, PlaneOptions, PlaneRecord, PlanesOutput, TrackRecord, PLANES_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum PlaneError {
    #[error("raster size mismatch: {0}")]
    Dimension(String),
    #[error("plane {plane} lost between frames {from} and {to}: {reason}")]
    TrackingLoss { plane: u32, from: usize, to: usize, reason: String },
    #[error("frame {0} has no visible planes")]
    Stall(usize),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Sim(#[from] crate::simulator::SimError),
    #[error("{0}")]
    Format(String),
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn of_mask(mask: &Raster) -> Option<Self> {
        let mut b: Option<BBox> = None;
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) != 0.0 {
                    let e = b.get_or_insert(BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
                    e.x0 = e.x0.min(x);
                    e.y0 = e.y0.min(y);
                    e.x1 = e.x1.max(x + 1);
                    e.y1 = e.y1.max(y + 1);
                }
            }
        }
        b
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// A raw frame restricted to one plane's mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPlane {
    pub id: u32,
    pub frame: usize,
    pub image: Raster,
    pub mask: Raster,
    pub bbox: Option<BBox>,
    pub area: usize,
}

fn same_size(a: &Raster, b: &Raster) -> Result<(), PlaneError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(PlaneError::Dimension(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// Product of a frame with a `{0, 1}` mask (any nonzero mask value counts as 1).
pub fn mask_apply(img: &Raster, mask: &Raster, id: u32, frame: usize) -> Result<MaskedPlane, PlaneError> {
    same_size(img, mask)?;
    let mask = Raster::new(mask.width, mask.height, mask.data.iter().map(|&m| if m != 0.0 { 1.0 } else { 0.0 }).collect());
    let image = img.mul(&mask);
    let area = mask.count_nonzero();
    Ok(MaskedPlane { id, frame, image, bbox: BBox::of_mask(&mask), mask, area })
}

/// Intersection over union of two binary masks; two empty masks score 0.
pub fn iou(a: &Raster, b: &Raster) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Warps a binary mask and keeps pixels whose interpolated coverage is at least `level`.
pub fn warp_mask(mask: &Raster, h: &Homography, level: f64) -> Raster {
    let w = warp_image(mask, h, mask.width, mask.height);
    Raster::new(w.width, w.height, w.data.iter().map(|&v| if v >= level { 1.0 } else { 0.0 }).collect())
}

/// A previous-frame plane offered for ID propagation.
#[derive(Debug, Clone)]
pub struct PrevPlane<'a> {
    pub id: u32,
    pub mask: &'a Raster,
    /// Map from the previous frame into the new one; `None` when tracking failed.
    pub homography: Option<Homography>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// ID per new mask, in the order the masks were given.
    pub ids: Vec<u32>,
    /// Which new masks inherited an old ID.
    pub inherited: Vec<bool>,
    pub retired: Vec<u32>,
}

fn first_pixel(mask: &Raster) -> usize {
    mask.data.iter().position(|&v| v != 0.0).unwrap_or(usize::MAX)
}

/// Greedy one-to-one matching of warped previous masks to new masks by IoU.
///
/// Candidates are visited by descending IoU, then ascending old ID, then the
/// new mask's first set pixel, so the result does not depend on list order.
/// Unmatched new masks get fresh IDs from `next_id` in first-pixel order.
pub fn assign_ids(prev: &[PrevPlane], new_masks: &[Raster], tau: f64, next_id: &mut u32) -> Result<Assignment, PlaneError> {
    for p in prev {
        for n in new_masks {
            same_size(p.mask, n)?;
        }
    }
    let anchors: Vec<usize> = new_masks.iter().map(first_pixel).collect();
    let mut cands = Vec::new();
    for p in prev {
        let Some(h) = &p.homography else { continue };
        let warped = warp_mask(p.mask, h, 0.5);
        for (j, n) in new_masks.iter().enumerate() {
            let score = iou(&warped, n);
            if score >= tau && score > 0.0 {
                cands.push((score, p.id, anchors[j], j));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ids = vec![None; new_masks.len()];
    let mut used = std::collections::BTreeSet::new();
    for (_, id, _, j) in cands {
        if ids[j].is_none() && !used.contains(&id) {
            ids[j] = Some(id);
            used.insert(id);
        }
    }
    let inherited = ids.iter().map(Option::is_some).collect();
    let mut fresh: Vec<usize> = (0..new_masks.len()).filter(|&j| ids[j].is_none()).collect();
    fresh.sort_by_key(|&j| (anchors[j], j));
    for j in fresh {
        ids[j] = Some(*next_id);
        *next_id += 1;
    }
    let mut retired: Vec<u32> = prev.iter().map(|p| p.id).filter(|id| !used.contains(id)).collect();
    retired.sort_unstable();
    Ok(Assignment { ids: ids.into_iter().map(|i| i.expect("every mask assigned")).collect(), inherited, retired })
}

/// `cur − warp(prev)` on the pixels where both the fully-covered warped mask and the current mask hold.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffImage {
    pub id: u32,
    pub frame: usize,
    pub image: Raster,
    pub valid: Raster,
}

pub fn diff_image(prev: &MaskedPlane, cur: &MaskedPlane, h: &Homography) -> Result<DiffImage, PlaneError> {
    if prev.id != cur.id {
        return Err(PlaneError::Format(format!("diff between planes {} and {}", prev.id, cur.id)));
    }
    same_size(&prev.image, &cur.image)?;
    let (w, ht) = (cur.image.width, cur.image.height);
    let warped = warp_image(&prev.image, h, w, ht);
    let warped_mask = warp_image(&prev.mask, h, w, ht);
    let mut image = Raster::zeros(w, ht);
    let mut valid = Raster::zeros(w, ht);
    for i in 0..w * ht {
        if warped_mask.data[i] >= 1.0 - 1e-9 && cur.mask.data[i] != 0.0 {
            valid.data[i] = 1.0;
            image.data[i] = cur.image.data[i] - warped.data[i];
        }
    }
    Ok(DiffImage { id: cur.id, frame: cur.frame, image, valid })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopPlanes {
    pub ids: Vec<u32>,
    /// Fewer than the requested number of planes were visible.
    pub short: bool,
}

/// The `m` largest planes by pixel area, descending, lower ID first on ties.
pub fn select_top_m(visible: &[(u32, usize)], m: usize, frame: usize) -> Result<TopPlanes, PlaneError> {
    if visible.is_empty() {
        return Err(PlaneError::Stall(frame));
    }
    let mut v = visible.to_vec();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = v.len() < m;
    v.truncate(m);
    Ok(TopPlanes { ids: v.into_iter().map(|(id, _)| id).collect(), short })
}

/// Synthetic feature matches: mask pixels of frame `a` (every `step` pixels) are
/// lifted onto the known wall and projected into frame `b`.
#[allow(clippy::too_many_arguments)]
pub fn simulator_matches(
    a: &Pose,
    b: &Pose,
    k: &Intrinsics,
    wall: &Plane3D,
    mask_a: &Raster,
    step: usize,
    noise_px: f64,
    outlier_fraction: f64,
    rng: &mut Rng,
) -> Vec<Match> {
    let mut out = Vec::new();
    let (w, h) = (k.width as f64, k.height as f64);
    for v in (0..mask_a.height).step_by(step.max(1)) {
        for u in (0..mask_a.width).step_by(step.max(1)) {
            if mask_a.get(u, v) == 0.0 {
                continue;
            }
            let dir = back_project(a, k, u as f64, v as f64);
            let denom = wall.normal.dot(&dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = (wall.offset - wall.normal.dot(&a.p)) / denom;
            if t <= 0.0 {
                continue;
            }
            let x: Vector3<f64> = a.p + dir * t;
            let Some(q) = project(b, k, &x) else { continue };
            if !(0.0..=w - 1.0).contains(&q[0]) || !(0.0..=h - 1.0).contains(&q[1]) {
                continue;
            }
            out.push(Match::new([u as f64, v as f64], q));
        }
    }
    if noise_px > 0.0 || outlier_fraction > 0.0 {
        for m in &mut out {
            if outlier_fraction > 0.0 && rng.uniform() < outlier_fraction {
                m.u2 = rng.uniform_in(0.0, w - 1.0);
                m.v2 = rng.uniform_in(0.0, h - 1.0);
            } else if noise_px > 0.0 {
                m.u2 += noise_px * rng.normal();
                m.v2 += noise_px * rng.normal();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::homography_dlt;
    use nalgebra::Matrix3;

    fn random_mask(rng: &mut Rng, w: usize, h: usize, p: f64) -> Raster {
        Raster::from_fn(w, h, |_, _| if rng.uniform() < p { 1.0 } else { 0.0 })
    }

    fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Raster {
        Raster::from_fn(w, h, |x, y| if (x0..x1).contains(&x) && (y0..y1).contains(&y) { 1.0 } else { 0.0 })
    }

    #[test]
    fn mask_apply_cases() {
        let mut rng = Rng::new(1, 0);
        let img = Raster::from_fn(8, 6, |_, _| rng.normal());
        let all = mask_apply(&img, &Raster::from_fn(8, 6, |_, _| 1.0), 3, 0).unwrap();
        assert_eq!(all.image, img);
        assert_eq!(all.area, 48);
        assert_eq!(all.bbox, Some(BBox { x0: 0, y0: 0, x1: 8, y1: 6 }));
        let none = mask_apply(&img, &Raster::zeros(8, 6), 3, 0).unwrap();
        assert!(none.image.data.iter().all(|&v| v == 0.0));
        assert_eq!((none.area, none.bbox), (0, None));
        let m = random_mask(&mut rng, 8, 6, 0.3);
        let mut count = 0;
        for y in 0..6 {
            for x in 0..8 {
                if m.get(x, y) == 1.0 {
                    count += 1;
                }
            }
        }
        assert_eq!(mask_apply(&img, &m, 0, 0).unwrap().area, count);
        assert!(mask_apply(&img, &Raster::zeros(4, 4), 0, 0).is_err());
    }

    #[test]
    fn iou_matches_counting_oracle() {
        let mut rng = Rng::new(2, 0);
        for _ in 0..50 {
            let a = random_mask(&mut rng, 16, 12, 0.4);
            let b = random_mask(&mut rng, 16, 12, 0.4);
            let mut both = 0.0;
            let mut either = 0.0;
            for i in 0..a.data.len() {
                if a.data[i] == 1.0 && b.data[i] == 1.0 {
                    both += 1.0;
                }
                if a.data[i] == 1.0 || b.data[i] == 1.0 {
                    either += 1.0;
                }
            }
            assert!((iou(&a, &b) - both / either).abs() < 1e-12);
        }
    }

    #[test]
    fn ids_survive_zero_motion_and_new_planes_get_fresh_ids() {
        let a = rect_mask(20, 10, 0, 0, 8, 10);
        let b = rect_mask(20, 10, 8, 0, 20, 10);
        let prev = [
            PrevPlane { id: 4, mask: &a, homography: Some(Homography::identity()) },
            PrevPlane { id: 7, mask: &b, homography: Some(Homography::identity()) },
        ];
        let mut next = 8;
        let r = assign_ids(&prev, &[b.clone(), a.clone()], 0.5, &mut next).unwrap();
        assert_eq!(r.ids, vec![7, 4]);
        assert!(r.retired.is_empty());

        let fresh = rect_mask(20, 10, 18, 0, 20, 2);
        let b_cut = rect_mask(20, 10, 8, 2, 20, 10);
        let r = assign_ids(&prev, &[a.clone(), b_cut, fresh], 0.5, &mut next).unwrap();
        assert_eq!(r.ids, vec![4, 7, 8]);
        assert_eq!(next, 9);
        assert_eq!(r.inherited, vec![true, true, false]);

        let r = assign_ids(&prev[..1], &[], 0.5, &mut next).unwrap();
        assert_eq!(r.retired, vec![4]);
    }

    #[test]
    fn assignment_ignores_list_order() {
        let mut rng = Rng::new(9, 9);
        for _ in 0..20 {
            let olds: Vec<Raster> = (0..3).map(|_| random_mask(&mut rng, 12, 8, 0.5)).collect();
            let news: Vec<Raster> = (0..4).map(|_| random_mask(&mut rng, 12, 8, 0.5)).collect();
            let prev: Vec<PrevPlane> = olds
                .iter()
                .enumerate()
                .map(|(i, m)| PrevPlane { id: i as u32, mask: m, homography: Some(Homography::identity()) })
                .collect();
            let mut n1 = 10;
            let a = assign_ids(&prev, &news, 0.0, &mut n1).unwrap();
            let rev_news: Vec<Raster> = news.iter().rev().cloned().collect();
            let rev_prev: Vec<PrevPlane> = prev.iter().rev().cloned().collect();
            let mut n2 = 10;
            let b = assign_ids(&rev_prev, &rev_news, 0.0, &mut n2).unwrap();
            let b_ids: Vec<u32> = b.ids.iter().rev().copied().collect();
            assert_eq!(a.ids, b_ids);
            assert_eq!(a.retired, b.retired);
        }
    }

    #[test]
    fn diff_cases() {
        let mut rng = Rng::new(3, 3);
        let img = Raster::from_fn(10, 8, |_, _| rng.uniform());
        let mask = rect_mask(10, 8, 1, 1, 9, 7);
        let p = mask_apply(&img, &mask, 1, 0).unwrap();
        let d = diff_image(&p, &p, &Homography::identity()).unwrap();
        assert!(d.image.data.iter().all(|&v| v == 0.0));
        assert_eq!(d.valid, mask);

        // static camera, moving person: plain subtraction on the mask
        let img2 = Raster::from_fn(10, 8, |_, _| rng.uniform());
        let q = mask_apply(&img2, &mask, 1, 1).unwrap();
        let d = diff_image(&p, &q, &Homography::identity()).unwrap();
        for i in 0..80 {
            let expected = if mask.data[i] == 1.0 { img2.data[i] - img.data[i] } else { 0.0 };
            assert_eq!(d.image.data[i], expected);
        }

        let other = mask_apply(&img2, &mask, 2, 1).unwrap();
        assert!(diff_image(&p, &other, &Homography::identity()).is_err());
    }

    #[test]
    fn diff_swaps_sign_under_inverse_translation() {
        let mut rng = Rng::new(5, 5);
        let a = mask_apply(&Raster::from_fn(16, 12, |_, _| rng.uniform()), &rect_mask(16, 12, 1, 1, 12, 10), 0, 0).unwrap();
        let b = mask_apply(&Raster::from_fn(16, 12, |_, _| rng.uniform()), &rect_mask(16, 12, 3, 0, 15, 11), 0, 1).unwrap();
        let h = Homography::new(Matrix3::new(1.0, 0.0, 2.0, 0.0, 1.0, -1.0, 0.0, 0.0, 1.0)).unwrap();
        let fwd = diff_image(&a, &b, &h).unwrap();
        let back = diff_image(&b, &a, &h.inverse()).unwrap();
        // the backward difference lives in frame a; map it forward for comparison
        let back_fwd = warp_image(&back.image, &h, 16, 12);
        let valid_fwd = warp_image(&back.valid, &h, 16, 12);
        let mut compared = 0;
        for i in 0..fwd.image.data.len() {
            if fwd.valid.data[i] == 1.0 && valid_fwd.data[i] == 1.0 {
                assert!((fwd.image.data[i] + back_fwd.data[i]).abs() < 1e-6);
                compared += 1;
            }
        }
        assert!(compared > 50);
    }

    #[test]
    fn top_m_selection() {
        assert_eq!(select_top_m(&[(5, 10)], 3, 0).unwrap(), TopPlanes { ids: vec![5], short: true });
        let areas = [(1, 300), (2, 500), (3, 200), (4, 400)];
        assert_eq!(select_top_m(&areas, 3, 0).unwrap(), TopPlanes { ids: vec![2, 4, 1], short: false });
        assert_eq!(select_top_m(&[(9, 50), (3, 50)], 2, 0).unwrap().ids, vec![3, 9]);
        assert!(matches!(select_top_m(&[], 3, 7), Err(PlaneError::Stall(7))));
    }

    fn wall() -> Plane3D {
        Plane3D::new(
            -Vector3::x(),
            -4.0,
            [Vector3::new(4.0, 0.0, 0.0), Vector3::new(4.0, 4.0, 0.0), Vector3::new(4.0, 4.0, 2.5), Vector3::new(4.0, 0.0, 2.5)],
        )
        .unwrap()
    }

    fn k() -> Intrinsics {
        Intrinsics { fx: 46.6, fy: 46.6, cx: 32.0, cy: 24.0, width: 64, height: 48 }
    }

    #[test]
    fn simulator_match_properties() {
        let full = Raster::from_fn(64, 48, |_, _| 1.0);
        let a = Pose::look_at(Vector3::new(1.0, 2.0, 1.2), Vector3::new(4.0, 2.0, 1.2), Vector3::z()).unwrap();
        let mut rng = Rng::new(0, 0);
        let same = simulator_matches(&a, &a, &k(), &wall(), &full, 4, 0.0, 0.0, &mut rng);
        assert!(same.len() > 100);
        for m in &same {
            assert!((m.u1 - m.u2).abs() < 1e-9 && (m.v1 - m.v2).abs() < 1e-9);
        }
        // sliding parallel to the wall shifts every pixel by the same amount
        let b = Pose::new(a.p + Vector3::new(0.0, 0.1, 0.05), a.r).unwrap();
        let shifted = simulator_matches(&a, &b, &k(), &wall(), &full, 4, 0.0, 0.0, &mut rng);
        let d0 = [shifted[0].u2 - shifted[0].u1, shifted[0].v2 - shifted[0].v1];
        for m in &shifted {
            assert!((m.u2 - m.u1 - d0[0]).abs() < 1e-9 && (m.v2 - m.v1 - d0[1]).abs() < 1e-9);
        }
        let c = Pose::look_at(Vector3::new(1.3, 1.7, 1.1), Vector3::new(4.0, 2.3, 1.0), Vector3::z()).unwrap();
        let ms = simulator_matches(&a, &c, &k(), &wall(), &full, 4, 0.0, 0.0, &mut rng);
        let h = homography_dlt(&ms).unwrap();
        for m in &ms {
            assert!(h.transfer_error(m) < 1e-6);
        }
    }
}
