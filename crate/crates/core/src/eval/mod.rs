//! Trajectory metrics and the evaluation report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fusion::TrackPoint;
use crate::simulator::TrajectoryPoint;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no estimate lies within half a frame interval of the ground truth")]
    EmptyOverlap,
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

/// Ground-truth / estimate index pairs matched by nearest time stamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Association {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: usize,
    pub unmatched_est: usize,
}

/// Median spacing of the ground-truth time stamps.
pub fn frame_interval(gt: &[TrajectoryPoint]) -> Option<f64> {
    let mut d: Vec<f64> = gt.windows(2).map(|w| w[1].t - w[0].t).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Each estimate proposes its nearest ground-truth sample within `half_window`;
/// closer proposals win when two estimates want the same sample.
pub fn associate(gt: &[TrajectoryPoint], est: &[TrackPoint], half_window: f64) -> Association {
    let mut proposals: Vec<(f64, usize, usize)> = Vec::new();
    for (j, e) in est.iter().enumerate() {
        let k = gt.partition_point(|g| g.t < e.t);
        let best = [k.checked_sub(1), (k < gt.len()).then_some(k)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (gt[a].t - e.t).abs().total_cmp(&(gt[b].t - e.t).abs()).then(a.cmp(&b)));
        if let Some(i) = best {
            let d = (gt[i].t - e.t).abs();
            if d <= half_window {
                proposals.push((d, i, j));
            }
        }
    }
    proposals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
    let mut taken = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in proposals {
        if !taken[i] {
            taken[i] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_by_key(|&(_, j)| j);
    Association { unmatched_gt: gt.len() - pairs.len(), unmatched_est: est.len() - pairs.len(), pairs }
}

fn associate_default(gt: &[TrajectoryPoint], est: &[TrackPoint]) -> Result<Association, EvalError> {
    let half = frame_interval(gt).map_or(f64::INFINITY, |d| d / 2.0);
    let a = associate(gt, est, half);
    if a.pairs.is_empty() {
        return Err(EvalError::EmptyOverlap);
    }
    Ok(a)
}

/// Per-pair position errors in millimetres, with their ground-truth time stamps.
pub fn ate_series(gt: &[TrajectoryPoint], est: &[TrackPoint]) -> Result<Vec<(f64, f64)>, EvalError> {
    let a = associate_default(gt, est)?;
    Ok(a.pairs
        .iter()
        .map(|&(i, j)| (gt[i].t, 1000.0 * (gt[i].x - est[j].x).hypot(gt[i].y - est[j].y)))
        .collect())
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut acc) = (0usize, 0.0);
    for v in values {
        n += 1;
        acc += v;
    }
    (acc / n as f64).sqrt()
}

/// Root mean squared position error in millimetres.
pub fn rmse_x(gt: &[TrajectoryPoint], est: &[TrackPoint]) -> Result<f64, EvalError> {
    let a = associate_default(gt, est)?;
    Ok(1000.0 * rms(a.pairs.iter().map(|&(i, j)| (gt[i].x - est[j].x).powi(2) + (gt[i].y - est[j].y).powi(2))))
}

/// Root mean squared velocity error in millimetres per second.
pub fn rmse_v(gt: &[TrajectoryPoint], est: &[TrackPoint]) -> Result<f64, EvalError> {
    let a = associate_default(gt, est)?;
    Ok(1000.0 * rms(a.pairs.iter().map(|&(i, j)| (gt[i].vx - est[j].vx).powi(2) + (gt[i].vy - est[j].vy).powi(2))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile `p` of sorted values by linear interpolation between closest ranks.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<Summary, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyOverlap);
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(Summary { min: s[0], q1: quantile(&s, 0.25), median: quantile(&s, 0.5), q3: quantile(&s, 0.75), max: s[s.len() - 1] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AteSample {
    pub t: f64,
    pub ate_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub format_version: u32,
    pub rmse_x_mm: f64,
    pub rmse_v_mm_s: f64,
    pub ate: Vec<AteSample>,
    pub ate_summary: Summary,
    pub matched: usize,
    pub unmatched_gt: usize,
    pub unmatched_est: usize,
    pub config_digest: String,
}

impl Report {
    pub fn compute(gt: &[TrajectoryPoint], est: &[TrackPoint], config_digest: String) -> Result<Self, EvalError> {
        let a = associate_default(gt, est)?;
        let ate: Vec<AteSample> = ate_series(gt, est)?.into_iter().map(|(t, ate_mm)| AteSample { t, ate_mm }).collect();
        let values: Vec<f64> = ate.iter().map(|s| s.ate_mm).collect();
        Ok(Self {
            format_version: REPORT_VERSION,
            rmse_x_mm: rmse_x(gt, est)?,
            rmse_v_mm_s: rmse_v(gt, est)?,
            ate_summary: summarize(&values)?,
            ate,
            matched: a.pairs.len(),
            unmatched_gt: a.unmatched_gt,
            unmatched_est: a.unmatched_est,
            config_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json + "\n").map_err(|e| format_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| format_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| format_err(path, e))
    }

    /// Plot-ready `t,ate_mm` rows.
    pub fn write_ate_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
        for s in &self.ate {
            w.serialize(s).map_err(|e| format_err(path, e))?;
        }
        w.flush().map_err(|e| format_err(path, e))
    }
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Format { path: path.to_path_buf(), msg: e.to_string() }
}

/// Hex SHA-256 of the given byte chunks, each length-prefixed.
pub fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::{prop_assert, proptest};

    fn gt_path(n: usize, rng: &mut Rng) -> Vec<TrajectoryPoint> {
        (0..n)
            .map(|i| TrajectoryPoint { t: i as f64 * 0.1, x: rng.uniform_in(0.0, 4.0), y: rng.uniform_in(0.0, 4.0), vx: rng.normal(), vy: rng.normal() })
            .collect()
    }

    fn copy(gt: &[TrajectoryPoint]) -> Vec<TrackPoint> {
        gt.iter().map(|g| TrackPoint { t: g.t, x: g.x, y: g.y, vx: g.vx, vy: g.vy, planes_used: 1, flag: 0 }).collect()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = gt_path(20, &mut Rng::new(1, 1));
        let r = Report::compute(&gt, &copy(&gt), "d".into()).unwrap();
        assert_eq!((r.rmse_x_mm, r.rmse_v_mm_s, r.ate_summary.max), (0.0, 0.0, 0.0));
        assert!(r.ate.iter().all(|s| s.ate_mm == 0.0));
        assert_eq!((r.matched, r.unmatched_gt, r.unmatched_est), (20, 0, 0));
    }

    #[test]
    fn constant_offsets() {
        let gt = gt_path(30, &mut Rng::new(2, 2));
        let mut est = copy(&gt);
        est.iter_mut().for_each(|e| e.x += 0.010);
        assert!((rmse_x(&gt, &est).unwrap() - 10.0).abs() < 1e-9);
        let mut est = copy(&gt);
        est.iter_mut().for_each(|e| e.vy += 0.001);
        assert!((rmse_v(&gt, &est).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn association_window_and_gaps() {
        let gt = gt_path(10, &mut Rng::new(3, 3));
        let mut est = copy(&gt);
        est.remove(4);
        est[0].t += 0.04;
        est[1].t += 0.06; // nearer to sample 2, which is claimed by its own estimate
        let a = associate(&gt, &est, 0.05);
        assert!(a.pairs.contains(&(0, 0)) && a.pairs.contains(&(2, 2)));
        assert_eq!(a.unmatched_est, 1);
        assert_eq!(a.unmatched_gt, 2);
        assert!(matches!(rmse_x(&gt, &[]), Err(EvalError::EmptyOverlap)));
        let far: Vec<TrackPoint> = copy(&gt).into_iter().map(|mut e| { e.t += 100.0; e }).collect();
        assert!(matches!(ate_series(&gt, &far), Err(EvalError::EmptyOverlap)));
    }

    #[test]
    fn single_sample_summary_is_flat() {
        let s = summarize(&[3.5]).unwrap();
        assert_eq!((s.min, s.median, s.max, s.q1, s.q3), (3.5, 3.5, 3.5, 3.5, 3.5));
        let s = summarize(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
    }

    #[test]
    fn report_round_trips() {
        let mut rng = Rng::new(4, 4);
        let gt = gt_path(25, &mut rng);
        let mut est = copy(&gt);
        est.iter_mut().for_each(|e| {
            e.x += 0.01 * rng.normal();
            e.vy += 0.1 * rng.normal();
        });
        let r = Report::compute(&gt, &est, digest(&[b"cfg"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.save(&dir.path().join("r.json")).unwrap();
        assert_eq!(Report::load(&dir.path().join("r.json")).unwrap(), r);
        let ms: f64 = r.ate.iter().map(|s| s.ate_mm * s.ate_mm).sum::<f64>() / r.ate.len() as f64;
        assert!((ms.sqrt() - r.rmse_x_mm).abs() <= 1e-9 * r.rmse_x_mm);
        r.write_ate_csv(&dir.path().join("ate.csv")).unwrap();
        assert!(std::fs::read_to_string(dir.path().join("ate.csv")).unwrap().starts_with("t,ate_mm\n"));
    }

    proptest! {
        #[test]
        fn rmse_is_translation_invariant_and_zero_only_on_coincidence(seed in 0u64..1000, tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
            let mut rng = Rng::new(seed, 9);
            let gt = gt_path(15, &mut rng);
            let mut est = copy(&gt);
            est.iter_mut().for_each(|e| { e.x += 0.02 * rng.normal(); e.y += 0.02 * rng.normal(); });
            let base = rmse_x(&gt, &est).unwrap();
            prop_assert!(base > 0.0);
            let gt2: Vec<_> = gt.iter().map(|g| TrajectoryPoint { x: g.x + tx, y: g.y + ty, ..*g }).collect();
            let est2: Vec<_> = est.iter().map(|e| TrackPoint { x: e.x + tx, y: e.y + ty, ..*e }).collect();
            prop_assert!((rmse_x(&gt2, &est2).unwrap() - base).abs() < 1e-9);
        }
    }
}
