use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{assign_ids, diff_image, mask_apply, simulator_matches, MaskedPlane, PlaneError, PrevPlane};
use crate::geometry::{ransac_homography, read_matches, Homography, Match, Plane3D, PlaneTransform};
use crate::numerics::Rng;
use crate::simulator::{load_manifest, read_pfm, read_pgm, write_pfm, write_pgm, SimError};

pub const PLANES_VERSION: u32 = 1;

const MIN_SAMPLED_AREA: usize = 400;

/// Where inter-frame correspondences come from.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchSource {
    /// Known wall points projected into both frames.
    Simulator { noise_px: f64, outlier_fraction: f64 },
    /// CSV path; `{frame}` expands to the later frame index and `{plane}` to the track ID.
    File(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneOptions {
    pub iou: f64,
    pub source: MatchSource,
    pub ransac_iterations: usize,
    pub ransac_threshold_px: f64,
    /// Pixel stride when sampling mask pixels for simulator matches.
    pub match_step: usize,
    pub seed: u64,
}

impl Default for PlaneOptions {
    fn default() -> Self {
        Self {
            iou: 0.5,
            source: MatchSource::Simulator { noise_px: 0.0, outlier_fraction: 0.0 },
            ransac_iterations: 500,
            ransac_threshold_px: 1.0,
            match_step: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub id: u32,
    pub first_frame: usize,
    pub last_frame: usize,
    /// Manifest plane the track was seeded from.
    pub wall: u32,
    pub normal: [f64; 3],
    pub offset: f64,
    /// Row-major 3x4 local-to-global transform of the plane.
    pub transform: [[f64; 4]; 3],
    /// Row-major 3x3 maps from each frame to the next, starting at `first_frame`.
    pub homographies: Vec<[[f64; 3]; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneRecord {
    pub id: u32,
    pub wall: u32,
    pub area: usize,
    pub mask: String,
    pub masked: String,
    pub diff: Option<String>,
    pub valid: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramePlanes {
    pub index: usize,
    pub time: f64,
    pub planes: Vec<PlaneRecord>,
    /// Tracks that could not be followed into this frame.
    pub lost: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanesOutput {
    pub format_version: u32,
    pub iou_threshold: f64,
    pub width: usize,
    pub height: usize,
    pub tracks: Vec<TrackRecord>,
    pub frames: Vec<FramePlanes>,
}

impl PlanesOutput {
    pub fn load(dir: &Path) -> Result<Self, PlaneError> {
        let path = dir.join("planes.json");
        let text = std::fs::read_to_string(&path).map_err(|e| SimError::io(&path, e))?;
        let out: Self = serde_json::from_str(&text).map_err(|e| PlaneError::Format(format!("{}: {e}", path.display())))?;
        if out.format_version != PLANES_VERSION {
            return Err(PlaneError::Format(format!("{}: unsupported format_version {}", path.display(), out.format_version)));
        }
        Ok(out)
    }

    pub fn track(&self, id: u32) -> Option<&TrackRecord> {
        self.tracks.iter().find(|t| t.id == id)
    }
}

struct Current {
    id: u32,
    wall: u32,
    plane: MaskedPlane,
}

fn frame_matches(
    opts: &PlaneOptions,
    prev: &Current,
    walls: &BTreeMap<u32, Plane3D>,
    ctx: (&crate::geometry::Pose, &crate::geometry::Pose, &crate::geometry::Intrinsics, usize),
) -> Result<Vec<Match>, PlaneError> {
    let (pa, pb, k, frame) = ctx;
    match &opts.source {
        MatchSource::Simulator { noise_px, outlier_fraction } => {
            let wall = walls
                .get(&prev.wall)
                .ok_or_else(|| PlaneError::Format(format!("unknown wall {}", prev.wall)))?;
            let mut rng = Rng::new(opts.seed, ((frame as u64) << 20) | prev.id as u64);
            // thin slivers can collapse onto one sampled column, so fall back to every pixel
            let step = if prev.plane.area < MIN_SAMPLED_AREA { 1 } else { opts.match_step };
            Ok(simulator_matches(pa, pb, k, wall, &prev.plane.mask, step, *noise_px, *outlier_fraction, &mut rng))
        }
        MatchSource::File(template) => {
            let path = template.replace("{frame}", &frame.to_string()).replace("{plane}", &prev.id.to_string());
            Ok(read_matches(Path::new(&path))?)
        }
    }
}

/// Runs plane extraction and tracking over a simulator dataset and writes `planes.json`.
pub fn run_planes(dataset: &Path, out: &Path, opts: &PlaneOptions) -> Result<PlanesOutput, PlaneError> {
    let manifest = load_manifest(dataset)?;
    let k = manifest.config.intrinsics;
    let walls: BTreeMap<u32, Plane3D> = manifest
        .planes
        .iter()
        .map(|p| Ok((p.id, p.plane()?)))
        .collect::<Result<_, PlaneError>>()?;

    let mut tracks: BTreeMap<u32, TrackRecord> = BTreeMap::new();
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut prev: Vec<Current> = Vec::new();
    let mut prev_pose = None;
    let mut next_id = 0u32;

    for rec in &manifest.frames {
        let pose = rec.pose.pose()?;
        let img = read_pfm(&dataset.join(&rec.image))?;
        let mut segs = Vec::with_capacity(rec.masks.len());
        for m in &rec.masks {
            segs.push((m.plane, read_pgm(&dataset.join(&m.path))?));
        }

        let mut homs: BTreeMap<u32, Homography> = BTreeMap::new();
        let mut lost = Vec::new();
        if let Some(pp) = &prev_pose {
            for p in &prev {
                let matches = frame_matches(opts, p, &walls, (pp, &pose, &k, rec.index))?;
                let mut rng = Rng::new(opts.seed ^ 0x5eed, ((rec.index as u64) << 20) | p.id as u64);
                match ransac_homography(&matches, opts.ransac_threshold_px, opts.ransac_iterations, &mut rng) {
                    Ok((h, _)) => {
                        homs.insert(p.id, h);
                    }
                    Err(_) => lost.push(p.id),
                }
            }
        }
        let offered: Vec<PrevPlane> = prev
            .iter()
            .map(|p| PrevPlane { id: p.id, mask: &p.plane.mask, homography: homs.get(&p.id).copied() })
            .collect();
        let masks: Vec<_> = segs.iter().map(|(_, m)| m.clone()).collect();
        let assignment = assign_ids(&offered, &masks, opts.iou, &mut next_id)?;

        let dir = format!("frames/{:05}", rec.index);
        std::fs::create_dir_all(out.join(&dir)).map_err(|e| SimError::io(&out.join(&dir), e))?;
        let mut current = Vec::with_capacity(segs.len());
        let mut records = Vec::with_capacity(segs.len());
        for (j, (wall, mask)) in segs.into_iter().enumerate() {
            let id = assignment.ids[j];
            let plane = mask_apply(&img, &mask, id, rec.index)?;
            let mask_path = format!("{dir}/mask_{id:03}.pgm");
            let masked_path = format!("{dir}/masked_{id:03}.pfm");
            write_pgm(&out.join(&mask_path), &plane.mask)?;
            write_pfm(&out.join(&masked_path), &plane.image)?;
            let (mut diff, mut valid) = (None, None);
            if assignment.inherited[j] {
                let h = homs[&id];
                let before = prev.iter().find(|p| p.id == id).expect("inherited id was offered");
                let d = diff_image(&before.plane, &plane, &h)?;
                let (dp, vp) = (format!("{dir}/diff_{id:03}.pfm"), format!("{dir}/valid_{id:03}.pgm"));
                write_pfm(&out.join(&dp), &d.image)?;
                write_pgm(&out.join(&vp), &d.valid)?;
                diff = Some(dp);
                valid = Some(vp);
                let t = tracks.get_mut(&id).expect("inherited id has a track");
                t.last_frame = rec.index;
                t.homographies.push(h.to_rows());
            } else {
                let geom = walls.get(&wall).ok_or_else(|| PlaneError::Format(format!("unknown wall {wall}")))?;
                let transform = PlaneTransform::wall_frame(&geom.normal, geom.offset)?;
                tracks.insert(
                    id,
                    TrackRecord {
                        id,
                        first_frame: rec.index,
                        last_frame: rec.index,
                        wall,
                        normal: geom.normal.into(),
                        offset: geom.offset,
                        transform: transform.to_rows(),
                        homographies: Vec::new(),
                    },
                );
            }
            records.push(PlaneRecord { id, wall, area: plane.area, mask: mask_path, masked: masked_path, diff, valid });
            current.push(Current { id, wall, plane });
        }
        records.sort_by_key(|r| r.id);
        frames.push(FramePlanes { index: rec.index, time: rec.time, planes: records, lost });
        prev = current;
        prev_pose = Some(pose);
    }

    let output = PlanesOutput {
        format_version: PLANES_VERSION,
        iou_threshold: opts.iou,
        width: k.width,
        height: k.height,
        tracks: tracks.into_values().collect(),
        frames,
    };
    let path = out.join("planes.json");
    std::fs::write(&path, serde_json::to_string_pretty(&output).expect("planes output serializes"))
        .map_err(|e| SimError::io(&path, e))?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::write_matches;
    use crate::simulator::{generate_dataset, SceneConfig, Side};

    fn dataset(frames: usize) -> (tempfile::TempDir, SceneConfig) {
        let dir = tempfile::tempdir().unwrap();
        let mut c = SceneConfig::desk(frames, &[Side::East, Side::North, Side::West]);
        c.seed = 5;
        generate_dataset(&c, dir.path()).unwrap();
        (dir, c)
    }

    #[test]
    fn walls_keep_their_ids_and_areas_match_masks() {
        let (data, _) = dataset(12);
        let out = tempfile::tempdir().unwrap();
        let res = run_planes(data.path(), out.path(), &PlaneOptions::default()).unwrap();
        assert_eq!(PlanesOutput::load(out.path()).unwrap(), res);
        let manifest = load_manifest(data.path()).unwrap();
        for (f, rec) in res.frames.iter().zip(&manifest.frames) {
            assert_eq!(f.planes.len(), rec.masks.len());
            for p in &f.planes {
                let m = rec.masks.iter().find(|m| m.plane == p.wall).unwrap();
                assert_eq!(read_pgm(&data.path().join(&m.path)).unwrap().count_nonzero(), p.area);
            }
        }
        for t in &res.tracks {
            assert_eq!(t.homographies.len(), t.last_frame - t.first_frame);
            for f in &res.frames[t.first_frame..=t.last_frame] {
                assert!(f.planes.iter().any(|p| p.id == t.id && p.wall == t.wall));
            }
        }
        // the dominant wall never leaves the view, so it keeps its first ID throughout
        let big = res.frames[0].planes.iter().max_by_key(|p| p.area).unwrap();
        let t = res.track(big.id).unwrap();
        assert_eq!((t.first_frame, t.last_frame), (0, 11));
        assert!(res.tracks.len() >= manifest.frames[0].masks.len());
    }

    #[test]
    fn file_matches_drive_the_same_tracking() {
        let (data, _) = dataset(4);
        let sim_out = tempfile::tempdir().unwrap();
        let sim = run_planes(data.path(), sim_out.path(), &PlaneOptions::default()).unwrap();

        // dump the simulator's correspondences and feed them back through the file path
        let manifest = load_manifest(data.path()).unwrap();
        let match_dir = tempfile::tempdir().unwrap();
        let k = manifest.config.intrinsics;
        let walls: BTreeMap<u32, Plane3D> = manifest.planes.iter().map(|p| (p.id, p.plane().unwrap())).collect();
        for w in manifest.frames.windows(2) {
            let (a, b) = (w[0].pose.pose().unwrap(), w[1].pose.pose().unwrap());
            for p in &sim.frames[w[0].index].planes {
                let mask = read_pgm(&sim_out.path().join(&p.mask)).unwrap();
                let mut rng = Rng::new(0, 0);
                let step = if p.area < MIN_SAMPLED_AREA { 1 } else { PlaneOptions::default().match_step };
                let ms = simulator_matches(&a, &b, &k, &walls[&p.wall], &mask, step, 0.0, 0.0, &mut rng);
                write_matches(&match_dir.path().join(format!("m_{}_{}.csv", w[1].index, p.id)), &ms).unwrap();
            }
        }
        let template = match_dir.path().join("m_{frame}_{plane}.csv").display().to_string();
        let opts = PlaneOptions { source: MatchSource::File(template), ..PlaneOptions::default() };
        let file_out = tempfile::tempdir().unwrap();
        let from_file = run_planes(data.path(), file_out.path(), &opts).unwrap();
        assert_eq!(from_file, sim);

        let missing = PlaneOptions { source: MatchSource::File("/nonexistent/{frame}.csv".into()), ..PlaneOptions::default() };
        assert!(run_planes(data.path(), tempfile::tempdir().unwrap().path(), &missing).is_err());
    }
}
