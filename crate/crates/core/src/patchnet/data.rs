//! Frame-pair samples from plane-pipeline outputs, training and inference.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{
    forward, nlos_loss_tape, normalize_plane, pack, patchify, predict, token_dropout, FrameTag, Hyper, Model, PackLimits,
    PatchError, Stream, StreamVars, Token,
};
use crate::geometry::{PlaneTransform, Raster};
use crate::numerics::{AdamState, Rng, Tape, Var};
use crate::planes::{select_top_m, FramePlanes, PlaneRecord, PlanesOutput};
use crate::simulator::{load_manifest, read_pfm, read_pgm, DatasetManifest};

const STREAM_SHUFFLE: u64 = 0x2000;
const STREAM_DROPOUT: u64 = 0x2001;

/// One plane of a frame pair `(i, i + 1)`, ready for both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub plane: u32,
    /// Pixel area at frame `i + 1`.
    pub area: usize,
    /// Tokens of the masked plane at `i` and `i + 1`.
    pub position: Vec<Token>,
    /// Tokens of the difference image at `i + 1`.
    pub velocity: Vec<Token>,
    /// Person position at `i` in the wall frame, over room scale.
    pub target_x: [f64; 2],
    /// Person velocity at `i` in the wall frame, as displacement per pair interval over room scale.
    pub target_v: [f64; 2],
    pub normal: [f64; 3],
    pub offset: f64,
    pub transform: [[f64; 4]; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    /// Index of the later frame.
    pub frame: usize,
    pub time: f64,
    pub dt: f64,
    pub examples: Vec<PairExample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneEstimate {
    pub example: usize,
    pub plane: u32,
    /// Position at the later frame time, normalized by room scale.
    pub x: [f64; 2],
    /// Displacement per pair interval, normalized by room scale.
    pub v: [f64; 2],
    pub normal: [f64; 3],
    pub offset: f64,
    pub transform: [[f64; 4]; 3],
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEstimates {
    pub frame: usize,
    pub time: f64,
    pub dt: f64,
    pub estimates: Vec<PlaneEstimate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<LossRecord>,
}

type TrackGeometry = ([[f64; 4]; 3], [f64; 3], f64);

struct RawPlane {
    record: PlaneRecord,
    geometry: TrackGeometry,
    prev_image: Raster,
    prev_mask: Raster,
    image: Raster,
    mask: Raster,
    diff: Raster,
    valid: Raster,
}

struct RawPair {
    frame: usize,
    time: f64,
    dt: f64,
    person: [f64; 4],
    planes: Vec<RawPlane>,
}

fn load_raw(dir: &Path, planes: &PlanesOutput, manifest: &DatasetManifest, frame: usize, m: usize) -> Result<RawPair, PatchError> {
    let (prev, cur): (&FramePlanes, &FramePlanes) = (&planes.frames[frame - 1], &planes.frames[frame]);
    let candidates: Vec<&PlaneRecord> = cur
        .planes
        .iter()
        .filter(|p| p.diff.is_some() && prev.planes.iter().any(|q| q.id == p.id))
        .collect();
    let mut pair = RawPair {
        frame,
        time: cur.time,
        dt: cur.time - prev.time,
        person: {
            let p = &manifest.frames[frame - 1].person;
            [p.x, p.y, p.vx, p.vy]
        },
        planes: Vec::new(),
    };
    let visible: Vec<(u32, usize)> = candidates.iter().map(|p| (p.id, p.area)).collect();
    if visible.is_empty() {
        return Ok(pair);
    }
    let top = select_top_m(&visible, m, frame)?;
    for id in top.ids {
        let rec = *candidates.iter().find(|p| p.id == id).expect("selected from candidates");
        let before = prev.planes.iter().find(|q| q.id == id).expect("filtered on presence");
        let (diff, valid) = (rec.diff.as_ref().expect("filtered"), rec.valid.as_ref().expect("diff implies valid"));
        let valid = read_pgm(&dir.join(valid))?;
        if valid.count_nonzero() == 0 {
            continue;
        }
        let track = planes
            .track(id)
            .ok_or_else(|| PatchError::Data(format!("plane {id} has no track record")))?;
        pair.planes.push(RawPlane {
            record: rec.clone(),
            geometry: (track.transform, track.normal, track.offset),
            prev_image: read_pfm(&dir.join(&before.masked))?,
            prev_mask: read_pgm(&dir.join(&before.mask))?,
            image: read_pfm(&dir.join(&rec.masked))?,
            mask: read_pgm(&dir.join(&rec.mask))?,
            diff: read_pfm(&dir.join(diff))?,
            valid,
        });
    }
    Ok(pair)
}

/// Mean and inverse standard deviation of covered pixels.
fn pixel_stats<'a>(items: impl Iterator<Item = (&'a Raster, &'a Raster)>) -> [f64; 2] {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for (img, mask) in items {
        for (&v, &m) in img.data.iter().zip(&mask.data) {
            if m != 0.0 {
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
    }
    if n == 0 {
        return [0.0, 1.0];
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
    [mean, if std > 1e-12 { 1.0 / std } else { 1.0 }]
}

fn tokenize(raw: &RawPair, model: &Model, scale: f64) -> Result<PairSample, PatchError> {
    let patch = model.hyper.patch_size;
    let (pn, vn) = (model.input_norm(Stream::Position), model.input_norm(Stream::Velocity));
    let mut examples = Vec::with_capacity(raw.planes.len());
    for p in &raw.planes {
        let id = p.record.id;
        let mut position = patchify(&normalize_plane(&p.prev_image, &p.prev_mask, pn), &p.prev_mask, id, FrameTag::Current, patch)?;
        position.extend(patchify(&normalize_plane(&p.image, &p.mask, pn), &p.mask, id, FrameTag::Next, patch)?);
        let velocity = patchify(&normalize_plane(&p.diff, &p.valid, vn), &p.valid, id, FrameTag::Diff, patch)?;
        if position.is_empty() || velocity.is_empty() {
            continue;
        }
        let (transform, normal, offset) = p.geometry;
        let t = PlaneTransform::from_rows(&transform);
        let local_x = t.inverse().apply(&Vector3::new(raw.person[0], raw.person[1], 0.0));
        let local_v = t.rotation().transpose() * Vector3::new(raw.person[2], raw.person[3], 0.0);
        examples.push(PairExample {
            plane: id,
            area: p.record.area,
            position,
            velocity,
            target_x: [local_x.x / scale, local_x.y / scale],
            target_v: [local_v.x * raw.dt / scale, local_v.y * raw.dt / scale],
            normal,
            offset,
            transform,
        });
    }
    for (m, e) in examples.iter_mut().enumerate() {
        e.position.iter_mut().chain(e.velocity.iter_mut()).for_each(|t| t.example = m);
    }
    Ok(PairSample { frame: raw.frame, time: raw.time, dt: raw.dt, examples })
}

fn load_all(dataset: &Path, planes_dir: &Path, m: usize, stride: usize) -> Result<(Vec<RawPair>, f64), PatchError> {
    let manifest = load_manifest(dataset)?;
    let planes = PlanesOutput::load(planes_dir)?;
    if planes.frames.len() != manifest.frames.len() {
        return Err(PatchError::Data(format!(
            "plane outputs cover {} frames, dataset has {}",
            planes.frames.len(),
            manifest.frames.len()
        )));
    }
    let pairs = (1..planes.frames.len())
        .step_by(stride)
        .map(|f| load_raw(planes_dir, &planes, &manifest, f, m))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((pairs, manifest.config.scale()))
}

/// Tokenized frame pairs `(i, i + 1)` for every `stride`-th `i`, using the model's input normalization.
pub fn load_pairs(dataset: &Path, planes_dir: &Path, model: &Model, m: usize, stride: usize) -> Result<Vec<PairSample>, PatchError> {
    let (raw, scale) = load_all(dataset, planes_dir, m, stride)?;
    raw.iter().map(|r| tokenize(r, model, scale)).collect()
}

fn targets(s: &PairSample) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    (s.examples.iter().map(|e| e.target_x).collect(), s.examples.iter().map(|e| e.target_v).collect())
}

/// Adam on the summed position/velocity loss over top-M planes of each frame pair.
pub fn train(dataset: &Path, planes_dir: &Path, hyper: &Hyper, seed: u64) -> Result<TrainOutcome, PatchError> {
    let mut model = Model::init(hyper, seed)?;
    let (raw, scale) = load_all(dataset, planes_dir, hyper.planes_per_sequence, hyper.frame_stride)?;
    let position = pixel_stats(raw.iter().flat_map(|r| &r.planes).flat_map(|p| [(&p.prev_image, &p.prev_mask), (&p.image, &p.mask)]));
    let velocity = pixel_stats(raw.iter().flat_map(|r| &r.planes).map(|p| (&p.diff, &p.valid)));
    model.set_input_norm(Stream::Position, position);
    model.set_input_norm(Stream::Velocity, velocity);
    let samples: Vec<PairSample> = raw
        .iter()
        .map(|r| tokenize(r, &model, scale))
        .filter(|s| s.as_ref().map_or(true, |s| !s.examples.is_empty()))
        .collect::<Result<_, _>>()?;
    drop(raw);
    if samples.is_empty() {
        return Err(PatchError::Data("no frame pair has a trackable plane".into()));
    }

    let limits = PackLimits::default();
    let max_pos = hyper.max_positions();
    let mut adam = AdamState::new(hyper.learning_rate);
    let mut order_rng = Rng::new(seed, STREAM_SHUFFLE);
    let mut drop_rng = Rng::new(seed, STREAM_DROPOUT);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::new();
    for epoch in 0..hyper.epochs {
        order_rng.shuffle(&mut order);
        for (step, batch) in order.chunks(hyper.batch_size).enumerate() {
            let mut tape = Tape::new();
            let pv = StreamVars::record(&mut tape, &model.params, hyper, Stream::Position)?;
            let vv = StreamVars::record(&mut tape, &model.params, hyper, Stream::Velocity)?;
            let mut total: Option<Var> = None;
            for &i in batch {
                let s = &samples[i];
                let mut drop = |pick: fn(&PairExample) -> &Vec<Token>| -> Result<Vec<Vec<Token>>, PatchError> {
                    s.examples.iter().map(|e| token_dropout(pick(e), hyper.token_dropout, &mut drop_rng)).collect()
                };
                let pos = pack(&drop(|e| &e.position)?, limits)?;
                let vel = pack(&drop(|e| &e.velocity)?, limits)?;
                let x = forward(&mut tape, &pv, &pos, max_pos, Some((hyper.embed_dropout, &mut drop_rng)))?;
                let v = forward(&mut tape, &vv, &vel, max_pos, Some((hyper.embed_dropout, &mut drop_rng)))?;
                let (gx, gv) = targets(s);
                let l = nlos_loss_tape(&mut tape, x, v, &gx, &gv, hyper.alpha)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let loss = tape.scale(total.expect("batches are non-empty"), 1.0 / batch.len() as f64)?;
            let mut grads = tape.backward(loss)?.for_params(&model.params);
            grads.retain(|name, _| Model::is_trainable(name));
            adam.step(&mut model.params, &grads)?;
            trace.push(LossRecord { epoch, step, loss: tape.value(loss).item() });
        }
    }
    model.quantize();
    Ok(TrainOutcome { model, trace })
}

/// Dropout-free estimates for every consecutive frame pair, top `m` planes each.
pub fn infer(dataset: &Path, planes_dir: &Path, model: &Model, m: usize) -> Result<Vec<FrameEstimates>, PatchError> {
    let samples = load_pairs(dataset, planes_dir, model, m, 1)?;
    samples.iter().map(|s| estimate(model, s)).collect()
}

/// Position at the later frame is the position estimate propagated by the velocity estimate.
pub fn estimate(model: &Model, s: &PairSample) -> Result<FrameEstimates, PatchError> {
    let mut out = FrameEstimates { frame: s.frame, time: s.time, dt: s.dt, estimates: Vec::new() };
    if s.examples.is_empty() {
        return Ok(out);
    }
    let limits = PackLimits::default();
    let pos: Vec<Vec<Token>> = s.examples.iter().map(|e| e.position.clone()).collect();
    let vel: Vec<Vec<Token>> = s.examples.iter().map(|e| e.velocity.clone()).collect();
    let x = predict(model, Stream::Position, &pack(&pos, limits)?)?;
    let v = predict(model, Stream::Velocity, &pack(&vel, limits)?)?;
    for (m, e) in s.examples.iter().enumerate() {
        out.estimates.push(PlaneEstimate {
            example: m,
            plane: e.plane,
            x: [x[m][0] + v[m][0], x[m][1] + v[m][1]],
            v: v[m],
            normal: e.normal,
            offset: e.offset,
            transform: e.transform,
            area: e.area,
        });
    }
    Ok(out)
}

pub fn write_loss_trace(path: &Path, trace: &[LossRecord]) -> Result<(), PatchError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PatchError::Data(format!("{}: {e}", path.display())))?;
    for r in trace {
        w.serialize(r).map_err(|e| PatchError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| PatchError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planes::{run_planes, PlaneOptions};
    use crate::simulator::{generate_dataset, SceneConfig, Side};

    pub(crate) fn toy_run(frames: usize, seed: u64) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
        let root = tempfile::tempdir().unwrap();
        let (data, planes) = (root.path().join("data"), root.path().join("planes"));
        let mut c = SceneConfig::desk(frames, &[Side::East, Side::North]);
        c.seed = seed;
        generate_dataset(&c, &data).unwrap();
        run_planes(&data, &planes, &PlaneOptions::default()).unwrap();
        (root, data, planes)
    }

    fn toy_hyper(epochs: usize) -> Hyper {
        Hyper {
            patch_size: 16,
            dim: 16,
            depth: 1,
            head_dim: 8,
            heads: 2,
            token_dropout: 0.2,
            embed_dropout: 0.1,
            alpha: 1.0,
            learning_rate: 3e-3,
            epochs,
            batch_size: 4,
            frame_stride: 1,
            planes_per_sequence: 3,
        }
    }

    #[test]
    fn samples_carry_wall_frame_targets() {
        let (_root, data, planes) = toy_run(6, 2);
        let model = Model::init(&toy_hyper(1), 0).unwrap();
        let pairs = load_pairs(&data, &planes, &model, 3, 1).unwrap();
        let manifest = load_manifest(&data).unwrap();
        let scale = manifest.config.scale();
        assert_eq!(pairs.len(), 5);
        for s in &pairs {
            let person = &manifest.frames[s.frame - 1].person;
            assert!(!s.examples.is_empty() && s.examples.len() <= 3);
            for w in s.examples.windows(2) {
                assert!(w[0].area > w[1].area || (w[0].area == w[1].area && w[0].plane < w[1].plane));
            }
            for e in &s.examples {
                let t = PlaneTransform::from_rows(&e.transform);
                let back = t.apply(&Vector3::new(e.target_x[0] * scale, e.target_x[1] * scale, 0.0));
                assert!((back.x - person.x).abs() < 1e-12 && (back.y - person.y).abs() < 1e-12 && back.z.abs() < 1e-12);
                // b is the distance in front of the wall
                let n = Vector3::from(e.normal);
                let dist = n.dot(&Vector3::new(person.x, person.y, 0.0)) - e.offset;
                assert!((e.target_x[1] * scale - dist).abs() < 1e-12);
                assert!(e.position.iter().any(|t| t.tag == FrameTag::Current));
                assert!(e.position.iter().any(|t| t.tag == FrameTag::Next));
                assert!(e.velocity.iter().all(|t| t.tag == FrameTag::Diff));
            }
        }
        let one = load_pairs(&data, &planes, &model, 1, 2).unwrap();
        assert_eq!(one.iter().map(|s| s.frame).collect::<Vec<_>>(), [1, 3, 5]);
        assert!(one.iter().all(|s| s.examples.len() == 1));
    }

    #[test]
    fn training_is_deterministic_and_infer_is_repeatable() {
        let (_root, data, planes) = toy_run(8, 3);
        let a = train(&data, &planes, &toy_hyper(3), 7).unwrap();
        let b = train(&data, &planes, &toy_hyper(3), 7).unwrap();
        assert_eq!(a.trace.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(), b.trace.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace.len(), 3 * 2);
        let e1 = infer(&data, &planes, &a.model, 3).unwrap();
        let e2 = infer(&data, &planes, &a.model, 3).unwrap();
        assert_eq!(e1, e2);
        let single = infer(&data, &planes, &a.model, 1).unwrap();
        assert!(single.iter().all(|f| f.estimates.len() == 1));
        // examples are isolated, so the top plane's estimate does not depend on M
        for (s, f) in single.iter().zip(&e1) {
            assert_eq!(s.estimates[0], f.estimates[0]);
        }
    }

    #[test]
    fn loss_trace_csv_has_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_trace(&p, &[LossRecord { epoch: 0, step: 1, loss: 0.5 }]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "epoch,step,loss\n0,1,0.5\n");
    }

    #[test]
    fn velocity_weight_trades_off_against_position() {
        let (_root, data, planes) = toy_run(12, 4);
        let mse_v = |alpha: f64| {
            let h = Hyper { alpha, token_dropout: 0.0, embed_dropout: 0.0, ..toy_hyper(40) };
            let out = train(&data, &planes, &h, 1).unwrap();
            let pairs = load_pairs(&data, &planes, &out.model, 3, 1).unwrap();
            let mut acc = (0.0, 0usize);
            for s in &pairs {
                let vel: Vec<Vec<Token>> = s.examples.iter().map(|e| e.velocity.clone()).collect();
                let v = predict(&out.model, Stream::Velocity, &pack(&vel, PackLimits::default()).unwrap()).unwrap();
                for (e, p) in s.examples.iter().zip(&v) {
                    acc.0 += (p[0] - e.target_v[0]).powi(2) + (p[1] - e.target_v[1]).powi(2);
                    acc.1 += 1;
                }
            }
            acc.0 / acc.1 as f64
        };
        assert!(mse_v(1e6) <= mse_v(0.0));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (_root, data, planes) = toy_run(4, 5);
        let mut out = PlanesOutput::load(&planes).unwrap();
        out.frames.iter_mut().for_each(|f| f.planes.clear());
        std::fs::write(planes.join("planes.json"), serde_json::to_string(&out).unwrap()).unwrap();
        assert!(matches!(train(&data, &planes, &toy_hyper(1), 0), Err(PatchError::Data(_))));
    }
}
