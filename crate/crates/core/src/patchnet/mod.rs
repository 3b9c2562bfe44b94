//! Packed patch transformers: variable-resolution patchify, token dropout,
//! example packing with (example, plane ID) blocked attention, and the twin
//! position/velocity networks.

mod data;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::Raster;
use crate::numerics::{NumericsError, ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::planes::{BBox, PlaneError};
use crate::simulator::SimError;

pub use data::{estimate, infer, load_pairs, train, write_loss_trace, FrameEstimates, LossRecord, PairExample, PairSample, PlaneEstimate, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("packed length {len} exceeds capacity {max}")]
    Capacity { len: usize, max: usize },
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Planes(#[from] PlaneError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl PatchError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub token_dropout: f64,
    pub embed_dropout: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub frame_stride: usize,
    pub planes_per_sequence: usize,
}

/// Longest plane side the positional tables cover, in pixels.
pub const MAX_PLANE_EXTENT: usize = 1024;

impl Hyper {
    pub fn desk() -> Self {
        Self {
            patch_size: 16,
            dim: 64,
            depth: 2,
            head_dim: 16,
            heads: 4,
            token_dropout: 0.4,
            embed_dropout: 0.2,
            alpha: 1.0,
            learning_rate: 1e-3,
            epochs: 300,
            batch_size: 8,
            frame_stride: 1,
            planes_per_sequence: 3,
        }
    }

    pub fn full() -> Self {
        Self { patch_size: 64, dim: 1024, depth: 4, head_dim: 128, heads: 8, frame_stride: 15, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        let bad = |m: &str| Err(PatchError::Config(m.to_string()));
        if self.patch_size == 0 || self.patch_size > MAX_PLANE_EXTENT {
            return bad("patch_size must be in 1..=1024");
        }
        if self.dim == 0 || self.depth == 0 || self.heads == 0 || self.head_dim == 0 {
            return bad("dim, depth, heads and head_dim must be positive");
        }
        if self.dim != self.heads * self.head_dim {
            return bad("dim must equal heads * head_dim");
        }
        for (name, r) in [("token_dropout", self.token_dropout), ("embed_dropout", self.embed_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(PatchError::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("alpha must be non-negative and learning_rate positive");
        }
        if self.batch_size == 0 || self.frame_stride == 0 || self.planes_per_sequence == 0 {
            return bad("batch_size, frame_stride and planes_per_sequence must be positive");
        }
        Ok(())
    }

    /// Rows in each positional table.
    pub fn max_positions(&self) -> usize {
        (MAX_PLANE_EXTENT / self.patch_size).max(1)
    }

    pub fn token_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn load(path: &Path) -> Result<Self, PatchError> {
        let text = std::fs::read_to_string(path).map_err(|e| PatchError::io(path, e))?;
        let h: Self = serde_json::from_str(&text).map_err(|e| PatchError::Config(format!("{}: {e}", path.display())))?;
        h.validate()?;
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameTag {
    Current,
    Next,
    Diff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    /// Row-major `patch_size x patch_size` pixels.
    pub pixels: Vec<f64>,
    pub row: usize,
    pub col: usize,
    pub example: usize,
    pub plane: u32,
    pub tag: FrameTag,
}

/// Splits the mask's bounding box (zero-padded to whole patches) into a grid and keeps patches the mask touches.
pub fn patchify(image: &Raster, mask: &Raster, plane: u32, tag: FrameTag, patch: usize) -> Result<Vec<Token>, PatchError> {
    if patch == 0 {
        return Err(PatchError::Config("patch_size must be positive".into()));
    }
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(PatchError::Data(format!(
            "image {}x{} and mask {}x{} differ",
            image.width, image.height, mask.width, mask.height
        )));
    }
    let Some(bb) = BBox::of_mask(mask) else { return Ok(Vec::new()) };
    let (x0, y0) = (bb.x0, bb.y0);
    let (rows, cols) = (bb.height().div_ceil(patch), bb.width().div_ceil(patch));
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let mut pixels = vec![0.0; patch * patch];
            let mut covered = false;
            for dy in 0..patch {
                for dx in 0..patch {
                    let (x, y) = (x0 + c * patch + dx, y0 + r * patch + dy);
                    if x < image.width && y < image.height {
                        pixels[dy * patch + dx] = image.get(x, y);
                        covered |= mask.get(x, y) != 0.0;
                    }
                }
            }
            if covered {
                out.push(Token { pixels, row: r, col: c, example: 0, plane, tag });
            }
        }
    }
    Ok(out)
}

/// Drops each token with probability `rate`; an example that loses every token keeps one at random.
pub fn token_dropout(tokens: &[Token], rate: f64, rng: &mut Rng) -> Result<Vec<Token>, PatchError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(PatchError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 || tokens.is_empty() {
        return Ok(tokens.to_vec());
    }
    let keep: Vec<bool> = tokens.iter().map(|_| rng.uniform() >= rate).collect();
    let mut out: Vec<Token> = tokens.iter().zip(&keep).filter(|(_, &k)| k).map(|(t, _)| t.clone()).collect();
    if out.is_empty() {
        out.push(tokens[rng.below(tokens.len() as u32) as usize].clone());
    }
    Ok(out)
}

/// Scales covered pixels as `(v - mean) * inv_std`; pixels outside the mask stay zero.
pub fn normalize_plane(image: &Raster, mask: &Raster, norm: [f64; 2]) -> Raster {
    let mut out = Raster::zeros(image.width, image.height);
    for (i, (&v, &m)) in image.data.iter().zip(&mask.data).enumerate() {
        if m != 0.0 {
            out.data[i] = (v - norm[0]) * norm[1];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackLimits {
    /// Packed lengths are rounded up to a multiple of this.
    pub bucket: usize,
    pub max_len: usize,
}

impl Default for PackLimits {
    fn default() -> Self {
        Self { bucket: 8, max_len: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub token_len: usize,
    /// `len x token_len` pixels, padding rows zero.
    pub pixels: Vec<f64>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// `(start, length)` per example.
    pub examples: Vec<(usize, usize)>,
    /// `(example, plane)` per position; `None` for padding.
    pub owners: Vec<Option<(usize, u32)>>,
    pub pad: usize,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.owners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owners.is_empty()
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        matches!((self.owners[i], self.owners[j]), (Some(a), Some(b)) if a == b)
    }

    /// Additive attention mask: `0` where [`allows`](Self::allows), `-inf` elsewhere.
    pub fn attention_mask<S: Scalar>(&self) -> Tensor<S> {
        let n = self.len();
        Tensor::from_fn(&[n, n], |k| if self.allows(k / n, k % n) { S::zero() } else { S::neg_infinity() })
    }

    /// `M x len` matrix averaging each example's tokens.
    pub fn pooling<S: Scalar>(&self) -> Tensor<S> {
        let n = self.len();
        let mut p = Tensor::zeros(&[self.examples.len(), n]);
        for (m, &(start, len)) in self.examples.iter().enumerate() {
            let w = S::of(1.0 / len as f64);
            for j in start..start + len {
                p.data_mut()[m * n + j] = w;
            }
        }
        p
    }
}

/// Concatenates examples in order and pads to the next bucket boundary.
pub fn pack(examples: &[Vec<Token>], limits: PackLimits) -> Result<PackedSequence, PatchError> {
    if examples.is_empty() {
        return Err(PatchError::Data("cannot pack zero examples".into()));
    }
    let token_len = examples
        .iter()
        .flatten()
        .map(|t| t.pixels.len())
        .next()
        .ok_or_else(|| PatchError::Data("cannot pack examples without tokens".into()))?;
    if let Some(m) = examples.iter().position(Vec::is_empty) {
        return Err(PatchError::Data(format!("example {m} has no tokens")));
    }
    let used: usize = examples.iter().map(Vec::len).sum();
    let len = used.div_ceil(limits.bucket.max(1)) * limits.bucket.max(1);
    if len > limits.max_len {
        return Err(PatchError::Capacity { len, max: limits.max_len });
    }
    let mut seq = PackedSequence {
        token_len,
        pixels: Vec::with_capacity(len * token_len),
        rows: Vec::with_capacity(len),
        cols: Vec::with_capacity(len),
        examples: Vec::with_capacity(examples.len()),
        owners: Vec::with_capacity(len),
        pad: len - used,
    };
    for (m, ex) in examples.iter().enumerate() {
        seq.examples.push((seq.owners.len(), ex.len()));
        for t in ex {
            if t.pixels.len() != token_len {
                return Err(PatchError::Data(format!("token has {} pixels, expected {token_len}", t.pixels.len())));
            }
            seq.pixels.extend_from_slice(&t.pixels);
            seq.rows.push(t.row);
            seq.cols.push(t.col);
            seq.owners.push(Some((m, t.plane)));
        }
    }
    seq.pixels.resize(len * token_len, 0.0);
    seq.rows.resize(len, 0);
    seq.cols.resize(len, 0);
    seq.owners.resize(len, None);
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Position,
    Velocity,
}

impl Stream {
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Position => "mpp",
            Stream::Velocity => "dpp",
        }
    }

    pub const BOTH: [Stream; 2] = [Stream::Position, Stream::Velocity];
}

/// Parameter names and shapes of one stream, in initialization order.
fn stream_layout(h: &Hyper, s: Stream) -> Vec<(String, Vec<usize>)> {
    let p = s.prefix();
    let (d, hd, nh, pos) = (h.dim, h.head_dim, h.heads, h.max_positions());
    let mut out = vec![
        (format!("{p}.patch_proj"), vec![h.token_len(), d]),
        (format!("{p}.pos_h"), vec![pos, d]),
        (format!("{p}.pos_w"), vec![pos, d]),
    ];
    for l in 0..h.depth {
        let q = format!("{p}.layer{l}");
        out.extend([
            (format!("{q}.ln1.gain"), vec![d]),
            (format!("{q}.ln1.bias"), vec![d]),
            (format!("{q}.attn.wq"), vec![nh, d, hd]),
            (format!("{q}.attn.wk"), vec![nh, d, hd]),
            (format!("{q}.attn.wv"), vec![nh, d, hd]),
            (format!("{q}.attn.wo"), vec![nh, hd, d]),
            (format!("{q}.ln2.gain"), vec![d]),
            (format!("{q}.ln2.bias"), vec![d]),
            (format!("{q}.mlp.w1"), vec![d, 4 * d]),
            (format!("{q}.mlp.b1"), vec![4 * d]),
            (format!("{q}.mlp.w2"), vec![4 * d, d]),
            (format!("{q}.mlp.b2"), vec![d]),
        ]);
    }
    out.extend([
        (format!("{p}.head.w1"), vec![d, d]),
        (format!("{p}.head.b1"), vec![d]),
        (format!("{p}.head.w2"), vec![d, 2]),
        (format!("{p}.head.b2"), vec![2]),
    ]);
    out
}

fn init_std(name: &str, shape: &[usize]) -> Option<f64> {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "gain" => None,
        "bias" | "b1" | "b2" => Some(0.0),
        "pos_h" | "pos_w" => Some(0.02),
        _ if name.ends_with("head.w2") => Some(0.1 / (shape[0] as f64).sqrt()),
        // fan-in is the second-to-last axis for every weight
        _ => Some(1.0 / (shape[shape.len() - 2] as f64).sqrt()),
    }
}

pub fn norm_name(s: Stream) -> String {
    format!("{}.input_norm", s.prefix())
}

/// Trainable parameter count; a pure function of the hyperparameters.
pub fn param_count(h: &Hyper) -> usize {
    Stream::BOTH
        .iter()
        .flat_map(|&s| stream_layout(h, s))
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hyper: Hyper,
    /// Trainable weights plus the frozen `*.input_norm` buffers.
    pub params: ParamStore<f64>,
}

impl Model {
    pub fn init(hyper: &Hyper, seed: u64) -> Result<Self, PatchError> {
        hyper.validate()?;
        let mut params = ParamStore::new();
        for (k, s) in Stream::BOTH.into_iter().enumerate() {
            let mut rng = Rng::new(seed, 0x1000 + k as u64);
            for (name, shape) in stream_layout(hyper, s) {
                let t = match init_std(&name, &shape) {
                    None => Tensor::full(&shape, 1.0),
                    Some(std) => Tensor::from_fn(&shape, |_| std * rng.normal()),
                };
                params.insert(&name, t)?;
            }
            params.insert(&norm_name(s), Tensor::new(vec![2], vec![0.0, 1.0])?)?;
        }
        Ok(Self { hyper: hyper.clone(), params })
    }

    pub fn input_norm(&self, s: Stream) -> [f64; 2] {
        let t = self.params.get(&norm_name(s)).expect("every model carries its input normalization");
        [t.data()[0], t.data()[1]]
    }

    pub fn set_input_norm(&mut self, s: Stream, norm: [f64; 2]) {
        let t = self.params.get_mut(&norm_name(s)).expect("every model carries its input normalization");
        t.data_mut().copy_from_slice(&norm);
    }

    pub fn is_trainable(name: &str) -> bool {
        !name.ends_with(".input_norm")
    }

    /// Rounds every value to float32, the precision of the model file.
    pub fn quantize(&mut self) {
        self.params = self.params.cast::<f32>().cast::<f64>();
    }

    pub fn sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".hyper.json");
        PathBuf::from(s)
    }

    /// Writes the weights to `path` and the hyperparameters next to it.
    pub fn save(&self, path: &Path) -> Result<(), PatchError> {
        self.params.save(path)?;
        let side = Self::sidecar(path);
        let json = serde_json::to_string_pretty(&self.hyper).expect("hyper serializes");
        std::fs::write(&side, json).map_err(|e| PatchError::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self, PatchError> {
        let hyper = Hyper::load(&Self::sidecar(path))?;
        let params = ParamStore::load(path)?;
        let expected = Model::init(&hyper, 0)?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(PatchError::Data(format!(
                        "{}: `{name}` has shape {:?}, expected {:?}",
                        path.display(),
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(PatchError::Data(format!("{}: missing parameter `{name}`", path.display()))),
            }
        }
        if params.len() != expected.params.len() {
            return Err(PatchError::Data(format!("{}: unexpected extra parameters", path.display())));
        }
        Ok(Self { hyper, params })
    }
}

struct LayerVars {
    ln1: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2: (Var, Var),
    mlp: (Var, Var, Var, Var),
}

/// One stream's parameters recorded on a tape, shared by every sequence in a batch.
pub struct StreamVars {
    proj: Var,
    pos_h: Var,
    pos_w: Var,
    layers: Vec<LayerVars>,
    head: (Var, Var, Var, Var),
    heads: usize,
    head_dim: usize,
}

impl StreamVars {
    pub fn record<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>, hyper: &Hyper, s: Stream) -> Result<Self, PatchError> {
        let p = s.prefix();
        let mut get = |n: String| tape.param(store, &n);
        let proj = get(format!("{p}.patch_proj"))?;
        let pos_h = get(format!("{p}.pos_h"))?;
        let pos_w = get(format!("{p}.pos_w"))?;
        let mut layers = Vec::with_capacity(hyper.depth);
        for l in 0..hyper.depth {
            let q = format!("{p}.layer{l}");
            layers.push(LayerVars {
                ln1: (get(format!("{q}.ln1.gain"))?, get(format!("{q}.ln1.bias"))?),
                wq: get(format!("{q}.attn.wq"))?,
                wk: get(format!("{q}.attn.wk"))?,
                wv: get(format!("{q}.attn.wv"))?,
                wo: get(format!("{q}.attn.wo"))?,
                ln2: (get(format!("{q}.ln2.gain"))?, get(format!("{q}.ln2.bias"))?),
                mlp: (
                    get(format!("{q}.mlp.w1"))?,
                    get(format!("{q}.mlp.b1"))?,
                    get(format!("{q}.mlp.w2"))?,
                    get(format!("{q}.mlp.b2"))?,
                ),
            });
        }
        let head = (
            get(format!("{p}.head.w1"))?,
            get(format!("{p}.head.b1"))?,
            get(format!("{p}.head.w2"))?,
            get(format!("{p}.head.b2"))?,
        );
        Ok(Self { proj, pos_h, pos_w, layers, head, heads: hyper.heads, head_dim: hyper.head_dim })
    }
}

const LN_EPS: f64 = 1e-5;

fn dropout_mask<S: Scalar>(shape: &[usize], rate: f64, rng: &mut Rng) -> Tensor<S> {
    let keep = S::of(1.0 / (1.0 - rate));
    Tensor::from_fn(shape, |_| if rng.uniform() >= rate { keep } else { S::zero() })
}

/// `W * flatten(patch) + pos_h[row] + pos_w[col]` for every packed position.
pub fn embed<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &StreamVars,
    packed: &PackedSequence,
    max_positions: usize,
) -> Result<Var, PatchError> {
    if let Some(bad) = packed.rows.iter().chain(&packed.cols).find(|&&i| i >= max_positions) {
        return Err(PatchError::Config(format!("patch index {bad} exceeds positional table size {max_positions}")));
    }
    let x = Tensor::new(vec![packed.len(), packed.token_len], packed.pixels.iter().map(|&v| S::of(v)).collect())?;
    let x = tape.constant(x);
    let e = tape.matmul(x, vars.proj)?;
    let ph = tape.gather_rows(vars.pos_h, &packed.rows)?;
    let pw = tape.gather_rows(vars.pos_w, &packed.cols)?;
    let e = tape.add(e, ph)?;
    Ok(tape.add(e, pw)?)
}

/// Packed forward pass; one 2-vector per example, in example order.
///
/// `dropout` is `(embed rate, rng)` in training and `None` at inference.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &StreamVars,
    packed: &PackedSequence,
    max_positions: usize,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<Var, PatchError> {
    let mut x = embed(tape, vars, packed, max_positions)?;
    if let Some((rate, rng)) = dropout {
        if rate > 0.0 {
            let shape = tape.value(x).shape().to_vec();
            let m = tape.constant(dropout_mask(&shape, rate, rng));
            x = tape.mul(x, m)?;
        }
    }
    let mask = Arc::new(packed.attention_mask::<S>());
    let inv_sqrt = S::of(1.0 / (vars.head_dim as f64).sqrt());
    let eps = S::of(LN_EPS);
    for layer in &vars.layers {
        let h = tape.layer_norm(x, layer.ln1.0, layer.ln1.1, eps)?;
        let mut attn = None;
        for i in 0..vars.heads {
            let wq = tape.slab(layer.wq, i)?;
            let wk = tape.slab(layer.wk, i)?;
            let wv = tape.slab(layer.wv, i)?;
            let wo = tape.slab(layer.wo, i)?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, inv_sqrt)?;
            let a = tape.softmax_masked(s, Some(mask.clone()))?;
            let o = tape.matmul(a, v)?;
            let o = tape.matmul(o, wo)?;
            attn = Some(match attn {
                None => o,
                Some(acc) => tape.add(acc, o)?,
            });
        }
        x = tape.add(x, attn.expect("at least one head"))?;
        let h = tape.layer_norm(x, layer.ln2.0, layer.ln2.1, eps)?;
        let (w1, b1, w2, b2) = layer.mlp;
        let m = tape.matmul(h, w1)?;
        let m = tape.add_row(m, b1)?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, w2)?;
        let m = tape.add_row(m, b2)?;
        x = tape.add(x, m)?;
    }
    let pool = tape.constant(packed.pooling());
    let pooled = tape.matmul(pool, x)?;
    let (w1, b1, w2, b2) = vars.head;
    let y = tape.matmul(pooled, w1)?;
    let y = tape.add_row(y, b1)?;
    let y = tape.gelu(y)?;
    let y = tape.matmul(y, w2)?;
    Ok(tape.add_row(y, b2)?)
}

/// Convenience inference pass returning plain vectors.
pub fn predict(model: &Model, s: Stream, packed: &PackedSequence) -> Result<Vec<[f64; 2]>, PatchError> {
    let mut tape = Tape::new();
    let vars = StreamVars::record(&mut tape, &model.params, &model.hyper, s)?;
    let y = forward(&mut tape, &vars, packed, model.hyper.max_positions(), None)?;
    Ok(tape.value(y).data().chunks(2).map(|c| [c[0], c[1]]).collect())
}

/// `sum_m MSE(X_m, gt_x[m]) + alpha * MSE(V_m, gt_v[m])`, MSE over the two components.
pub fn nlos_loss(x: &[[f64; 2]], v: &[[f64; 2]], gt_x: &[[f64; 2]], gt_v: &[[f64; 2]], alpha: f64) -> Result<f64, PatchError> {
    let m = x.len();
    if v.len() != m || gt_x.len() != m || gt_v.len() != m {
        return Err(PatchError::Data("loss inputs differ in length".into()));
    }
    let mse = |a: &[f64; 2], b: &[f64; 2]| 0.5 * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2));
    Ok((0..m).map(|i| mse(&x[i], &gt_x[i]) + alpha * mse(&v[i], &gt_v[i])).sum())
}

/// Taped form of [`nlos_loss`] for `M x 2` predictions.
pub fn nlos_loss_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    v: Var,
    gt_x: &[[f64; 2]],
    gt_v: &[[f64; 2]],
    alpha: f64,
) -> Result<Var, PatchError> {
    let target = |rows: &[[f64; 2]]| Tensor::new(vec![rows.len(), 2], rows.iter().flatten().map(|&t| S::of(t)).collect());
    let tx = tape.constant(target(gt_x)?);
    let tv = tape.constant(target(gt_v)?);
    let dx = tape.sub(x, tx)?;
    let dx2 = tape.mul(dx, dx)?;
    let lx = tape.sum(dx2)?;
    let dv = tape.sub(v, tv)?;
    let dv2 = tape.mul(dv, dv)?;
    let lv = tape.sum(dv2)?;
    let lv = tape.scale(lv, S::of(alpha))?;
    let l = tape.add(lx, lv)?;
    Ok(tape.scale(l, S::of(0.5))?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert_eq, proptest};
    use crate::numerics::Rng;

    pub(crate) fn toy_hyper() -> Hyper {
        Hyper {
            patch_size: 2,
            dim: 16,
            depth: 2,
            head_dim: 8,
            heads: 2,
            token_dropout: 0.0,
            embed_dropout: 0.0,
            alpha: 1.0,
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 1,
            frame_stride: 1,
            planes_per_sequence: 2,
        }
    }

    pub(crate) fn random_tokens(rng: &mut Rng, n: usize, plane: u32, tlen: usize, max_pos: usize) -> Vec<Token> {
        (0..n)
            .map(|_| Token {
                pixels: (0..tlen).map(|_| rng.normal()).collect(),
                row: rng.below(max_pos as u32) as usize,
                col: rng.below(max_pos as u32) as usize,
                example: 0,
                plane,
                tag: FrameTag::Current,
            })
            .collect()
    }

    fn full_mask(w: usize, h: usize) -> Raster {
        Raster::new(w, h, vec![1.0; w * h])
    }

    #[test]
    fn patchify_grid_cases() {
        let img = Raster::from_fn(64, 64, |x, y| (x + 64 * y) as f64);
        let t = patchify(&img, &full_mask(64, 64), 3, FrameTag::Current, 64).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].row, t[0].col), (0, 0));

        let img = Raster::from_fn(128, 64, |x, _| x as f64);
        let t = patchify(&img, &full_mask(128, 64), 3, FrameTag::Next, 64).unwrap();
        let pos: Vec<_> = t.iter().map(|t| (t.row, t.col)).collect();
        assert_eq!(pos, [(0, 0), (0, 1)]);

        assert!(patchify(&img, &Raster::zeros(128, 64), 3, FrameTag::Diff, 16).unwrap().is_empty());
        assert!(patchify(&img, &full_mask(128, 64), 3, FrameTag::Diff, 0).is_err());
    }

    #[test]
    fn patchify_reassembles_padded_plane() {
        let mut rng = Rng::new(3, 3);
        for _ in 0..20 {
            let (w, h) = (5 + rng.below(40) as usize, 5 + rng.below(40) as usize);
            // random blob mask with holes
            let (cx, cy) = (rng.uniform_in(0.0, w as f64), rng.uniform_in(0.0, h as f64));
            let r = rng.uniform_in(2.0, 15.0);
            let mask = Raster::from_fn(w, h, |x, y| {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d < r && (x * 7 + y * 3) % 11 != 0 {
                    1.0
                } else {
                    0.0
                }
            });
            let img = Raster::from_fn(w, h, |x, y| mask.get(x, y) * (1.0 + x as f64 * 0.5 + y as f64));
            let patch = 1 + rng.below(7) as usize;
            let tokens = patchify(&img, &mask, 0, FrameTag::Current, patch).unwrap();
            let Some(bb) = BBox::of_mask(&mask) else {
                assert!(tokens.is_empty());
                continue;
            };
            let (rows, cols) = (bb.height().div_ceil(patch), bb.width().div_ceil(patch));
            let (pw, ph) = (cols * patch, rows * patch);
            let mut canvas = vec![0.0; pw * ph];
            for t in &tokens {
                for dy in 0..patch {
                    for dx in 0..patch {
                        canvas[(t.row * patch + dy) * pw + t.col * patch + dx] = t.pixels[dy * patch + dx];
                    }
                }
            }
            for y in 0..ph {
                for x in 0..pw {
                    let (gx, gy) = (bb.x0 + x, bb.y0 + y);
                    let want = if gx < w && gy < h { img.get(gx, gy) } else { 0.0 };
                    assert_eq!(canvas[y * pw + x], want);
                }
            }
        }
    }

    #[test]
    fn token_dropout_rules() {
        let mut rng = Rng::new(1, 1);
        let toks = random_tokens(&mut rng, 10, 0, 4, 4);
        assert_eq!(token_dropout(&toks, 0.0, &mut rng).unwrap(), toks);
        for _ in 0..50 {
            assert_eq!(token_dropout(&toks[..1], 0.99, &mut rng).unwrap().len(), 1);
        }
        let many = random_tokens(&mut rng, 10_000, 0, 1, 4);
        let kept = token_dropout(&many, 0.4, &mut rng).unwrap().len() as f64 / 1e4;
        assert!((kept - 0.6).abs() < 0.02, "kept {kept}");
        assert!(token_dropout(&toks, 1.0, &mut rng).is_err());
    }

    fn single(rng: &mut Rng, h: &Hyper, n: usize) -> PackedSequence {
        pack(&[random_tokens(rng, n, 0, h.token_len(), 3)], PackLimits::default()).unwrap()
    }

    #[test]
    fn embedding_is_table_lookup_plus_projection() {
        let h = toy_hyper();
        let model = Model::init(&h, 9).unwrap();
        let mut rng = Rng::new(9, 1);
        let pixels: Vec<f64> = (0..h.token_len()).map(|_| rng.normal()).collect();
        let tok = |row, col, pixels: &Vec<f64>| Token { pixels: pixels.clone(), row, col, example: 0, plane: 0, tag: FrameTag::Current };
        let zero = vec![0.0; h.token_len()];
        let seq = pack(
            &[vec![tok(2, 3, &pixels), tok(2, 3, &pixels), tok(2, 0, &pixels), tok(0, 3, &pixels), tok(0, 0, &pixels), tok(4, 1, &zero)]],
            PackLimits::default(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let vars = StreamVars::record(&mut tape, &model.params, &h, Stream::Position).unwrap();
        let e = embed(&mut tape, &vars, &seq, h.max_positions()).unwrap();
        let e = tape.value(e);
        let row = |i: usize| &e.data()[i * h.dim..(i + 1) * h.dim];
        assert_eq!(row(0), row(1));
        let (ph, pw) = (model.params.get("mpp.pos_h").unwrap(), model.params.get("mpp.pos_w").unwrap());
        for j in 0..h.dim {
            assert_eq!(row(5)[j], ph.at2(4, j) + pw.at2(1, j));
            let additive = row(0)[j] - row(2)[j] - row(3)[j] + row(4)[j];
            assert!(additive.abs() < 1e-12);
        }
        let bad = pack(&[vec![tok(h.max_positions(), 0, &pixels)]], PackLimits::default()).unwrap();
        assert!(matches!(embed(&mut tape, &vars, &bad, h.max_positions()), Err(PatchError::Config(_))));
    }

    #[test]
    fn pack_mask_cases() {
        let mut rng = Rng::new(2, 2);
        let one = pack(&[random_tokens(&mut rng, 5, 7, 4, 3)], PackLimits { bucket: 8, max_len: 64 }).unwrap();
        assert_eq!((one.len(), one.pad), (8, 3));
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(one.allows(i, j), i < 5 && j < 5);
            }
        }
        let two = pack(
            &[random_tokens(&mut rng, 3, 1, 4, 3), random_tokens(&mut rng, 2, 1, 4, 3)],
            PackLimits { bucket: 1, max_len: 64 },
        )
        .unwrap();
        assert_eq!(two.examples, [(0, 3), (3, 2)]);
        let m = two.attention_mask::<f64>();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.at2(i, j) == 0.0, (i < 3) == (j < 3));
            }
        }
        let big = vec![random_tokens(&mut rng, 40, 0, 4, 3)];
        assert!(matches!(pack(&big, PackLimits { bucket: 8, max_len: 32 }), Err(PatchError::Capacity { len: 40, max: 32 })));
        assert!(pack(&[], PackLimits::default()).is_err());
    }

    proptest! {
        #[test]
        fn mask_allows_exactly_matching_owners(counts in prop::collection::vec((1usize..6, 0u32..3), 1..4), bucket in 1usize..9) {
            let mut rng = Rng::new(counts.len() as u64, bucket as u64);
            // tokens within one example may carry different plane IDs
            let examples: Vec<Vec<Token>> = counts.iter().map(|&(n, id)| {
                let mut t = random_tokens(&mut rng, n, id, 1, 2);
                if n > 1 { t[0].plane = id + 1; }
                t
            }).collect();
            let seq = pack(&examples, PackLimits { bucket, max_len: 1000 }).unwrap();
            let mut owner = Vec::new();
            for (m, ex) in examples.iter().enumerate() {
                owner.extend(ex.iter().map(|t| Some((m, t.plane))));
            }
            owner.resize(seq.len(), None);
            let mask = seq.attention_mask::<f64>();
            for i in 0..seq.len() {
                for j in 0..seq.len() {
                    let allow = owner[i].is_some() && owner[i] == owner[j];
                    prop_assert_eq!(mask.at2(i, j) == 0.0, allow);
                }
            }
        }
    }

    #[test]
    fn pooling_matches_explicit_loop() {
        let mut rng = Rng::new(4, 4);
        let seq = pack(
            &[random_tokens(&mut rng, 3, 0, 1, 2), random_tokens(&mut rng, 7, 1, 1, 2), random_tokens(&mut rng, 1, 0, 1, 2)],
            PackLimits::default(),
        )
        .unwrap();
        let x = Tensor::from_fn(&[seq.len(), 5], |_| rng.normal());
        let pooled = crate::numerics::matmul(&seq.pooling(), &x).unwrap();
        for (m, &(start, len)) in seq.examples.iter().enumerate() {
            for c in 0..5 {
                let mut acc = 0.0;
                for j in start..start + len {
                    acc += x.at2(j, c);
                }
                assert!((pooled.at2(m, c) - acc / len as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outputs_follow_example_order_and_are_isolated() {
        let h = toy_hyper();
        let model = Model::init(&h, 5).unwrap();
        let mut rng = Rng::new(5, 5);
        let exs: Vec<Vec<Token>> = (0..3).map(|m| random_tokens(&mut rng, 2 + m * 3, m as u32, h.token_len(), 3)).collect();
        let base = predict(&model, Stream::Position, &pack(&exs, PackLimits::default()).unwrap()).unwrap();
        assert_eq!(base.len(), 3);

        let perm = [2usize, 0, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| exs[i].clone()).collect();
        let out = predict(&model, Stream::Position, &pack(&permuted, PackLimits::default()).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!((out[k][c] - base[i][c]).abs() < 1e-6);
            }
        }

        for m in 0..3 {
            let mut changed = exs.clone();
            for t in &mut changed[m] {
                t.pixels.iter_mut().for_each(|p| *p += rng.normal());
            }
            let out = predict(&model, Stream::Position, &pack(&changed, PackLimits::default()).unwrap()).unwrap();
            for j in 0..3 {
                if j == m {
                    assert_ne!(out[j], base[j]);
                } else {
                    assert_eq!(out[j], base[j]);
                }
            }
        }
    }

    #[test]
    fn zero_rate_training_forward_equals_inference() {
        let h = toy_hyper();
        let model = Model::init(&h, 6).unwrap();
        let mut rng = Rng::new(6, 6);
        let seq = single(&mut rng, &h, 7);
        let infer = predict(&model, Stream::Velocity, &seq).unwrap();
        let mut tape = Tape::new();
        let vars = StreamVars::record(&mut tape, &model.params, &h, Stream::Velocity).unwrap();
        let y = forward(&mut tape, &vars, &seq, h.max_positions(), Some((0.0, &mut rng))).unwrap();
        let train: Vec<[f64; 2]> = tape.value(y).data().chunks(2).map(|c| [c[0], c[1]]).collect();
        assert_eq!(train, infer);
    }

    #[test]
    fn f32_packing_tracks_f64() {
        let h = toy_hyper();
        let model = Model::init(&h, 8).unwrap();
        let mut rng = Rng::new(8, 8);
        let exs: Vec<Vec<Token>> = (0..2).map(|m| random_tokens(&mut rng, 4, m, h.token_len(), 3)).collect();
        let seq = pack(&exs, PackLimits::default()).unwrap();
        let want = predict(&model, Stream::Position, &seq).unwrap();
        let p32 = model.params.cast::<f32>();
        for (m, ex) in exs.iter().enumerate() {
            let alone = pack(std::slice::from_ref(ex), PackLimits::default()).unwrap();
            let mut tape = Tape::<f32>::new();
            let vars = StreamVars::record(&mut tape, &p32, &h, Stream::Position).unwrap();
            let y = forward(&mut tape, &vars, &alone, h.max_positions(), None).unwrap();
            for c in 0..2 {
                assert!((tape.value(y).data()[c] as f64 - want[m][c]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn loss_cases() {
        let z = [[0.0, 0.0]; 2];
        assert_eq!(nlos_loss(&z, &z, &z, &z, 1.0).unwrap(), 0.0);
        let x = [[1.0, 0.0], [0.0, 2.0]];
        assert_eq!(nlos_loss(&x, &z, &z, &z, 1.0).unwrap(), 2.5);
        assert_eq!(nlos_loss(&z, &x, &z, &z, 0.0).unwrap(), 0.0);
        assert!(nlos_loss(&x, &z[..1], &z, &z, 1.0).is_err());

        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let vv = tape.constant(Tensor::new(vec![2, 2], vec![0.5, 0.0, 0.0, -1.0]).unwrap());
        let l = nlos_loss_tape(&mut tape, xv, vv, &z, &[[0.0, 0.0], [0.0, 1.0]], 3.0).unwrap();
        let want = nlos_loss(&x, &[[0.5, 0.0], [0.0, -1.0]], &z, &[[0.0, 0.0], [0.0, 1.0]], 3.0).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-15);
    }

    #[test]
    fn model_save_load_and_param_count() {
        let h = toy_hyper();
        let mut model = Model::init(&h, 11).unwrap();
        let trainable: usize = model.params.iter().filter(|(n, _)| Model::is_trainable(n)).map(|(_, t)| t.numel()).sum();
        assert_eq!(trainable, param_count(&h));
        let wider = Hyper { dim: 32, head_dim: 16, ..h.clone() };
        assert!(param_count(&wider) > param_count(&h));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pfnd");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_ne!(back, model);
        model.quantize();
        assert_eq!(back, model);
        assert_eq!(std::fs::read(&path).unwrap(), {
            back.save(&dir.path().join("again.pfnd")).unwrap();
            std::fs::read(dir.path().join("again.pfnd")).unwrap()
        });

        std::fs::write(Model::sidecar(&path), serde_json::to_string(&Hyper { dim: 32, head_dim: 16, ..h }).unwrap()).unwrap();
        assert!(matches!(Model::load(&path), Err(PatchError::Data(_))));
    }

    #[test]
    fn hyper_rejects_bad_values_and_unknown_keys() {
        assert!(Hyper::desk().validate().is_ok());
        assert!(Hyper::full().validate().is_ok());
        assert!(Hyper { dim: 63, ..Hyper::desk() }.validate().is_err());
        assert!(Hyper { token_dropout: 1.0, ..Hyper::desk() }.validate().is_err());
        let mut v = serde_json::to_value(Hyper::desk()).unwrap();
        v["surprise"] = 1.into();
        assert!(serde_json::from_value::<Hyper>(v).is_err());
    }
}
