//! Vision-transformer encoder/decoder producing a guidance map of the same
//! size as its input map.
//!
//! The input planes (occupancy, and optionally one-hot start and goal) are
//! padded to a multiple of the patch size `S`, cut into `N` row-major
//! `S × S` patches and flattened. Each patch vector is projected to `D`
//! dimensions, a learned positional row is added, and the tokens pass through
//! `L` pre-norm transformer blocks. The decoder projects every token back to
//! `S²` values, which are reassembled into the map grid, cropped, and squashed
//! into `[c_min, 1]`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff_astar::GuidanceMap;
use crate::gridmap::{Cell, OccupancyMap, PlanningProblem};
use crate::numcore::{Graph, NumError, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "vitastar-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum VitError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("map needs {required} patches but the positional table holds {n_max}; raise n_max to at least {required}")]
    Capacity { required: usize, n_max: usize },
    #[error("embedding has {got} rows, the patch grid has {expected}")]
    MetaMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub n_max: usize,
    pub seed: u64,
    /// Lower bound of the output guidance.
    pub c_min: f64,
    /// Feed start and goal planes next to the occupancy plane.
    pub markers: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            hidden_dim: 64,
            blocks: 3,
            heads: 4,
            n_max: 4096,
            seed: 0,
            c_min: 0.05,
            markers: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), VitError> {
        let bad = |m: &str| Err(VitError::Config(m.to_string()));
        if self.patch_size == 0 {
            return bad("patch_size must be at least 1");
        }
        if self.hidden_dim == 0 || self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad("hidden_dim must be a positive multiple of heads");
        }
        if self.n_max == 0 {
            return bad("n_max must be at least 1");
        }
        if !(self.c_min > 0.0 && self.c_min < 1.0) {
            return bad("c_min must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        if self.markers {
            3
        } else {
            1
        }
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels()
    }

    /// Names and shapes of every weight, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden_dim;
        let s2 = self.patch_size * self.patch_size;
        let mut out = vec![
            ("patch.weight".to_string(), vec![self.patch_len(), d]),
            ("patch.bias".to_string(), vec![d]),
            ("pos.table".to_string(), vec![self.n_max, d]),
        ];
        for b in 0..self.blocks {
            let p = |n: &str| format!("blocks.{b}.{n}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.q.weight"), vec![d, d]),
                (p("attn.q.bias"), vec![d]),
                (p("attn.k.weight"), vec![d, d]),
                (p("attn.k.bias"), vec![d]),
                (p("attn.v.weight"), vec![d, d]),
                (p("attn.v.bias"), vec![d]),
                (p("attn.out.weight"), vec![d, d]),
                (p("attn.out.bias"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ff.in.weight"), vec![d, 2 * d]),
                (p("ff.in.bias"), vec![2 * d]),
                (p("ff.out.weight"), vec![2 * d, d]),
                (p("ff.out.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("final_ln.gain".to_string(), vec![d]),
            ("final_ln.bias".to_string(), vec![d]),
            ("decoder.weight".to_string(), vec![d, s2]),
            ("decoder.bias".to_string(), vec![s2]),
        ]);
        out
    }
}

/// Padded map planes cut into row-major patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `N × (S²·C)`; entry `(r·S + c)·C + ch` of a patch is plane `ch` at
    /// offset `(r, c)` inside the patch.
    pub patches: Tensor,
    pub n_rows: usize,
    pub n_cols: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position of map cell `(i, j)` in the flattened `N × S²` layout of a
    /// single-plane patch grid.
    fn flat_index(&self, i: usize, j: usize) -> usize {
        let s = self.patch_size;
        let token = (i / s) * self.n_cols + j / s;
        token * s * s + (i % s) * s + j % s
    }
}

/// Number of patches a `height × width` map needs at patch size `s`.
pub fn patch_count(height: usize, width: usize, s: usize) -> usize {
    height.div_ceil(s) * width.div_ceil(s)
}

/// Pads `planes` (each `height × width`, row-major) with the given
/// per-plane fill values and cuts them into patches.
pub fn patchify_planes(
    planes: &[Vec<f64>],
    fill: &[f64],
    height: usize,
    width: usize,
    s: usize,
) -> PatchSequence {
    assert!(s >= 1, "patch size must be at least 1");
    assert_eq!(planes.len(), fill.len());
    let channels = planes.len();
    let n_rows = height.div_ceil(s);
    let n_cols = width.div_ceil(s);
    let len = s * s * channels;
    let mut data = vec![0.0; n_rows * n_cols * len];
    for pr in 0..n_rows {
        for pc in 0..n_cols {
            let base = (pr * n_cols + pc) * len;
            for r in 0..s {
                for c in 0..s {
                    let (i, j) = (pr * s + r, pc * s + c);
                    for ch in 0..channels {
                        data[base + (r * s + c) * channels + ch] = if i < height && j < width {
                            planes[ch][i * width + j]
                        } else {
                            fill[ch]
                        };
                    }
                }
            }
        }
    }
    PatchSequence {
        patches: Tensor::new(vec![n_rows * n_cols, len], data).expect("sized above"),
        n_rows,
        n_cols,
        pad_bottom: n_rows * s - height,
        pad_right: n_cols * s - width,
        height,
        width,
        patch_size: s,
        channels,
    }
}

fn occupancy_plane(map: &OccupancyMap) -> Vec<f64> {
    (0..map.len())
        .map(|i| if map.is_blocked(map.cell_at(i)) { 1.0 } else { 0.0 })
        .collect()
}

fn one_hot_plane(map: &OccupancyMap, cell: Cell) -> Vec<f64> {
    let mut plane = vec![0.0; map.len()];
    plane[map.index(cell)] = 1.0;
    plane
}

/// Single-plane patches of the occupancy grid (obstacle = 1). Padding cells
/// are obstacles.
pub fn patchify(map: &OccupancyMap, s: usize) -> PatchSequence {
    patchify_planes(&[occupancy_plane(map)], &[1.0], map.height(), map.width(), s)
}

/// Reassembles plane `channel` of a patch sequence and drops the padding.
pub fn unpatchify_plane(seq: &PatchSequence, channel: usize) -> Vec<f64> {
    let data = seq.patches.data();
    let c = seq.channels;
    let mut out = Vec::with_capacity(seq.height * seq.width);
    for i in 0..seq.height {
        for j in 0..seq.width {
            out.push(data[seq.flat_index(i, j) * c + channel]);
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(seq: &PatchSequence) -> OccupancyMap {
    let cells = unpatchify_plane(seq, 0).iter().map(|&v| u8::from(v != 0.0)).collect();
    OccupancyMap::new(seq.height, seq.width, cells).expect("dims from the sequence")
}

/// Model input for a planning query.
pub fn assemble(problem: &PlanningProblem, config: &ModelConfig) -> PatchSequence {
    let map = &*problem.map;
    let mut planes = vec![occupancy_plane(map)];
    let mut fill = vec![1.0];
    if config.markers {
        planes.push(one_hot_plane(map, problem.start));
        planes.push(one_hot_plane(map, problem.goal));
        fill.extend([0.0, 0.0]);
    }
    patchify_planes(&planes, &fill, map.height(), map.width(), config.patch_size)
}

/// Weights of the encoder/decoder, stored flat in [`ModelConfig::layout`]
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedWeight {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    weights: Vec<NamedWeight>,
}

impl ModelParams {
    /// Fresh weights: matrices uniform in `±1/√fan_in`, biases 0, layer-norm
    /// gains 1, positional rows uniform in `±0.02`.
    pub fn init(config: ModelConfig) -> Result<Self, VitError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name == "pos.table" {
                (0..n).map(|_| rng.random_range(-0.02..0.02)).collect()
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn to_json(&self) -> Result<String, VitError> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            weights: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| NamedWeight {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self, VitError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(VitError::Checkpoint(format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(VitError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        ckpt.config.validate()?;
        let layout = ckpt.config.layout();
        if layout.len() != ckpt.weights.len() {
            return Err(VitError::Checkpoint(format!(
                "expected {} weights, found {}",
                layout.len(),
                ckpt.weights.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, shape), w) in layout.into_iter().zip(ckpt.weights) {
            if w.name != name || w.shape != shape {
                return Err(VitError::Checkpoint(format!(
                    "weight {:?} {:?} does not match expected {name:?} {shape:?}",
                    w.name, w.shape
                )));
            }
            if w.data.iter().any(|v| !v.is_finite()) {
                return Err(VitError::Checkpoint(format!("weight {name} has non-finite entries")));
            }
            tensors.push(Tensor::new(shape, w.data)?);
            names.push(name);
        }
        Ok(Self {
            config: ckpt.config,
            names,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), VitError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VitError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Records every weight on `graph`. The positional table contributes only
    /// its first `tokens` rows.
    pub fn bind(&self, graph: &mut Graph, tokens: usize) -> Result<Bound, VitError> {
        if tokens > self.config.n_max {
            return Err(VitError::Capacity {
                required: tokens,
                n_max: self.config.n_max,
            });
        }
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                if name == "pos.table" {
                    let rows: Vec<usize> = (0..tokens).collect();
                    graph.leaf(t.select_rows(&rows))
                } else {
                    graph.leaf(t.clone())
                }
            })
            .collect();
        Ok(Bound { vars, tokens })
    }

    /// Gradients for every weight after `graph.backward`, shaped like the
    /// weights. Rows of the positional table beyond the bound token count
    /// receive zero.
    pub fn gradients(&self, graph: &Graph, bound: &Bound) -> Vec<Vec<f64>> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&bound.vars)
            .map(|((name, t), &v)| {
                let mut out = vec![0.0; t.len()];
                if let Some(g) = graph.grad(v) {
                    if name == "pos.table" {
                        out[..g.len()].copy_from_slice(g);
                    } else {
                        out.copy_from_slice(g);
                    }
                }
                out
            })
            .collect()
    }

    /// Guidance map for `problem`, without keeping the graph.
    pub fn guidance(&self, problem: &PlanningProblem) -> Result<GuidanceMap, VitError> {
        let mut graph = Graph::new();
        let out = forward(&mut graph, self, problem)?;
        let t = graph.value(out.guidance);
        GuidanceMap::new(t.rows(), t.cols(), t.data().to_vec())
            .map_err(|e| VitError::Config(e.to_string()))
    }
}

/// Weights recorded on a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    tokens: usize,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }
}

/// Encoder output plus the per-block, per-head attention matrices.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

struct Weights<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Weights<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

fn linear(graph: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
    let y = graph.matmul(x, w)?;
    graph.add_bias(y, b)
}

/// Patch projection, positional rows and the transformer blocks.
pub fn encode(
    graph: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    seq: &PatchSequence,
) -> Result<Encoded, VitError> {
    let cfg = params.config();
    let n = seq.len();
    if n > cfg.n_max {
        return Err(VitError::Capacity {
            required: n,
            n_max: cfg.n_max,
        });
    }
    if n != bound.tokens {
        return Err(VitError::MetaMismatch {
            expected: bound.tokens,
            got: n,
        });
    }
    let mut w = Weights {
        vars: &bound.vars,
        next: 0,
    };
    let d = cfg.hidden_dim;
    let dh = d / cfg.heads;
    let patches = graph.constant(seq.patches.clone());
    let (pw, pb, pos) = (w.take(), w.take(), w.take());
    let projected = linear(graph, patches, pw, pb)?;
    let mut x = graph.add(projected, pos)?;
    let mut attention = Vec::new();
    for _ in 0..cfg.blocks {
        let (g1, b1) = (w.take(), w.take());
        let (qw, qb, kw, kb, vw, vb, ow, ob) = (
            w.take(),
            w.take(),
            w.take(),
            w.take(),
            w.take(),
            w.take(),
            w.take(),
            w.take(),
        );
        let (g2, b2) = (w.take(), w.take());
        let (f1w, f1b, f2w, f2b) = (w.take(), w.take(), w.take(), w.take());

        let a = graph.layer_norm(x, g1, b1, LN_EPS)?;
        let q = linear(graph, a, qw, qb)?;
        let k = linear(graph, a, kw, kb)?;
        let v = linear(graph, a, vw, vb)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = graph.slice_cols(q, h * dh, dh)?;
            let kh = graph.slice_cols(k, h * dh, dh)?;
            let vh = graph.slice_cols(v, h * dh, dh)?;
            let kt = graph.transpose(kh)?;
            let scores = graph.matmul(qh, kt)?;
            let scores = graph.scale(scores, 1.0 / (dh as f64).sqrt());
            let weights = graph.row_softmax(scores)?;
            attention.push(weights);
            heads.push(graph.matmul(weights, vh)?);
        }
        let merged = graph.concat_cols(&heads)?;
        let attn = linear(graph, merged, ow, ob)?;
        x = graph.add(x, attn)?;

        let f = graph.layer_norm(x, g2, b2, LN_EPS)?;
        let f = linear(graph, f, f1w, f1b)?;
        let f = graph.gelu(f);
        let f = linear(graph, f, f2w, f2b)?;
        x = graph.add(x, f)?;
    }
    let (gf, bf) = (w.take(), w.take());
    let tokens = graph.layer_norm(x, gf, bf, LN_EPS)?;
    Ok(Encoded { tokens, attention })
}

/// Projects every token to `S²` values, reassembles the grid, crops the
/// padding and maps the result into `[c_min, 1]`.
pub fn decode(
    graph: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    embedded: Var,
    seq: &PatchSequence,
) -> Result<Var, VitError> {
    let rows = graph.value(embedded).rows();
    if rows != seq.len() {
        return Err(VitError::MetaMismatch {
            expected: seq.len(),
            got: rows,
        });
    }
    let vars = bound.vars();
    let (dw, db) = (vars[vars.len() - 2], vars[vars.len() - 1]);
    let y = linear(graph, embedded, dw, db)?;
    let mut indices = Vec::with_capacity(seq.height * seq.width);
    for i in 0..seq.height {
        for j in 0..seq.width {
            indices.push(seq.flat_index(i, j));
        }
    }
    let grid = graph.gather(y, indices, vec![seq.height, seq.width])?;
    let squashed = graph.sigmoid(grid);
    let c_min = params.config().c_min;
    let scaled = graph.scale(squashed, 1.0 - c_min);
    Ok(graph.shift(scaled, c_min))
}

/// A forward pass recorded on a graph.
#[derive(Debug, Clone)]
pub struct Forward {
    pub guidance: Var,
    pub bound: Bound,
    pub encoded: Encoded,
}

/// Channel assembly, patchify, encode and decode for one query.
pub fn forward(graph: &mut Graph, params: &ModelParams, problem: &PlanningProblem) -> Result<Forward, VitError> {
    let seq = assemble(problem, params.config());
    let bound = params.bind(graph, seq.len())?;
    let encoded = encode(graph, params, &bound, &seq)?;
    let guidance = decode(graph, params, &bound, encoded.tokens, &seq)?;
    Ok(Forward {
        guidance,
        bound,
        encoded,
    })
}
