//! Dataset synthesis and RMSprop training of the guidance encoder through
//! the differentiable search.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astar::{astar, dijkstra, Connectivity, Heuristic};
use crate::diff_astar::{self, search_in, SearchConfig, SearchError};
use crate::gridmap::{random_map, Cell, sample_problem_with, MapError, OccupancyMap, PathMap, PlanningProblem, SamplerConfig};
use crate::numcore::{Graph, Tensor};
use crate::par::{self, Exec};
use crate::vit::{self, ModelConfig, ModelParams, VitError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Model(#[from] VitError),
    #[error("no path between {0} and {1} on a map that should be solvable")]
    Unsolvable(String, String),
    #[error("the training split is empty")]
    EmptyTrainSplit,
    #[error("gradient for weight {index} has {got} entries, expected {expected}")]
    GradShape { index: usize, expected: usize, got: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<ModelParams> },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub problem: PlanningProblem,
    pub truth: PathMap,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub seed: u64,
    /// Free-form `key: value` lines describing how the set was built.
    pub notes: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// Tags the last `test` samples as test and the `val` before them as
    /// validation; everything else trains.
    pub fn with_split(mut self, val: usize, test: usize) -> Self {
        let n = self.samples.len();
        for (i, s) in self.samples.iter_mut().enumerate() {
            s.split = if i + test >= n {
                Split::Test
            } else if i + test + val >= n {
                Split::Val
            } else {
                Split::Train
            };
        }
        self.notes.push(format!("split: train={} val={val} test={test}", n.saturating_sub(val + test)));
        self
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Optimal 8-connected path as supervision target.
pub fn label(problem: PlanningProblem) -> Result<Sample, TrainError> {
    let r = dijkstra(&problem, Connectivity::Eight);
    if !r.found {
        return Err(TrainError::Unsolvable(problem.start.to_string(), problem.goal.to_string()));
    }
    let problem = problem.with_truth(r.path)?;
    let truth = problem.truth.clone().expect("set by with_truth");
    Ok(Sample {
        problem,
        truth,
        split: Split::Train,
    })
}

/// `per_map` labelled problems on every map. Each map draws from its own
/// random stream, so the result does not depend on the execution mode.
pub fn build_dataset(maps: &[Arc<OccupancyMap>], per_map: usize, seed: u64) -> Result<Dataset, TrainError> {
    build_dataset_with(maps, per_map, seed, &SamplerConfig::default(), Exec::default())
}

pub fn build_dataset_with(
    maps: &[Arc<OccupancyMap>],
    per_map: usize,
    seed: u64,
    sampler: &SamplerConfig,
    exec: Exec,
) -> Result<Dataset, TrainError> {
    let per: Vec<Result<Vec<Sample>, TrainError>> = par::map_range(exec, maps.len(), |i| {
        let mut rng = stream_rng(seed, i as u64);
        (0..per_map)
            .map(|_| label(sample_problem_with(&maps[i], sampler, &mut rng)?))
            .collect()
    });
    let mut samples = Vec::with_capacity(maps.len() * per_map);
    for r in per {
        samples.extend(r?);
    }
    Ok(Dataset {
        samples,
        seed,
        notes: vec![
            format!("maps: {}", maps.len()),
            format!("problems_per_map: {per_map}"),
            format!("min_separation: {}", sampler.min_separation),
            format!("seed: {seed}"),
        ],
    })
}

/// Recipe for a corpus of problems on random maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub problems: usize,
    /// Size of the map pool the problems are spread over round-robin; 0
    /// draws a fresh map for every problem.
    pub maps: usize,
    pub height: usize,
    pub width: usize,
    pub density_min: f64,
    pub density_max: f64,
    pub min_separation: f64,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            problems: 200,
            maps: 0,
            height: 16,
            width: 16,
            density_min: 0.1,
            density_max: 0.3,
            min_separation: 0.5,
            val: 20,
            test: 50,
            seed: 0,
        }
    }
}

/// Labelled problems on random maps. With a map pool, problem `i` lives on
/// map `i mod maps`; otherwise each problem gets its own map. A map on which
/// no problem can be drawn is replaced by a fresh one from the same stream.
pub fn synthetic_dataset(cfg: &SyntheticConfig, exec: Exec) -> Result<Dataset, TrainError> {
    let sampler = SamplerConfig {
        min_separation: cfg.min_separation,
        max_retries: 2_000,
        ..SamplerConfig::default()
    };
    let fresh_map = |rng: &mut ChaCha8Rng| -> Result<Arc<OccupancyMap>, TrainError> {
        let mut last = None;
        for _ in 0..100 {
            let density = if cfg.density_max > cfg.density_min {
                rng.random_range(cfg.density_min..cfg.density_max)
            } else {
                cfg.density_min
            };
            let map = Arc::new(random_map(cfg.height, cfg.width, density, rng));
            match sample_problem_with(&map, &sampler, &mut rng.clone()) {
                Ok(_) => return Ok(map),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt").into())
    };
    let samples = if cfg.maps == 0 {
        let per = par::map_range(exec, cfg.problems, |i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let map = fresh_map(&mut rng)?;
            label(sample_problem_with(&map, &sampler, &mut rng)?)
        });
        per.into_iter().collect::<Result<Vec<_>, _>>()?
    } else {
        let pool = par::map_range(exec, cfg.maps, |j| fresh_map(&mut stream_rng(cfg.seed, j as u64)));
        let pool = pool.into_iter().collect::<Result<Vec<_>, _>>()?;
        let per = par::map_range(exec, cfg.problems, |i| {
            let mut rng = stream_rng(cfg.seed, (cfg.maps + i) as u64);
            label(sample_problem_with(&pool[i % cfg.maps], &sampler, &mut rng)?)
        });
        per.into_iter().collect::<Result<Vec<_>, _>>()?
    };
    let pool = if cfg.maps == 0 { cfg.problems } else { cfg.maps };
    let ds = Dataset {
        samples,
        seed: cfg.seed,
        notes: vec![
            format!("synthetic: {} problems on {} maps of {}x{}", cfg.problems, pool, cfg.height, cfg.width),
            format!("density: {}..{}", cfg.density_min, cfg.density_max),
            format!("min_separation: {}", cfg.min_separation),
            format!("seed: {}", cfg.seed),
        ],
    };
    Ok(ds.with_split(cfg.val, cfg.test))
}

/// One of the eight rotations/reflections of a `height × width` grid.
/// Bit 0 mirrors columns, bit 1 mirrors rows, bit 2 transposes (applied
/// last, so the output is `width × height`).
pub fn symmetry_cell(c: Cell, k: u8, height: usize, width: usize) -> Cell {
    let mut r = c.row;
    let mut col = c.col;
    if k & 1 != 0 {
        col = width - 1 - col;
    }
    if k & 2 != 0 {
        r = height - 1 - r;
    }
    if k & 4 != 0 {
        std::mem::swap(&mut r, &mut col);
    }
    Cell::new(r, col)
}

/// A sample mapped through [`symmetry_cell`]. Step costs of the 8-connected
/// grid are invariant under these maps, so the reference path stays optimal.
pub fn transform_sample(sample: &Sample, k: u8) -> Result<Sample, TrainError> {
    if k == 0 {
        return Ok(sample.clone());
    }
    let src = &*sample.problem.map;
    let (h, w) = (src.height(), src.width());
    let (oh, ow) = if k & 4 != 0 { (w, h) } else { (h, w) };
    let mut cells = vec![0u8; h * w];
    for i in 0..src.len() {
        let c = symmetry_cell(src.cell_at(i), k, h, w);
        cells[c.row * ow + c.col] = src.cells()[i];
    }
    let map = Arc::new(OccupancyMap::new(oh, ow, cells)?);
    let f = |c: Cell| symmetry_cell(c, k, h, w);
    let problem = PlanningProblem::new(map, f(sample.problem.start), f(sample.problem.goal))?;
    let path: Vec<Cell> = sample
        .problem
        .truth_path
        .as_ref()
        .ok_or_else(|| TrainError::Unsolvable(sample.problem.start.to_string(), sample.problem.goal.to_string()))?
        .iter()
        .map(|&c| f(c))
        .collect();
    let problem = problem.with_truth(path)?;
    let truth = problem.truth.clone().expect("set by with_truth");
    Ok(Sample {
        problem,
        truth,
        split: sample.split,
    })
}

/// RMSprop running averages, one buffer per weight.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub sq_avg: Vec<Vec<f64>>,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(params: &[Tensor], lr: f64, rho: f64, eps: f64) -> Self {
        Self {
            sq_avg: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            lr,
            rho,
            eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; nothing changed.
    SkippedNonFinite,
}

/// `v ← ρv + (1−ρ)g²; p ← p − lr·g/(√v+ε)`.
pub fn rmsprop_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptState,
    lr: f64,
) -> Result<StepOutcome, TrainError> {
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.sq_avg[i].len() != g.len() {
            return Err(TrainError::GradShape {
                index: i,
                expected: p.len(),
                got: g.len(),
            });
        }
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    let (rho, eps) = (state.rho, state.eps);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.sq_avg) {
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = rho * *vi + (1.0 - rho) * gi * gi;
            *w -= lr * gi / (vi.sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Epochs without a validation-expansion improvement before stopping.
    pub patience: usize,
    pub search: SearchConfig,
    /// Seeds the per-epoch shuffle of the training split.
    pub seed: u64,
    /// Show every training sample under a random rotation/reflection.
    pub augment: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.001,
            rho: 0.99,
            eps: 1e-8,
            clip_norm: 5.0,
            patience: 25,
            search: SearchConfig::default(),
            seed: 0,
            augment: false,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_expansions_mean: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the fewest mean validation expansions.
    pub best: ModelParams,
    pub best_epoch: usize,
    /// Weights after the last epoch.
    pub last: ModelParams,
    /// Row 0 evaluates the initial weights; row `k` is epoch `k`.
    pub history: Vec<EpochMetrics>,
    pub stopped_early: bool,
    pub skipped_steps: usize,
    pub notes: Vec<String>,
}

impl TrainOutcome {
    /// Metrics CSV with `#`-prefixed notes ahead of the header.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::new();
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        out.push_str("epoch,train_loss,val_loss,val_expansions_mean\n");
        for m in &self.history {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                m.epoch, m.train_loss, m.val_loss, m.val_expansions_mean
            );
        }
        out
    }

    pub fn write_metrics(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.metrics_csv())?;
        Ok(())
    }
}

/// Loss and expansion count of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub expansions: usize,
    pub found: bool,
}

pub fn evaluate_sample(params: &ModelParams, sample: &Sample, search: &SearchConfig) -> Result<Evaluation, TrainError> {
    let mut graph = Graph::new();
    let fwd = vit::forward(&mut graph, params, &sample.problem)?;
    let mut trace = search_in(graph, fwd.guidance, &sample.problem, search)?;
    let l = diff_astar::loss(&mut trace, &sample.truth)?;
    Ok(Evaluation {
        loss: trace.graph.value(l).item(),
        expansions: trace.expansions,
        found: trace.found,
    })
}

/// Mean loss and mean expansions over `samples`.
pub fn evaluate(
    params: &ModelParams,
    samples: &[&Sample],
    search: &SearchConfig,
    exec: Exec,
) -> Result<(f64, f64), TrainError> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let evals = par::map(exec, samples, |s| evaluate_sample(params, s, search));
    let evals = evals.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = evals.len() as f64;
    Ok((
        evals.iter().map(|e| e.loss).sum::<f64>() / n,
        evals.iter().map(|e| e.expansions as f64).sum::<f64>() / n,
    ))
}

/// Mean expansions of classic octile A* on `samples`.
pub fn classic_expansions(samples: &[&Sample], conn: Connectivity) -> f64 {
    let total: usize = samples
        .iter()
        .map(|s| astar(&s.problem, conn, Heuristic::default_for(conn)).expansions)
        .sum();
    total as f64 / samples.len().max(1) as f64
}

/// One optimisation step on a single sample: forward, search, loss,
/// backward, clip, update. Returns the loss before the update.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut OptState,
    sample: &Sample,
    cfg: &TrainConfig,
) -> Result<(f64, StepOutcome), TrainError> {
    let mut graph = Graph::new();
    let fwd = vit::forward(&mut graph, params, &sample.problem)?;
    let mut trace = search_in(graph, fwd.guidance, &sample.problem, &cfg.search)?;
    let l = diff_astar::loss(&mut trace, &sample.truth)?;
    let loss = trace.graph.value(l).item();
    if !loss.is_finite() {
        return Ok((loss, StepOutcome::SkippedNonFinite));
    }
    trace.graph.backward(l).map_err(SearchError::from)?;
    let mut grads = params.gradients(&trace.graph, &fwd.bound);
    clip_grad_norm(&mut grads, cfg.clip_norm);
    let outcome = rmsprop_step(params.tensors_mut(), &grads, state, cfg.lr)?;
    Ok((loss, outcome))
}

/// Trains from freshly initialised weights.
pub fn train(dataset: &Dataset, model: ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_from(dataset, ModelParams::init(model)?, cfg)
}

pub fn train_from(dataset: &Dataset, init: ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let train_set = dataset.split(Split::Train);
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let val_set = dataset.split(Split::Val);
    let mut notes = dataset.notes.clone();
    notes.push(format!(
        "samples: train={} val={} test={}",
        train_set.len(),
        val_set.len(),
        dataset.count(Split::Test)
    ));
    notes.push(format!("model: {}", serde_json::to_string(init.config()).unwrap_or_default()));
    notes.push(format!(
        "optimizer: rmsprop lr={} rho={} eps={} clip={} patience={} epochs={} seed={} augment={}",
        cfg.lr, cfg.rho, cfg.eps, cfg.clip_norm, cfg.patience, cfg.epochs, cfg.seed, cfg.augment
    ));

    let mut params = init;
    let mut state = OptState::new(params.tensors(), cfg.lr, cfg.rho, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (train0, _) = evaluate(&params, &train_set, &cfg.search, cfg.exec)?;
    let (val_loss, val_exp) = evaluate(&params, &val_set, &cfg.search, cfg.exec)?;
    let mut history = vec![EpochMetrics {
        epoch: 0,
        train_loss: train0,
        val_loss,
        val_expansions_mean: val_exp,
    }];
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_score = val_exp;
    let mut since_best = 0;
    let mut skipped = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let last_good = params.clone();
        for &i in &order {
            let k: u8 = if cfg.augment { rng.random_range(0..8) } else { 0 };
            let sample = transform_sample(train_set[i], k)?;
            let (loss, outcome) = train_step(&mut params, &mut state, &sample, cfg)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            if outcome == StepOutcome::SkippedNonFinite {
                skipped += 1;
            }
            total += loss;
        }
        if !params.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                last_good: Box::new(last_good),
            });
        }
        let (val_loss, val_exp) = evaluate(&params, &val_set, &cfg.search, cfg.exec)?;
        history.push(EpochMetrics {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss,
            val_expansions_mean: val_exp,
        });
        // an empty validation split keeps the latest weights
        if val_exp < best_score || val_set.is_empty() {
            best_score = val_exp;
            best = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    notes.push(format!("best_epoch: {best_epoch}"));
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        history,
        stopped_early,
        skipped_steps: skipped,
        notes,
    })
}
