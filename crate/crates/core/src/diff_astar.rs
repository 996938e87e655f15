//! Differentiable A* in matrix form.
//!
//! Each iteration scores every cell with `G + H`, turns the scores of the
//! open cells into a distribution `exp(-(G+H)/τ) ⊙ O / ⟨exp(-(G+H)/τ), O⟩`
//! and selects its argmax as a one-hot map `V*`. The forward pass is an exact
//! best-first search; the backward pass treats the argmax as the identity, so
//! gradients reach the guidance map through every soft selection.
//!
//! * `G` holds accumulated guidance cost along the best-known route:
//!   expanding `v*` sets `g(n) = ⟨G, V*⟩ + guidance(n)·step(v*, n)` for every
//!   neighbour it improves.
//! * `H` is the free-space distance to the goal scaled by the smallest
//!   guidance value, so it never overestimates. The scale is treated as a
//!   constant by the backward pass.
//! * The loss compares the accumulated selections `P = Σ V*` with the
//!   reference path map.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astar::{walk_parents, Connectivity, SearchResult};
use crate::gridmap::{Cell, OccupancyMap, PathMap, PlanningProblem};
use crate::numcore::{masked_softmax_values, Graph, NumError, Tensor, Var};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("guidance map is {got_h}x{got_w}, the map is {height}x{width}")]
    DimsMismatch {
        height: usize,
        width: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("guidance must be positive and finite everywhere, found {0}")]
    NonPositiveGuidance(f64),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("the goal was never selected, there is no path to backtrack")]
    GoalNotReached,
}

/// Strictly positive per-cell traversal costs.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap {
    height: usize,
    width: usize,
    costs: Tensor,
}

impl GuidanceMap {
    pub fn new(height: usize, width: usize, costs: Vec<f64>) -> Result<Self, SearchError> {
        if let Some(&bad) = costs.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(SearchError::NonPositiveGuidance(bad));
        }
        let costs = Tensor::new(vec![height, width], costs)?;
        Ok(Self {
            height,
            width,
            costs,
        })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("positive constant")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn costs(&self) -> &[f64] {
        self.costs.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.costs
    }

    pub fn at(&self, c: Cell) -> f64 {
        self.costs.data()[c.row * self.width + c.col]
    }

    pub fn min(&self) -> f64 {
        self.costs().iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// What `𝒱` divides the L1 distance by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalizer {
    /// Total cell count `H·W`: a per-cell mean.
    #[default]
    Cells,
    /// Number of search iterations.
    Steps,
}

/// Which selections make up `P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    /// Every selection of the search.
    #[default]
    History,
    /// Only the selections of cells on the backtracked path.
    Path,
}

/// Units in which the softmax temperature is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauUnits {
    /// `τ` applies to the raw scores.
    Absolute,
    /// `τ` is multiplied by the mean guidance value, which makes the soft
    /// selections invariant to a global rescaling of the guidance map.
    #[default]
    MeanGuidance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Softmax temperature; `None` uses `√W` of the map being searched.
    pub tau: Option<f64>,
    pub tau_units: TauUnits,
    /// Let gradients reach the heuristic's `min(guidance)` factor.
    pub heuristic_gradient: bool,
    pub connectivity: Connectivity,
    pub normalizer: LossNormalizer,
    pub target: LossTarget,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            tau: None,
            tau_units: TauUnits::MeanGuidance,
            heuristic_gradient: true,
            connectivity: Connectivity::Eight,
            normalizer: LossNormalizer::Cells,
            target: LossTarget::History,
        }
    }
}

impl SearchConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau: Some(tau),
            ..Self::default()
        }
    }

    pub fn tau_for(&self, width: usize) -> f64 {
        self.tau.unwrap_or((width as f64).sqrt())
    }

    /// Temperature actually applied to the scores of a search on `guidance`.
    pub fn effective_tau(&self, width: usize, guidance: &[f64]) -> f64 {
        let tau = self.tau_for(width);
        match self.tau_units {
            TauUnits::Absolute => tau,
            TauUnits::MeanGuidance => tau * guidance.iter().sum::<f64>() / guidance.len().max(1) as f64,
        }
    }
}

/// Decisions taken at one iteration. Kept so the search can be replayed
/// with the discrete choices frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Open cells (row-major indices) at selection time.
    pub open: Vec<usize>,
    pub selected: usize,
    /// Neighbours whose `g` was set by this expansion, with step lengths.
    pub updates: Vec<(usize, f64)>,
}

/// Everything a differentiable search produced.
#[derive(Debug, Clone)]
pub struct SearchTrace {
    pub graph: Graph,
    pub guidance: Var,
    /// One-hot `V*` per iteration after the first. Expanding the start is
    /// forced (it is the only open cell) and carries no gradient, so it
    /// enters the history as a constant instead.
    pub selections: Vec<Var>,
    /// `P = Σ V*`.
    pub history: Var,
    pub parents: Vec<Option<usize>>,
    pub expansions: usize,
    pub found: bool,
    pub steps: Vec<StepRecord>,
    /// Factor applied to the free-space heuristic (smallest guidance value).
    pub heuristic_scale: f64,
    /// Effective temperature (see [`TauUnits`]).
    pub tau: f64,
    pub height: usize,
    pub width: usize,
    pub start: Cell,
    pub goal: Cell,
    /// Accumulated guidance cost of the goal, when reached.
    pub goal_cost: f64,
    pub wall_time: f64,
    config: SearchConfig,
    onehots: Vec<Var>,
}

impl SearchTrace {
    /// Accumulated selection map as plain values.
    pub fn history_values(&self) -> &[f64] {
        self.graph.value(self.history).data()
    }

    /// Gradient on the guidance map after [`Graph::backward`].
    pub fn guidance_grad(&self) -> Option<&[f64]> {
        self.graph.grad(self.guidance)
    }

    pub fn config(&self) -> &SearchConfig {
        &self.config
    }
}

trait Recorder {
    fn select(&mut self, open: &[f64], selected: usize, first: bool) -> Result<(), SearchError>;
    fn relax(&mut self, updates: &[(usize, f64)]) -> Result<(), SearchError>;
}

struct NoRecord;

impl Recorder for NoRecord {
    fn select(&mut self, _: &[f64], _: usize, _: bool) -> Result<(), SearchError> {
        Ok(())
    }
    fn relax(&mut self, _: &[(usize, f64)]) -> Result<(), SearchError> {
        Ok(())
    }
}

struct GraphRecord {
    graph: Graph,
    guidance: Var,
    g: Var,
    h: Var,
    tau: f64,
    /// Divides the scores before the softmax; `None` for absolute units.
    units: Option<Var>,
    selections: Vec<Var>,
    onehots: Vec<Var>,
    last: Option<Var>,
}

impl Recorder for GraphRecord {
    fn select(&mut self, open: &[f64], selected: usize, first: bool) -> Result<(), SearchError> {
        let shape = self.graph.value(self.g).shape().to_vec();
        let v = if first {
            let mut hot = Tensor::zeros(shape);
            hot.data_mut()[selected] = 1.0;
            self.graph.constant(hot)
        } else {
            let mask = self.graph.constant(Tensor::new(shape.clone(), open.to_vec())?);
            let mut scores = self.graph.add(self.g, self.h)?;
            if let Some(u) = self.units {
                scores = self.graph.div(scores, u)?;
            }
            let soft = self.graph.masked_softmax(scores, mask, self.tau)?;
            let mut hard = Tensor::zeros(shape);
            hard.data_mut()[selected] = 1.0;
            let v = self.graph.straight_through(soft, hard)?;
            self.selections.push(v);
            v
        };
        self.onehots.push(v);
        self.last = Some(v);
        Ok(())
    }

    fn relax(&mut self, updates: &[(usize, f64)]) -> Result<(), SearchError> {
        let v = self.last.expect("relax follows a selection");
        let g_sel = self.graph.dot(self.g, v)?;
        self.g = self
            .graph
            .scatter_affine(self.g, g_sel, self.guidance, updates.to_vec())?;
        Ok(())
    }
}

struct Outcome {
    parents: Vec<Option<usize>>,
    steps: Vec<StepRecord>,
    found: bool,
    goal_cost: f64,
    heuristic_scale: f64,
    tau: f64,
}

fn heuristic_map(map: &OccupancyMap, goal: Cell, conn: Connectivity, scale: f64) -> Vec<f64> {
    (0..map.len())
        .map(|i| conn.free_space_distance(map.cell_at(i), goal) * scale)
        .collect()
}

/// Index of the largest weight; ties go to the smaller row-major index.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn run<R: Recorder>(
    problem: &PlanningProblem,
    guidance: &[f64],
    cfg: &SearchConfig,
    rec: &mut R,
) -> Result<Outcome, SearchError> {
    let map = &*problem.map;
    let n = map.len();
    let tau = cfg.effective_tau(map.width(), guidance);
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(SearchError::InvalidTemperature(tau));
    }
    let scale = guidance.iter().copied().fold(f64::INFINITY, f64::min);
    let h = heuristic_map(map, problem.goal, cfg.connectivity, scale);
    // `g` mirrors the recorded G tensor exactly: zero until first reached.
    let mut g = vec![0.0; n];
    let mut reached = vec![false; n];
    let mut closed = vec![false; n];
    let mut open = vec![0.0; n];
    let mut open_count = 0usize;
    let mut parents = vec![None; n];
    let mut steps = Vec::new();
    let start = map.index(problem.start);
    let goal = map.index(problem.goal);
    reached[start] = true;
    open[start] = 1.0;
    open_count += 1;
    let mut scores = vec![0.0; n];
    loop {
        if open_count == 0 {
            return Ok(Outcome {
                parents,
                steps,
                found: false,
                goal_cost: f64::INFINITY,
                heuristic_scale: scale,
                tau,
            });
        }
        for i in 0..n {
            scores[i] = g[i] + h[i];
        }
        let soft = masked_softmax_values(&scores, &open, tau)?;
        let sel = argmax_first(&soft);
        rec.select(&open, sel, steps.is_empty())?;
        let open_list: Vec<usize> = (0..n).filter(|&i| open[i] == 1.0).collect();
        open[sel] = 0.0;
        open_count -= 1;
        closed[sel] = true;
        if sel == goal {
            steps.push(StepRecord {
                open: open_list,
                selected: sel,
                updates: Vec::new(),
            });
            return Ok(Outcome {
                parents,
                steps,
                found: true,
                goal_cost: g[goal],
                heuristic_scale: scale,
                tau,
            });
        }
        let mut updates = Vec::new();
        for (nb, step) in cfg.connectivity.neighbors(map, map.cell_at(sel)) {
            let ni = map.index(nb);
            if closed[ni] {
                continue;
            }
            let cand = g[sel] + guidance[ni] * step;
            if !reached[ni] || cand < g[ni] {
                g[ni] = cand;
                reached[ni] = true;
                parents[ni] = Some(sel);
                if open[ni] == 0.0 {
                    open[ni] = 1.0;
                    open_count += 1;
                }
                updates.push((ni, step));
            }
        }
        rec.relax(&updates)?;
        steps.push(StepRecord {
            open: open_list,
            selected: sel,
            updates,
        });
    }
}

fn check_dims(problem: &PlanningProblem, height: usize, width: usize) -> Result<(), SearchError> {
    let map = &problem.map;
    if map.height() != height || map.width() != width {
        return Err(SearchError::DimsMismatch {
            height: map.height(),
            width: map.width(),
            got_h: height,
            got_w: width,
        });
    }
    Ok(())
}

/// One differentiable selection over the open cells.
///
/// Returns the one-hot selection and its cell index. The forward value is
/// the argmax of the soft distribution (ties to the smaller row-major
/// index); the backward pass flows through the soft distribution.
pub fn select_node(
    graph: &mut Graph,
    g: Var,
    h: Var,
    open: Var,
    tau: f64,
) -> Result<(Var, usize), SearchError> {
    let scores = graph.add(g, h)?;
    let soft = graph.masked_softmax(scores, open, tau)?;
    let probs = graph.value(soft);
    let sel = argmax_first(probs.data());
    let mut hard = Tensor::zeros(probs.shape().to_vec());
    hard.data_mut()[sel] = 1.0;
    let v = graph.straight_through(soft, hard)?;
    Ok((v, sel))
}

/// Differentiable search with a fixed guidance map at temperature `tau`.
pub fn search(problem: &PlanningProblem, guidance: &GuidanceMap, tau: f64) -> Result<SearchTrace, SearchError> {
    search_with(problem, guidance, &SearchConfig::with_tau(tau))
}

pub fn search_with(
    problem: &PlanningProblem,
    guidance: &GuidanceMap,
    cfg: &SearchConfig,
) -> Result<SearchTrace, SearchError> {
    let mut graph = Graph::new();
    let var = graph.leaf(guidance.tensor().clone());
    search_in(graph, var, problem, cfg)
}

/// Runs the search on an existing graph whose `guidance` variable is the
/// `H × W` guidance map (for example the output of the encoder).
pub fn search_in(
    mut graph: Graph,
    guidance: Var,
    problem: &PlanningProblem,
    cfg: &SearchConfig,
) -> Result<SearchTrace, SearchError> {
    let started = Instant::now();
    let shape = graph.value(guidance).shape().to_vec();
    let (height, width) = match shape.as_slice() {
        [h, w] => (*h, *w),
        _ => (0, 0),
    };
    check_dims(problem, height, width)?;
    let values = graph.value(guidance).data().to_vec();
    if let Some(&bad) = values.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(SearchError::NonPositiveGuidance(bad));
    }
    // H = octile × min(guidance); the min is gathered so its cell receives
    // the heuristic's gradient.
    let n = values.len();
    let amin = (0..n).fold(0, |b, i| if values[i] < values[b] { i } else { b });
    let h = if cfg.heuristic_gradient {
        let dist = heuristic_map(&problem.map, problem.goal, cfg.connectivity, 1.0);
        let dist = graph.constant(Tensor::new(shape.clone(), dist)?);
        let scale = graph.gather(guidance, vec![amin; n], shape.clone())?;
        graph.mul(scale, dist)?
    } else {
        let h = heuristic_map(&problem.map, problem.goal, cfg.connectivity, values[amin]);
        graph.constant(Tensor::new(shape.clone(), h)?)
    };
    let g = graph.constant(Tensor::zeros(shape));
    let units = match cfg.tau_units {
        TauUnits::Absolute => None,
        TauUnits::MeanGuidance => {
            let total = graph.sum(guidance);
            Some(graph.scale(total, 1.0 / n as f64))
        }
    };
    let mut rec = GraphRecord {
        graph,
        guidance,
        g,
        h,
        tau: cfg.tau_for(width),
        units,
        selections: Vec::new(),
        onehots: Vec::new(),
        last: None,
    };
    let out = run(problem, &values, cfg, &mut rec)?;
    let mut graph = rec.graph;
    let history = graph.add_n(&rec.onehots)?;
    Ok(SearchTrace {
        graph,
        guidance,
        history,
        expansions: out.steps.len(),
        onehots: rec.onehots,
        selections: rec.selections,
        parents: out.parents,
        found: out.found,
        steps: out.steps,
        heuristic_scale: out.heuristic_scale,
        tau: out.tau,
        height,
        width,
        start: problem.start,
        goal: problem.goal,
        goal_cost: out.goal_cost,
        wall_time: started.elapsed().as_secs_f64(),
        config: *cfg,
    })
}

/// Forward-only search: the same decisions as [`search_with`] without
/// recording a graph. Used for evaluation and benchmarking.
pub fn plan(problem: &PlanningProblem, guidance: &GuidanceMap, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    let started = Instant::now();
    check_dims(problem, guidance.height(), guidance.width())?;
    let out = run(problem, guidance.costs(), cfg, &mut NoRecord)?;
    let map = &*problem.map;
    let expanded: Vec<Cell> = out.steps.iter().map(|s| map.cell_at(s.selected)).collect();
    let wall_time = started.elapsed().as_secs_f64();
    if !out.found {
        let mut r = SearchResult::not_found(expanded.len(), wall_time);
        r.expanded = expanded;
        return Ok(r);
    }
    let parents: Vec<usize> = out.parents.iter().map(|p| p.unwrap_or(usize::MAX)).collect();
    Ok(SearchResult {
        path: walk_parents(map, &parents, map.index(problem.goal)),
        cost: out.goal_cost,
        expansions: expanded.len(),
        wall_time,
        found: true,
        expanded,
    })
}

/// `‖P − P̄‖₁ / 𝒱`, recorded on the trace's graph.
pub fn loss(trace: &mut SearchTrace, truth: &PathMap) -> Result<Var, SearchError> {
    if truth.height() != trace.height || truth.width() != trace.width {
        return Err(SearchError::DimsMismatch {
            height: trace.height,
            width: trace.width,
            got_h: truth.height(),
            got_w: truth.width(),
        });
    }
    let p = match trace.config.target {
        LossTarget::History => trace.history,
        LossTarget::Path => {
            let on_path = path_cells(trace);
            let picked: Vec<Var> = trace
                .steps
                .iter()
                .zip(&trace.onehots)
                .filter(|(s, _)| on_path.contains(&s.selected))
                .map(|(_, &v)| v)
                .collect();
            if picked.is_empty() {
                let zeros = Tensor::zeros(vec![trace.height, trace.width]);
                trace.graph.constant(zeros)
            } else {
                trace.graph.add_n(&picked)?
            }
        }
    };
    let normalizer = match trace.config.normalizer {
        LossNormalizer::Cells => (trace.height * trace.width) as f64,
        LossNormalizer::Steps => trace.expansions.max(1) as f64,
    };
    let shape = vec![trace.height, trace.width];
    // P ∈ [0, 1] and P̄ ∈ {0, 1}, so |P − P̄| = P·(1 − 2P̄) + P̄
    let truth = truth.as_f64();
    let weight = trace
        .graph
        .constant(Tensor::new(shape, truth.iter().map(|t| 1.0 - 2.0 * t).collect())?);
    let marked: f64 = truth.iter().sum();
    let linear = trace.graph.dot(p, weight)?;
    let total = trace.graph.shift(linear, marked);
    Ok(trace.graph.scale(total, 1.0 / normalizer))
}

fn path_cells(trace: &SearchTrace) -> Vec<usize> {
    if !trace.found {
        return Vec::new();
    }
    let goal = trace.goal.row * trace.width + trace.goal.col;
    let mut cells = vec![goal];
    let mut cur = goal;
    while let Some(p) = trace.parents[cur] {
        cells.push(p);
        cur = p;
    }
    cells
}

/// Follows parent links from the goal back to the start.
pub fn backtrack(trace: &SearchTrace, problem: &PlanningProblem) -> Result<SearchResult, SearchError> {
    if !trace.found {
        return Err(SearchError::GoalNotReached);
    }
    let map = &*problem.map;
    let mut idx: Vec<usize> = path_cells(trace);
    idx.reverse();
    Ok(SearchResult {
        path: idx.into_iter().map(|i| map.cell_at(i)).collect(),
        cost: trace.goal_cost,
        expansions: trace.expansions,
        wall_time: trace.wall_time,
        found: true,
        expanded: trace.steps.iter().map(|s| map.cell_at(s.selected)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::astar::{astar, dijkstra, Heuristic};
    use crate::gridmap::{random_map, sample_problem};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn problem(rows: &[&str], start: (usize, usize), goal: (usize, usize)) -> PlanningProblem {
        let map = Arc::new(OccupancyMap::from_ascii(rows).unwrap());
        PlanningProblem::new(map, Cell::new(start.0, start.1), Cell::new(goal.0, goal.1)).unwrap()
    }

    #[test]
    fn select_node_picks_minimum_score() {
        let mut g = Graph::new();
        let gv = g.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let h = g.constant(Tensor::zeros(vec![2, 2]));
        let o = g.constant(Tensor::full(vec![2, 2], 1.0));
        let (v, sel) = select_node(&mut g, gv, h, o, 1.0).unwrap();
        assert_eq!(sel, 0);
        assert_eq!(g.value(v).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn select_node_ties_go_to_smaller_index() {
        let mut g = Graph::new();
        let gv = g.leaf(Tensor::from_rows(&[&[5.0, 2.0], &[2.0, 4.0]]).unwrap());
        let h = g.constant(Tensor::zeros(vec![2, 2]));
        let o = g.constant(Tensor::full(vec![2, 2], 1.0));
        let (_, sel) = select_node(&mut g, gv, h, o, 1.0).unwrap();
        assert_eq!(sel, 1);
    }

    #[test]
    fn select_node_with_empty_open_list_fails() {
        let mut g = Graph::new();
        let gv = g.leaf(Tensor::zeros(vec![2, 2]));
        let h = g.constant(Tensor::zeros(vec![2, 2]));
        let o = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            select_node(&mut g, gv, h, o, 1.0),
            Err(SearchError::Num(NumError::EmptyOpenList))
        ));
    }

    #[test]
    fn select_node_gradient_follows_soft_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let g0: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..3.0)).collect();
            let h0: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..3.0)).collect();
            let open: Vec<f64> = (0..9).map(|i| if i % 4 == 3 { 0.0 } else { 1.0 }).collect();
            let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tau = 0.8;

            let mut graph = Graph::new();
            let gv = graph.leaf(Tensor::new(vec![3, 3], g0.clone()).unwrap());
            let hv = graph.constant(Tensor::new(vec![3, 3], h0.clone()).unwrap());
            let ov = graph.constant(Tensor::new(vec![3, 3], open.clone()).unwrap());
            let (v, _) = select_node(&mut graph, gv, hv, ov, tau).unwrap();
            let wv = graph.constant(Tensor::new(vec![3, 3], w.clone()).unwrap());
            let r = graph.dot(v, wv).unwrap();
            graph.backward(r).unwrap();
            let analytic = graph.grad(gv).unwrap().to_vec();

            // readout of the soft distribution, written out longhand
            let soft_readout = |gs: &[f64]| -> f64 {
                let s: Vec<f64> = gs.iter().zip(&h0).map(|(a, b)| a + b).collect();
                let e: Vec<f64> = s.iter().zip(&open).map(|(x, m)| m * (-x / tau).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().zip(&w).map(|(a, b)| a / z * b).sum()
            };
            for i in 0..9 {
                let mut p = g0.clone();
                p[i] += 1e-5;
                let mut m = g0.clone();
                m[i] -= 1e-5;
                let numeric = (soft_readout(&p) - soft_readout(&m)) / 2e-5;
                let tol = 1e-4 * analytic[i].abs().max(numeric.abs()) + 1e-9;
                assert!((analytic[i] - numeric).abs() <= tol, "{i}: {} vs {numeric}", analytic[i]);
            }
        }
    }

    #[test]
    fn uniform_guidance_matches_classic_cost_on_empty_map() {
        let map = Arc::new(OccupancyMap::free(9, 9));
        let p = PlanningProblem::new(map, Cell::new(1, 0), Cell::new(7, 8)).unwrap();
        let trace = search(&p, &GuidanceMap::uniform(9, 9, 1.0), 3.0).unwrap();
        let r = backtrack(&trace, &p).unwrap();
        let classic = astar(&p, Connectivity::Eight, Heuristic::Octile);
        assert!((r.cost - classic.cost).abs() < 1e-12);
        assert_eq!(r.path.len(), classic.path.len());
    }

    #[test]
    fn two_cell_map_selects_only_the_goal() {
        let p = problem(&[".."], (0, 0), (0, 1));
        let trace = search(&p, &GuidanceMap::uniform(1, 2, 0.5), 1.0).unwrap();
        assert!(trace.found);
        assert_eq!(trace.selections.len(), 1);
        assert_eq!(trace.graph.value(trace.selections[0]).data(), &[0.0, 1.0]);
        assert_eq!(trace.history_values(), &[1.0, 1.0]);
        assert_eq!(trace.expansions, 2);
    }

    #[test]
    fn high_cost_band_is_avoided() {
        // band across rows 3..5 except a gap at the right edge
        let h = 8;
        let w = 8;
        let map = Arc::new(OccupancyMap::free(h, w));
        let mut costs = vec![0.1; h * w];
        for r in 3..5 {
            for c in 0..w - 1 {
                costs[r * w + c] = 1.0;
            }
        }
        let p = PlanningProblem::new(map.clone(), Cell::new(0, 0), Cell::new(7, 0)).unwrap();
        let gm = GuidanceMap::new(h, w, costs.clone()).unwrap();
        let trace = search(&p, &gm, 2.0).unwrap();
        let r = backtrack(&trace, &p).unwrap();
        assert!(r.path.iter().all(|c| !(3..5).contains(&c.row) || c.col == w - 1));

        // the guidance-weighted shortest path, by Bellman-Ford over all cells
        let mut d = vec![f64::INFINITY; h * w];
        d[0] = 0.0;
        for _ in 0..h * w {
            for i in 0..h * w {
                for (nb, step) in Connectivity::Eight.neighbors(&map, map.cell_at(i)) {
                    let j = map.index(nb);
                    d[j] = d[j].min(d[i] + costs[j] * step);
                }
            }
        }
        assert!((r.cost - d[7 * w]).abs() < 1e-12);
    }

    #[test]
    fn backtrack_straight_corridor() {
        let p = problem(&["#####", ".....", "#####"], (1, 0), (1, 4));
        let gm = GuidanceMap::new(3, 5, (0..15).map(|i| 0.2 + i as f64 * 0.01).collect()).unwrap();
        let trace = search(&p, &gm, 1.0).unwrap();
        let r = backtrack(&trace, &p).unwrap();
        let expected: Vec<Cell> = (0..5).map(|c| Cell::new(1, c)).collect();
        assert_eq!(r.path, expected);
        assert_eq!(r.path.first(), Some(&p.start));
        assert_eq!(r.path.last(), Some(&p.goal));
        let sum: f64 = r.path[1..].iter().map(|&c| gm.at(c)).sum();
        assert!((r.cost - sum).abs() < 1e-12);
    }

    #[test]
    fn backtrack_without_goal_is_an_error() {
        let p = problem(&[".#."], (0, 0), (0, 2));
        let trace = search(&p, &GuidanceMap::uniform(1, 3, 1.0), 1.0).unwrap();
        assert!(!trace.found);
        assert!(matches!(backtrack(&trace, &p), Err(SearchError::GoalNotReached)));
        let r = plan(&p, &GuidanceMap::uniform(1, 3, 1.0), &SearchConfig::default()).unwrap();
        assert!(!r.found);
    }

    #[test]
    fn loss_examples() {
        // P == P̄
        let p = problem(&["....", "....", "....", "...."], (0, 0), (0, 3));
        let gm = GuidanceMap::uniform(4, 4, 1.0);
        let mut trace = search(&p, &gm, 2.0).unwrap();
        let hist: Vec<u8> = trace.history_values().iter().map(|&v| v as u8).collect();
        let expanded: Vec<Cell> = (0..16).filter(|&i| hist[i] == 1).map(|i| Cell::new(i / 4, i % 4)).collect();
        assert_eq!(expanded, (0..4).map(|c| Cell::new(0, c)).collect::<Vec<_>>());
        let truth = PathMap::from_path(4, 4, &expanded).unwrap();
        let l = loss(&mut trace, &truth).unwrap();
        assert_eq!(trace.graph.value(l).item(), 0.0);

        // one extra cell and one missing cell
        let other: Vec<Cell> = vec![Cell::new(0, 0), Cell::new(0, 1), Cell::new(0, 2), Cell::new(1, 3)];
        let truth = PathMap::from_path(4, 4, &other).unwrap();
        let mut trace = search(&p, &gm, 2.0).unwrap();
        let l = loss(&mut trace, &truth).unwrap();
        assert!((trace.graph.value(l).item() - 2.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn loss_of_empty_history_counts_truth_cells() {
        // a history P of all zeros gives k / (H·W)
        let p = problem(&["...", "..."], (0, 0), (0, 2));
        let mut trace = search(&p, &GuidanceMap::uniform(2, 3, 1.0), 1.0).unwrap();
        let truth = PathMap::from_path(2, 3, &[Cell::new(0, 0), Cell::new(0, 1), Cell::new(0, 2)]).unwrap();
        let zero = trace.graph.constant(Tensor::zeros(vec![2, 3]));
        trace.history = zero;
        let l = loss(&mut trace, &truth).unwrap();
        assert!((trace.graph.value(l).item() - 3.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn loss_dims_must_agree() {
        let p = problem(&["..."], (0, 0), (0, 2));
        let mut trace = search(&p, &GuidanceMap::uniform(1, 3, 1.0), 1.0).unwrap();
        let truth = PathMap::from_path(2, 3, &[Cell::new(0, 0)]).unwrap();
        assert!(matches!(loss(&mut trace, &truth), Err(SearchError::DimsMismatch { .. })));
    }

    #[test]
    fn guidance_must_be_positive_and_sized() {
        assert!(GuidanceMap::new(1, 2, vec![1.0, 0.0]).is_err());
        let p = problem(&["..."], (0, 0), (0, 2));
        assert!(matches!(
            search(&p, &GuidanceMap::uniform(1, 2, 1.0), 1.0),
            Err(SearchError::DimsMismatch { .. })
        ));
        assert!(matches!(
            search(&p, &GuidanceMap::uniform(1, 3, 1.0), 0.0),
            Err(SearchError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn selections_are_one_hot_and_never_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let map = Arc::new(random_map(12, 12, 0.25, &mut rng));
            let Ok(p) = sample_problem(&map, 0.4, &mut rng) else { continue };
            let costs: Vec<f64> = (0..144).map(|_| rng.random_range(0.05..1.0)).collect();
            let gm = GuidanceMap::new(12, 12, costs).unwrap();
            let trace = search(&p, &gm, 3.0).unwrap();
            let mut seen = std::collections::HashSet::new();
            assert_eq!(trace.selections.len() + 1, trace.steps.len());
            for (v, step) in trace.selections.iter().zip(&trace.steps[1..]) {
                let d = trace.graph.value(*v).data();
                assert_eq!(d.iter().filter(|&&x| x == 1.0).count(), 1);
                assert_eq!(d.iter().filter(|&&x| x == 0.0).count(), 143);
                assert!(step.open.contains(&step.selected));
                assert!(seen.insert(step.selected));
            }
            assert!(trace.history_values().iter().all(|&x| x == 0.0 || x == 1.0));
            // the forward-only planner takes identical decisions
            let r = plan(&p, &gm, &SearchConfig::with_tau(3.0)).unwrap();
            assert_eq!(r.expansions, trace.expansions);
            if trace.found {
                assert_eq!(r.path, backtrack(&trace, &p).unwrap().path);
            }
        }
    }

    #[test]
    fn uniform_guidance_matches_classic_step_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        while checked < 100 {
            let map = Arc::new(random_map(16, 16, rng.random_range(0.1..0.3), &mut rng));
            let Ok(p) = sample_problem(&map, 0.5, &mut rng) else { continue };
            let r = plan(&p, &GuidanceMap::uniform(16, 16, 1.0), &SearchConfig::default()).unwrap();
            let c = astar(&p, Connectivity::Eight, Heuristic::Octile);
            assert!(r.found && c.found);
            assert_eq!(r.path.len(), c.path.len());
            assert!((r.cost - dijkstra(&p, Connectivity::Eight).cost).abs() < 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn gradient_is_nonzero_when_history_differs_from_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 10 {
            let map = Arc::new(random_map(10, 10, 0.2, &mut rng));
            let Ok(p) = sample_problem(&map, 0.5, &mut rng) else { continue };
            let truth = dijkstra(&p, Connectivity::Eight);
            let truth = PathMap::from_path(10, 10, &truth.path).unwrap();
            let costs: Vec<f64> = (0..100).map(|_| rng.random_range(0.2..1.0)).collect();
            let mut trace = search(&p, &GuidanceMap::new(10, 10, costs).unwrap(), 2.0).unwrap();
            let hist: Vec<f64> = trace.history_values().to_vec();
            if hist == truth.as_f64() {
                continue;
            }
            let l = loss(&mut trace, &truth).unwrap();
            trace.graph.backward(l).unwrap();
            let grad = trace.guidance_grad().unwrap();
            assert!(grad.iter().all(|v| v.is_finite()));
            assert!(grad.iter().any(|&v| v != 0.0));
            checked += 1;
        }
    }

    #[test]
    fn cheaper_true_path_lowers_the_loss() {
        let map = Arc::new(
            OccupancyMap::from_ascii(&[
                "........", "........", "..####..", "....#...", "....#...", "..###...", "........", "........",
            ])
            .unwrap(),
        );
        let p = PlanningProblem::new(map, Cell::new(3, 2), Cell::new(4, 6)).unwrap();
        let truth_path = dijkstra(&p, Connectivity::Eight).path;
        let truth = PathMap::from_path(8, 8, &truth_path).unwrap();
        let loss_for = |costs: Vec<f64>| {
            let mut t = search(&p, &GuidanceMap::new(8, 8, costs).unwrap(), 8f64.sqrt()).unwrap();
            let l = loss(&mut t, &truth).unwrap();
            t.graph.value(l).item()
        };
        let base = vec![1.0; 64];
        let mut lowered = base.clone();
        for c in &truth_path {
            lowered[c.row * 8 + c.col] = 0.3;
        }
        let before = loss_for(base);
        let after = loss_for(lowered);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn path_target_and_step_normalizer() {
        let p = problem(&["....", "....", "...."], (1, 0), (1, 3));
        let gm = GuidanceMap::uniform(3, 4, 1.0);
        let cfg = SearchConfig {
            tau: Some(1.0),
            target: LossTarget::Path,
            normalizer: LossNormalizer::Steps,
            ..SearchConfig::default()
        };
        let mut trace = search_with(&p, &gm, &cfg).unwrap();
        let path = backtrack(&trace, &p).unwrap().path;
        let truth = PathMap::from_path(3, 4, &path).unwrap();
        let l = loss(&mut trace, &truth).unwrap();
        assert_eq!(trace.graph.value(l).item(), 0.0);
    }

    fn grad_for(p: &PlanningProblem, costs: Vec<f64>, cfg: &SearchConfig) -> (f64, Vec<f64>, usize) {
        let truth = PathMap::from_path(p.map.height(), p.map.width(), &dijkstra(p, Connectivity::Eight).path).unwrap();
        let gm = GuidanceMap::new(p.map.height(), p.map.width(), costs).unwrap();
        let mut trace = search_with(p, &gm, cfg).unwrap();
        let l = loss(&mut trace, &truth).unwrap();
        trace.graph.backward(l).unwrap();
        let value = trace.graph.value(l).item();
        (value, trace.guidance_grad().unwrap().to_vec(), trace.expansions)
    }

    #[test]
    fn mean_guidance_units_make_the_loss_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = Arc::new(random_map(10, 10, 0.2, &mut rng));
        let p = sample_problem(&map, 0.5, &mut rng).unwrap();
        let costs: Vec<f64> = (0..100).map(|_| rng.random_range(0.2..1.0)).collect();
        let cfg = SearchConfig::default();
        assert_eq!(cfg.tau_units, TauUnits::MeanGuidance);
        let (l1, g1, e1) = grad_for(&p, costs.clone(), &cfg);
        let c = 3.5;
        let (l2, g2, e2) = grad_for(&p, costs.iter().map(|x| x * c).collect(), &cfg);
        assert_eq!(e1, e2);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b * c).abs() <= 1e-9 * a.abs().max(1e-6), "{a} vs {}", b * c);
        }
        // Euler: a scale-invariant loss has no gradient along the guidance itself
        let radial: f64 = g1.iter().zip(&costs).map(|(g, x)| g * x).sum();
        assert!(radial.abs() < 1e-10, "{radial}");
    }

    #[test]
    fn effective_tau_follows_units() {
        let g = [0.5, 1.5, 1.0, 1.0];
        let abs = SearchConfig {
            tau: Some(2.0),
            tau_units: TauUnits::Absolute,
            ..SearchConfig::default()
        };
        assert_eq!(abs.effective_tau(4, &g), 2.0);
        let mean = SearchConfig {
            tau_units: TauUnits::MeanGuidance,
            ..abs
        };
        assert_eq!(mean.effective_tau(4, &g), 2.0);
        assert_eq!(mean.effective_tau(4, &[2.0; 4]), 4.0);
        assert_eq!(SearchConfig::default().effective_tau(16, &[1.0; 4]), 4.0);
    }

    #[test]
    fn heuristic_gradient_reaches_only_the_minimum_cell() {
        let p = problem(&["......", "......", "......"], (1, 0), (1, 5));
        let mut costs = vec![1.0; 18];
        costs[0] = 0.4;
        let on = SearchConfig {
            tau_units: TauUnits::Absolute,
            tau: Some(2.0),
            ..SearchConfig::default()
        };
        let off = SearchConfig {
            heuristic_gradient: false,
            ..on
        };
        let (l_on, g_on, _) = grad_for(&p, costs.clone(), &on);
        let (l_off, g_off, _) = grad_for(&p, costs, &off);
        assert_eq!(l_on, l_off);
        for i in 1..18 {
            assert!((g_on[i] - g_off[i]).abs() < 1e-12);
        }
        assert!(g_on[0] != g_off[0]);
    }
}
