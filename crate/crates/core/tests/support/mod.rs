//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::SQRT_2;

use vitastar::diff_astar::{SearchConfig, StepRecord, TauUnits};
use vitastar::gridmap::{Cell, OccupancyMap};

/// `(cardinal steps, diagonal steps)` of a grid path.
pub fn step_counts(path: &[Cell]) -> (usize, usize) {
    path.windows(2).fold((0, 0), |(a, b), w| {
        if w[0].row != w[1].row && w[0].col != w[1].col {
            (a, b + 1)
        } else {
            (a + 1, b)
        }
    })
}

/// Quadratic-time Dijkstra over 8-connected free cells, no corner cutting.
/// Returns the cost to `goal` as `(cardinal, diagonal)` counts of one
/// optimal path, or `None` when unreachable.
pub fn dijkstra_counts(map: &OccupancyMap, start: Cell, goal: Cell) -> Option<(usize, usize)> {
    let (h, w) = (map.height(), map.width());
    let n = h * w;
    let idx = |r: usize, c: usize| r * w + c;
    let mut dist = vec![f64::INFINITY; n];
    let mut counts = vec![(0usize, 0usize); n];
    let mut done = vec![false; n];
    dist[idx(start.row, start.col)] = 0.0;
    loop {
        let mut u = None;
        for i in 0..n {
            if !done[i] && dist[i].is_finite() && u.is_none_or(|j: usize| dist[i] < dist[j]) {
                u = Some(i);
            }
        }
        let u = u?;
        if u == idx(goal.row, goal.col) {
            return Some(counts[u]);
        }
        done[u] = true;
        let (r, c) = ((u / w) as i64, (u % w) as i64);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let free = |rr: i64, cc: i64| !map.is_blocked(Cell::new(rr as usize, cc as usize));
                if !free(nr, nc) {
                    continue;
                }
                let diagonal = dr != 0 && dc != 0;
                if diagonal && !(free(r + dr, c) && free(r, c + dc)) {
                    continue;
                }
                let v = idx(nr as usize, nc as usize);
                let step = if diagonal { SQRT_2 } else { 1.0 };
                let cand = dist[u] + step;
                if cand < dist[v] - 1e-12 {
                    dist[v] = cand;
                    counts[v] = if diagonal {
                        (counts[u].0, counts[u].1 + 1)
                    } else {
                        (counts[u].0 + 1, counts[u].1)
                    };
                }
            }
        }
    }
}

pub fn octile(a: Cell, b: Cell) -> f64 {
    let dr = (a.row as f64 - b.row as f64).abs();
    let dc = (a.col as f64 - b.col as f64).abs();
    dr.max(dc) + (SQRT_2 - 1.0) * dr.min(dc)
}

fn softmax_over(scores: &[f64], open: &[usize], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    let m = open.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for &i in open {
        let e = (-(scores[i] - m) / tau).exp();
        out[i] = e;
        z += e;
    }
    for &i in open {
        out[i] /= z;
    }
    out
}

/// Frozen-decision replay of the straight-through search.
///
/// Every selection after the first is `hard + soft(g) − soft(g₀)`: equal to
/// the recorded one-hot at `g = g₀` with the soft distribution's derivative.
/// The `g` entries are accumulated through the recorded relaxations, and the
/// heuristic scale is the guidance value at the recorded minimum cell.
pub struct Replay<'a> {
    pub map: &'a OccupancyMap,
    pub goal: Cell,
    pub steps: &'a [StepRecord],
    pub base: Vec<f64>,
    pub truth: Vec<f64>,
    pub config: SearchConfig,
}

impl Replay<'_> {
    fn tau(&self, g: &[f64]) -> f64 {
        let tau = self.config.tau_for(self.map.width());
        match self.config.tau_units {
            TauUnits::Absolute => tau,
            TauUnits::MeanGuidance => tau * g.iter().sum::<f64>() / g.len() as f64,
        }
    }

    fn softs(&self, guidance: &[f64], gs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = guidance.len();
        let amin = (0..n).fold(0, |b, i| if self.base[i] < self.base[b] { i } else { b });
        let tau = self.tau(guidance);
        let min = if self.config.heuristic_gradient { guidance[amin] } else { self.base[amin] };
        let h: Vec<f64> = (0..n).map(|i| octile(self.map.cell_at(i), self.goal) * min).collect();
        self.steps
            .iter()
            .zip(gs)
            .map(|(s, g)| {
                let scores: Vec<f64> = (0..n).map(|i| g[i] + h[i]).collect();
                softmax_over(&scores, &s.open, tau)
            })
            .collect()
    }

    /// Selection weights per step and the G vector before each step.
    fn forward(&self, guidance: &[f64], base_soft: Option<&[Vec<f64>]>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = guidance.len();
        let mut g = vec![0.0; n];
        let mut gs = Vec::new();
        let mut ys = Vec::new();
        let amin = (0..n).fold(0, |b, i| if self.base[i] < self.base[b] { i } else { b });
        let tau = self.tau(guidance);
        let min = if self.config.heuristic_gradient { guidance[amin] } else { self.base[amin] };
        let h: Vec<f64> = (0..n).map(|i| octile(self.map.cell_at(i), self.goal) * min).collect();
        for (k, s) in self.steps.iter().enumerate() {
            gs.push(g.clone());
            let mut y = vec![0.0; n];
            y[s.selected] = 1.0;
            if k > 0 {
                let scores: Vec<f64> = (0..n).map(|i| g[i] + h[i]).collect();
                let soft = softmax_over(&scores, &s.open, tau);
                let s0 = base_soft.map(|b| b[k].clone()).unwrap_or_else(|| soft.clone());
                for i in 0..n {
                    y[i] += soft[i] - s0[i];
                }
            }
            let gsel: f64 = (0..n).map(|i| g[i] * y[i]).sum();
            for &(ni, step) in &s.updates {
                g[ni] = gsel + guidance[ni] * step;
            }
            ys.push(y);
        }
        (ys, gs)
    }

    /// Soft distributions at the base guidance.
    pub fn base_soft(&self) -> Vec<Vec<f64>> {
        let (_, gs) = self.forward(&self.base, None);
        self.softs(&self.base, &gs)
    }

    /// Surrogate loss `Σ|P − P̄| / (H·W)` in its linear form.
    pub fn loss(&self, guidance: &[f64], base_soft: &[Vec<f64>]) -> f64 {
        let n = guidance.len();
        let (ys, _) = self.forward(guidance, Some(base_soft));
        let mut p = vec![0.0; n];
        for y in &ys {
            for i in 0..n {
                p[i] += y[i];
            }
        }
        let total: f64 = (0..n).map(|i| p[i] * (1.0 - 2.0 * self.truth[i]) + self.truth[i]).sum();
        total / n as f64
    }

    /// Central differences of [`Replay::loss`] around the base guidance.
    pub fn fd_gradient(&self, step: f64) -> Vec<f64> {
        let soft = self.base_soft();
        (0..self.base.len())
            .map(|i| {
                let mut up = self.base.clone();
                let mut down = self.base.clone();
                up[i] += step;
                down[i] -= step;
                (self.loss(&up, &soft) - self.loss(&down, &soft)) / (2.0 * step)
            })
            .collect()
    }
}

/// `|a − b| ≤ rtol·max(|a|, |b|) + atol`.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + atol
}

/// Heading of the segment `a → b` with `x = col`, `y = −row`.
pub fn atan2_heading(a: Cell, b: Cell) -> f64 {
    let dx = b.col as f64 - a.col as f64;
    let dy = a.row as f64 - b.row as f64;
    dy.atan2(dx)
}
