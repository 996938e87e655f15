//! Classic grid A*, a uniform-cost (Dijkstra) oracle and the search-effort
//! record shared by every planner.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::{Cell, MapError, OccupancyMap, PathMap, PlanningProblem};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no path was found, nothing to reconstruct")]
    NotFound,
    #[error("path cell ({}, {}) lies outside a {height}x{width} map", .cell.row, .cell.col)]
    DimsMismatch { cell: Cell, height: usize, width: usize },
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Grid adjacency. Cardinal steps cost 1, diagonal steps √2. A diagonal
/// step is only allowed when both cardinal cells it squeezes past are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

const CARDINAL: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const DIAGONAL: [(isize, isize); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];

impl Connectivity {
    /// Free neighbours of `c` with their step costs.
    pub fn neighbors<'a>(self, map: &'a OccupancyMap, c: Cell) -> impl Iterator<Item = (Cell, f64)> + 'a {
        let diagonals: &[(isize, isize)] = match self {
            Connectivity::Four => &[],
            Connectivity::Eight => &DIAGONAL,
        };
        let offset = move |dr: isize, dc: isize| -> Option<Cell> {
            let r = c.row.checked_add_signed(dr)?;
            let col = c.col.checked_add_signed(dc)?;
            let n = Cell::new(r, col);
            map.is_free(n).then_some(n)
        };
        let straight = CARDINAL
            .iter()
            .filter_map(move |&(dr, dc)| offset(dr, dc).map(|n| (n, 1.0)));
        let diag = diagonals.iter().filter_map(move |&(dr, dc)| {
            // no corner cutting
            offset(dr, 0)?;
            offset(0, dc)?;
            offset(dr, dc).map(|n| (n, std::f64::consts::SQRT_2))
        });
        straight.chain(diag)
    }

    /// Distance between two cells on an empty grid under this adjacency.
    pub fn free_space_distance(self, a: Cell, b: Cell) -> f64 {
        match self {
            Connectivity::Four => Heuristic::Manhattan.estimate(a, b),
            Connectivity::Eight => Heuristic::Octile.estimate(a, b),
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connectivity::Four => "4",
            Connectivity::Eight => "8",
        })
    }
}

impl FromStr for Connectivity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "4" | "four" => Ok(Connectivity::Four),
            "8" | "eight" => Ok(Connectivity::Eight),
            _ => Err(format!("unknown connectivity {s:?}, expected 4 or 8")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    /// `max(dx,dy) + (√2−1)·min(dx,dy)`
    Octile,
    Manhattan,
    Euclidean,
    /// Always zero; turns A* into uniform-cost search.
    Zero,
}

impl Heuristic {
    pub fn default_for(conn: Connectivity) -> Self {
        match conn {
            Connectivity::Four => Heuristic::Manhattan,
            Connectivity::Eight => Heuristic::Octile,
        }
    }

    pub fn estimate(self, a: Cell, b: Cell) -> f64 {
        let dr = a.row.abs_diff(b.row) as f64;
        let dc = a.col.abs_diff(b.col) as f64;
        match self {
            Heuristic::Octile => dr.max(dc) + (std::f64::consts::SQRT_2 - 1.0) * dr.min(dc),
            Heuristic::Manhattan => dr + dc,
            Heuristic::Euclidean => (dr * dr + dc * dc).sqrt(),
            Heuristic::Zero => 0.0,
        }
    }
}

/// Outcome of one planning call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub path: Vec<Cell>,
    pub cost: f64,
    /// Number of nodes selected from the open list, goal included.
    pub expansions: usize,
    /// Seconds spent inside the search call.
    pub wall_time: f64,
    pub found: bool,
    /// Cells in the order they were selected (the search area).
    #[serde(skip)]
    pub expanded: Vec<Cell>,
}

impl SearchResult {
    pub fn not_found(expansions: usize, wall_time: f64) -> Self {
        Self {
            path: Vec::new(),
            cost: f64::INFINITY,
            expansions,
            wall_time,
            found: false,
            expanded: Vec::new(),
        }
    }

    /// Geometric length of the path (1 per cardinal step, √2 per diagonal).
    pub fn path_length(&self) -> f64 {
        self.path
            .windows(2)
            .map(|w| if w[0].row != w[1].row && w[0].col != w[1].col { std::f64::consts::SQRT_2 } else { 1.0 })
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct OpenEntry {
    f: f64,
    g: f64,
    index: usize,
}

impl PartialEq for OpenEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for OpenEntry {}

impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OpenEntry {
    // BinaryHeap is a max-heap: the "greatest" entry is the one with the
    // smallest f, then the smallest g, then the smallest row-major index.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.g.total_cmp(&self.g))
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// A* over the occupancy grid. Unreachable goals give `found == false`.
pub fn astar(problem: &PlanningProblem, conn: Connectivity, heuristic: Heuristic) -> SearchResult {
    let started = Instant::now();
    let map = &*problem.map;
    let goal = problem.goal;
    let n = map.len();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let s = map.index(problem.start);
    g[s] = 0.0;
    open.push(OpenEntry {
        f: heuristic.estimate(problem.start, goal),
        g: 0.0,
        index: s,
    });
    let mut expanded = Vec::new();
    while let Some(OpenEntry { g: g_cur, index, .. }) = open.pop() {
        if closed[index] || g_cur > g[index] {
            continue;
        }
        closed[index] = true;
        let cell = map.cell_at(index);
        expanded.push(cell);
        if cell == goal {
            let path = walk_parents(map, &parent, index);
            return SearchResult {
                path,
                cost: g[index],
                expansions: expanded.len(),
                wall_time: started.elapsed().as_secs_f64(),
                found: true,
                expanded,
            };
        }
        for (nb, step) in conn.neighbors(map, cell) {
            let ni = map.index(nb);
            if closed[ni] {
                continue;
            }
            let cand = g_cur + step;
            if cand < g[ni] {
                g[ni] = cand;
                parent[ni] = index;
                open.push(OpenEntry {
                    f: cand + heuristic.estimate(nb, goal),
                    g: cand,
                    index: ni,
                });
            }
        }
    }
    let mut result = SearchResult::not_found(expanded.len(), started.elapsed().as_secs_f64());
    result.expanded = expanded;
    result
}

/// Exact shortest path by uniform-cost search.
pub fn dijkstra(problem: &PlanningProblem, conn: Connectivity) -> SearchResult {
    astar(problem, conn, Heuristic::Zero)
}

/// Shortest-path distance from `source` to every cell (∞ when unreachable).
pub fn distances_from(map: &OccupancyMap, source: Cell, conn: Connectivity) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; map.len()];
    let mut heap = BinaryHeap::new();
    let s = map.index(source);
    dist[s] = 0.0;
    heap.push(OpenEntry { f: 0.0, g: 0.0, index: s });
    while let Some(OpenEntry { g: d, index, .. }) = heap.pop() {
        if d > dist[index] {
            continue;
        }
        for (nb, step) in conn.neighbors(map, map.cell_at(index)) {
            let ni = map.index(nb);
            if d + step < dist[ni] {
                dist[ni] = d + step;
                heap.push(OpenEntry { f: d + step, g: d + step, index: ni });
            }
        }
    }
    dist
}

pub(crate) fn walk_parents(map: &OccupancyMap, parent: &[usize], goal: usize) -> Vec<Cell> {
    let mut path = vec![map.cell_at(goal)];
    let mut cur = goal;
    while parent[cur] != usize::MAX {
        cur = parent[cur];
        path.push(map.cell_at(cur));
    }
    path.reverse();
    path
}

/// Marks the cells of a found path on an `height × width` grid.
pub fn reconstruct_pathmap(result: &SearchResult, height: usize, width: usize) -> Result<PathMap, PlanError> {
    if !result.found {
        return Err(PlanError::NotFound);
    }
    if let Some(&cell) = result.path.iter().find(|c| c.row >= height || c.col >= width) {
        return Err(PlanError::DimsMismatch { cell, height, width });
    }
    Ok(PathMap::from_path(height, width, &result.path)?)
}
