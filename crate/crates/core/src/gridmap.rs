//! Occupancy maps, map-file ingestion and random planning-problem sampling.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astar::Connectivity;

/// Gray levels below this value are obstacles when ingesting images.
pub const DEFAULT_OBSTACLE_CUTOFF: u8 = 128;
/// Minimum start/goal distance as a fraction of the map diagonal.
pub const DEFAULT_MIN_SEPARATION: f64 = 0.5;
pub const DEFAULT_MAX_RETRIES: usize = 10_000;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("cell buffer has {len} entries, expected {height}x{width}")]
    BufferLength { height: usize, width: usize, len: usize },
    #[error("cell value {0} is not binary")]
    NonBinary(u8),
    #[error("obstacle probability {0} outside [0, 100]")]
    Probability(i32),
    #[error("occupancy threshold {0} outside [0, 100]")]
    Threshold(i32),
    #[error("cell ({}, {}) is outside the {height}x{width} map", .cell.row, .cell.col)]
    OutOfBounds { cell: Cell, height: usize, width: usize },
    #[error("cell ({}, {}) is an obstacle", .0.row, .0.col)]
    Blocked(Cell),
    #[error("start and goal coincide at ({}, {})", .0.row, .0.col)]
    SameEndpoints(Cell),
    #[error("path is not an 8-connected chain: {0}")]
    BrokenPath(String),
    #[error("no valid start/goal pair after {0} attempts")]
    GenerationExhausted(usize),
    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedImage { path: PathBuf, reason: String },
    #[error("reading {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Grid cell index. Serialized as a `[row, col]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Euclidean distance in cells.
    pub fn distance(self, other: Cell) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }

    /// True when the two cells differ by at most one in each coordinate.
    pub fn touches(self, other: Cell) -> bool {
        self != other && self.row.abs_diff(other.row) <= 1 && self.col.abs_diff(other.col) <= 1
    }
}

impl From<[usize; 2]> for Cell {
    fn from([row, col]: [usize; 2]) -> Self {
        Self { row, col }
    }
}

impl From<Cell> for [usize; 2] {
    fn from(c: Cell) -> Self {
        [c.row, c.col]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

/// Binary occupancy grid, `1` = obstacle, `0` = free, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawMap")]
pub struct OccupancyMap {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

#[derive(Deserialize)]
struct RawMap {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl TryFrom<RawMap> for OccupancyMap {
    type Error = MapError;
    fn try_from(raw: RawMap) -> Result<Self, MapError> {
        OccupancyMap::new(raw.height, raw.width, raw.cells)
    }
}

impl OccupancyMap {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self, MapError> {
        if cells.len() != height * width {
            return Err(MapError::BufferLength {
                height,
                width,
                len: cells.len(),
            });
        }
        if let Some(&v) = cells.iter().find(|&&v| v > 1) {
            return Err(MapError::NonBinary(v));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn free(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![0; height * width],
        }
    }

    /// Parses rows of `.` (free) and `#` (obstacle). Handy for fixtures.
    pub fn from_ascii(rows: &[&str]) -> Result<Self, MapError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut cells = Vec::with_capacity(height * width);
        for r in rows {
            if r.len() != width {
                return Err(MapError::BufferLength {
                    height,
                    width,
                    len: r.len(),
                });
            }
            cells.extend(r.bytes().map(|b| u8::from(b == b'#')));
        }
        Self::new(height, width, cells)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn index(&self, c: Cell) -> usize {
        c.row * self.width + c.col
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index / self.width, index % self.width)
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.row < self.height && c.col < self.width
    }

    pub fn is_blocked(&self, c: Cell) -> bool {
        self.cells[self.index(c)] == 1
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.contains(c) && !self.is_blocked(c)
    }

    pub fn set(&mut self, c: Cell, blocked: bool) {
        let i = self.index(c);
        self.cells[i] = u8::from(blocked);
    }

    pub fn free_count(&self) -> usize {
        self.cells.iter().filter(|&&v| v == 0).count()
    }

    pub fn diagonal(&self) -> f64 {
        ((self.height * self.height + self.width * self.width) as f64).sqrt()
    }

    /// Connected-component label for every free cell (`None` on obstacles).
    pub fn components(&self, conn: Connectivity) -> Vec<Option<usize>> {
        let mut labels = vec![None; self.len()];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for seed in 0..self.len() {
            if self.cells[seed] == 1 || labels[seed].is_some() {
                continue;
            }
            labels[seed] = Some(next);
            queue.push_back(seed);
            while let Some(i) = queue.pop_front() {
                for (n, _) in conn.neighbors(self, self.cell_at(i)) {
                    let ni = self.index(n);
                    if labels[ni].is_none() {
                        labels[ni] = Some(next);
                        queue.push_back(ni);
                    }
                }
            }
            next += 1;
        }
        labels
    }

    /// Writes an 8-bit grayscale image: free = 255, obstacle = 0. The format
    /// follows the extension (`.pgm` or `.png`).
    pub fn save_image(&self, path: &Path) -> Result<(), MapError> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let blocked = self.cells[y as usize * self.width + x as usize] == 1;
            Luma([if blocked { 0 } else { 255 }])
        });
        let format = image_format(path)?;
        img.save_with_format(path, format).map_err(|source| MapError::Image {
            path: path.to_owned(),
            source,
        })
    }
}

/// Uniformly random obstacles with the given density.
pub fn random_map<R: Rng + ?Sized>(height: usize, width: usize, density: f64, rng: &mut R) -> OccupancyMap {
    let cells = (0..height * width)
        .map(|_| u8::from(rng.random::<f64>() < density))
        .collect();
    OccupancyMap {
        height,
        width,
        cells,
    }
}

/// Occupancy-grid message payload with per-cell obstacle probabilities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbabilisticGrid {
    pub height: usize,
    pub width: usize,
    pub probs: Vec<i32>,
}

impl ProbabilisticGrid {
    pub fn new(height: usize, width: usize, probs: Vec<i32>) -> Result<Self, MapError> {
        let grid = Self {
            height,
            width,
            probs,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        if self.probs.len() != self.height * self.width {
            return Err(MapError::BufferLength {
                height: self.height,
                width: self.width,
                len: self.probs.len(),
            });
        }
        if let Some(&p) = self.probs.iter().find(|p| !(0..=100).contains(*p)) {
            return Err(MapError::Probability(p));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let text = std::fs::read_to_string(path).map_err(|source| MapError::Io {
            path: path.to_owned(),
            source,
        })?;
        let grid: Self = serde_json::from_str(&text).map_err(|source| MapError::Json {
            path: path.to_owned(),
            source,
        })?;
        grid.validate()?;
        Ok(grid)
    }
}

/// Thresholds obstacle probabilities: a cell is blocked iff `p ≥ t`.
pub fn from_probabilistic(grid: &ProbabilisticGrid, threshold: i32) -> Result<OccupancyMap, MapError> {
    if !(0..=100).contains(&threshold) {
        return Err(MapError::Threshold(threshold));
    }
    grid.validate()?;
    let cells = grid.probs.iter().map(|&p| u8::from(p >= threshold)).collect();
    OccupancyMap::new(grid.height, grid.width, cells)
}

fn image_format(path: &Path) -> Result<ImageFormat, MapError> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(MapError::UnsupportedImage {
            path: path.to_owned(),
            reason: "expected a .pgm or .png extension".into(),
        }),
    }
}

/// Reads an 8-bit PGM or PNG map; pixels darker than `cutoff` are obstacles.
///
/// Colour images with 8-bit channels are reduced to luma first. Deeper bit
/// depths are rejected.
pub fn load_image(path: &Path, cutoff: u8) -> Result<OccupancyMap, MapError> {
    let img = image::ImageReader::open(path)
        .map_err(|source| MapError::Io {
            path: path.to_owned(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| MapError::Io {
            path: path.to_owned(),
            source,
        })?
        .decode()
        .map_err(|source| MapError::Image {
            path: path.to_owned(),
            source,
        })?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => img.to_luma8(),
        other => {
            return Err(MapError::UnsupportedImage {
                path: path.to_owned(),
                reason: format!("{:?} is not an 8-bit image", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    let cells = gray.pixels().map(|p| u8::from(p.0[0] < cutoff)).collect();
    OccupancyMap::new(h as usize, w as usize, cells)
}

/// Binary map of the cells on a path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathMap {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl PathMap {
    /// Marks `path` after checking that consecutive cells touch (8-connected)
    /// and lie inside the map.
    pub fn from_path(height: usize, width: usize, path: &[Cell]) -> Result<Self, MapError> {
        let mut cells = vec![0u8; height * width];
        for (i, c) in path.iter().enumerate() {
            if c.row >= height || c.col >= width {
                return Err(MapError::OutOfBounds {
                    cell: *c,
                    height,
                    width,
                });
            }
            if i > 0 && !path[i - 1].touches(*c) {
                return Err(MapError::BrokenPath(format!(
                    "({}) and ({}) are not adjacent",
                    path[i - 1], c
                )));
            }
            cells[c.row * width + c.col] = 1;
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn marked(&self) -> usize {
        self.cells.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&v| f64::from(v)).collect()
    }
}

/// A start/goal query on a map, optionally with its reference path.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningProblem {
    pub map: Arc<OccupancyMap>,
    pub start: Cell,
    pub goal: Cell,
    pub truth: Option<PathMap>,
    /// The reference path as a cell sequence, when known.
    pub truth_path: Option<Vec<Cell>>,
}

impl PlanningProblem {
    pub fn new(map: Arc<OccupancyMap>, start: Cell, goal: Cell) -> Result<Self, MapError> {
        for c in [start, goal] {
            if !map.contains(c) {
                return Err(MapError::OutOfBounds {
                    cell: c,
                    height: map.height(),
                    width: map.width(),
                });
            }
            if map.is_blocked(c) {
                return Err(MapError::Blocked(c));
            }
        }
        if start == goal {
            return Err(MapError::SameEndpoints(start));
        }
        Ok(Self {
            map,
            start,
            goal,
            truth: None,
            truth_path: None,
        })
    }

    pub fn with_truth(mut self, path: Vec<Cell>) -> Result<Self, MapError> {
        if path.first() != Some(&self.start) || path.last() != Some(&self.goal) {
            return Err(MapError::BrokenPath("path does not join start and goal".into()));
        }
        self.truth = Some(PathMap::from_path(self.map.height(), self.map.width(), &path)?);
        self.truth_path = Some(path);
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub min_separation: f64,
    pub max_retries: usize,
    pub connectivity: Connectivity,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            min_separation: DEFAULT_MIN_SEPARATION,
            max_retries: DEFAULT_MAX_RETRIES,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Draws a start/goal pair on free cells, at least
/// `min_separation × diagonal` apart and mutually reachable.
pub fn sample_problem<R: Rng + ?Sized>(
    map: &Arc<OccupancyMap>,
    min_separation: f64,
    rng: &mut R,
) -> Result<PlanningProblem, MapError> {
    let cfg = SamplerConfig {
        min_separation,
        ..SamplerConfig::default()
    };
    sample_problem_with(map, &cfg, rng)
}

pub fn sample_problem_with<R: Rng + ?Sized>(
    map: &Arc<OccupancyMap>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PlanningProblem, MapError> {
    let labels = map.components(cfg.connectivity);
    sample_with_labels(map, &labels, cfg, rng)
}

/// Same as [`sample_problem_with`] but reuses precomputed component labels.
pub fn sample_with_labels<R: Rng + ?Sized>(
    map: &Arc<OccupancyMap>,
    labels: &[Option<usize>],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PlanningProblem, MapError> {
    let free: Vec<usize> = (0..map.len()).filter(|&i| map.cells()[i] == 0).collect();
    if free.len() < 2 {
        return Err(MapError::GenerationExhausted(0));
    }
    let min_dist = cfg.min_separation * map.diagonal();
    for _ in 0..cfg.max_retries {
        let a = free[rng.random_range(0..free.len())];
        let b = free[rng.random_range(0..free.len())];
        if a == b || labels[a] != labels[b] {
            continue;
        }
        let (start, goal) = (map.cell_at(a), map.cell_at(b));
        if start.distance(goal) < min_dist {
            continue;
        }
        return PlanningProblem::new(Arc::clone(map), start, goal);
    }
    Err(MapError::GenerationExhausted(cfg.max_retries))
}

/// On-disk problem description. `map_path` is resolved relative to the
/// problem file's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub map_path: PathBuf,
    pub start: Cell,
    pub goal: Cell,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_path: Option<Vec<Cell>>,
}

impl ProblemFile {
    pub fn read(path: &Path) -> Result<Self, MapError> {
        let text = std::fs::read_to_string(path).map_err(|source| MapError::Io {
            path: path.to_owned(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| MapError::Json {
            path: path.to_owned(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), MapError> {
        let text = serde_json::to_string_pretty(self).expect("plain data serializes");
        std::fs::write(path, text).map_err(|source| MapError::Io {
            path: path.to_owned(),
            source,
        })
    }

    /// Loads the referenced map and builds the problem.
    pub fn resolve(&self, base_dir: &Path, cutoff: u8) -> Result<PlanningProblem, MapError> {
        let map_path = if self.map_path.is_absolute() {
            self.map_path.clone()
        } else {
            base_dir.join(&self.map_path)
        };
        let map = Arc::new(load_image(&map_path, cutoff)?);
        let problem = PlanningProblem::new(map, self.start, self.goal)?;
        match &self.truth_path {
            Some(p) => problem.with_truth(p.clone()),
            None => Ok(problem),
        }
    }
}
