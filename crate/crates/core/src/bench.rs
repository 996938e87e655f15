//! Repeated-trial comparison of planners on shared problem sets.
//!
//! For every map, `trials` start/goal pairs are drawn once from a seeded
//! stream and handed to every planner. Expansion counts, success and path
//! length come from a (possibly parallel) metrics pass; wall times come from
//! a separate serial pass after one untimed warm-up call per planner.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::astar::{astar, Heuristic, SearchResult};
use crate::diff_astar::{plan, GuidanceMap, SearchConfig};
use crate::gridmap::{sample_with_labels, MapError, OccupancyMap, PlanningProblem, SamplerConfig};
use crate::par::{self, Exec};
use crate::vit::ModelParams;

pub const DEFAULT_TRIALS: usize = 25;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("trials must be positive")]
    NoTrials,
    #[error("no planners selected")]
    NoPlanners,
    #[error("map {name}: {source}")]
    Sampling { name: String, source: MapError },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub enum Planner {
    /// Octile A* on unit costs.
    Classic,
    /// Differentiable search with all-ones guidance.
    Uniform,
    /// Differentiable search on the encoder's guidance map.
    Vit(Arc<ModelParams>),
}

impl Planner {
    pub fn name(&self) -> &'static str {
        match self {
            Planner::Classic => "classic",
            Planner::Uniform => "uniform",
            Planner::Vit(_) => "vit",
        }
    }

    /// One planning call. Errors count as failures.
    pub fn solve(&self, problem: &PlanningProblem, search: &SearchConfig) -> SearchResult {
        let started = Instant::now();
        let failed = || SearchResult::not_found(0, started.elapsed().as_secs_f64());
        match self {
            Planner::Classic => astar(problem, search.connectivity, Heuristic::default_for(search.connectivity)),
            Planner::Uniform => {
                let g = GuidanceMap::uniform(problem.map.height(), problem.map.width(), 1.0);
                plan(problem, &g, search).unwrap_or_else(|_| failed())
            }
            Planner::Vit(params) => match params.guidance(problem) {
                Ok(g) => plan(problem, &g, search).unwrap_or_else(|_| failed()),
                Err(_) => failed(),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchMap {
    pub name: String,
    pub map: Arc<OccupancyMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub trials: usize,
    pub seed: u64,
    pub min_separation: f64,
    pub search: SearchConfig,
    pub warmup: bool,
    /// Run the serial timing pass.
    pub timing: bool,
    pub exec: Exec,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            seed: 0,
            min_separation: crate::gridmap::DEFAULT_MIN_SEPARATION,
            search: SearchConfig::default(),
            warmup: true,
            timing: true,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerStats {
    pub planner: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub expansions_mean: f64,
    /// Mean geometric length of successful paths.
    pub path_cost_mean: Option<f64>,
    pub wall_mean_s: f64,
    pub wall_std_s: f64,
    /// SHA-256 over the instances this planner was given.
    pub instance_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: String,
    pub height: usize,
    pub width: usize,
    pub planners: Vec<PlannerStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub trials: usize,
    pub hardware: String,
    pub config: serde_json::Value,
    pub maps: Vec<MapReport>,
}

pub fn hardware_note() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{} logical cpus, {} {}, rayon {}",
        cpus,
        std::env::consts::OS,
        std::env::consts::ARCH,
        if cfg!(feature = "parallel") { "on" } else { "off" }
    )
}

/// Deterministic problem list for one map.
pub fn instances(map: &Arc<OccupancyMap>, index: usize, cfg: &BenchConfig) -> Result<Vec<PlanningProblem>, MapError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let sampler = SamplerConfig {
        min_separation: cfg.min_separation,
        connectivity: cfg.search.connectivity,
        ..SamplerConfig::default()
    };
    let labels = map.components(sampler.connectivity);
    (0..cfg.trials)
        .map(|_| sample_with_labels(map, &labels, &sampler, &mut rng))
        .collect()
}

pub fn instance_hash(problems: &[PlanningProblem]) -> String {
    let mut h = Sha256::new();
    for p in problems {
        h.update((p.map.height() as u64).to_le_bytes());
        h.update((p.map.width() as u64).to_le_bytes());
        h.update(p.map.cells());
        for c in [p.start, p.goal] {
            h.update((c.row as u64).to_le_bytes());
            h.update((c.col as u64).to_le_bytes());
        }
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn run_planner(planner: &Planner, problems: &[PlanningProblem], cfg: &BenchConfig) -> PlannerStats {
    let results = par::map(cfg.exec, problems, |p| planner.solve(p, &cfg.search));
    let ok: Vec<&SearchResult> = results.iter().filter(|r| r.found).collect();
    let mut walls = Vec::new();
    if cfg.timing {
        if cfg.warmup {
            if let Some(p) = problems.first() {
                let _ = planner.solve(p, &cfg.search);
            }
        }
        for p in problems {
            let started = Instant::now();
            let _ = planner.solve(p, &cfg.search);
            walls.push(started.elapsed().as_secs_f64());
        }
    }
    let (wall_mean_s, wall_std_s) = mean_std(&walls);
    let n = problems.len();
    PlannerStats {
        planner: planner.name().to_string(),
        trials: n,
        successes: ok.len(),
        success_rate: ok.len() as f64 / n as f64,
        expansions_mean: results.iter().map(|r| r.expansions as f64).sum::<f64>() / n as f64,
        path_cost_mean: (!ok.is_empty())
            .then(|| ok.iter().map(|r| r.path_length()).sum::<f64>() / ok.len() as f64),
        wall_mean_s,
        wall_std_s,
        instance_hash: instance_hash(problems),
    }
}

pub fn run_benchmark(maps: &[BenchMap], planners: &[Planner], cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.trials == 0 {
        return Err(BenchError::NoTrials);
    }
    if planners.is_empty() {
        return Err(BenchError::NoPlanners);
    }
    let mut reports = Vec::with_capacity(maps.len());
    for (i, m) in maps.iter().enumerate() {
        let problems = instances(&m.map, i, cfg).map_err(|source| BenchError::Sampling {
            name: m.name.clone(),
            source,
        })?;
        let planners = planners.iter().map(|p| run_planner(p, &problems, cfg)).collect();
        reports.push(MapReport {
            map: m.name.clone(),
            height: m.map.height(),
            width: m.map.width(),
            planners,
        });
    }
    Ok(BenchReport {
        seed: cfg.seed,
        trials: cfg.trials,
        hardware: hardware_note(),
        config: serde_json::to_value(cfg)?,
        maps: reports,
    })
}

pub const CSV_HEADER: &str =
    "map,planner,height,width,trials,successes,success_rate,expansions_mean,path_cost_mean,wall_mean_s,wall_std_s,instance_hash";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for m in &self.maps {
            for p in &m.planners {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    m.map,
                    p.planner,
                    m.height,
                    m.width,
                    p.trials,
                    p.successes,
                    p.success_rate,
                    p.expansions_mean,
                    p.path_cost_mean.map(|c| c.to_string()).unwrap_or_default(),
                    p.wall_mean_s,
                    p.wall_std_s,
                    p.instance_hash
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String, BenchError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Stats for one map and planner.
    pub fn stats(&self, map: &str, planner: &str) -> Option<&PlannerStats> {
        self.maps
            .iter()
            .find(|m| m.map == map)?
            .planners
            .iter()
            .find(|p| p.planner == planner)
    }
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn export_report(report: &BenchReport, dir: &Path) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    Ok(())
}

/// `count` random maps named `synthetic-000`, `synthetic-001`, ...
pub fn synthetic_maps(count: usize, height: usize, width: usize, density: f64, seed: u64) -> Vec<BenchMap> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            BenchMap {
                name: format!("synthetic-{i:03}"),
                map: Arc::new(crate::gridmap::random_map(height, width, density, &mut rng)),
            }
        })
        .collect()
}
