//! `vitastar` command line: plan, train, bench, render and dataset.
//!
//! Exit codes: 0 on success, 1 when the work itself fails (unsolvable
//! instance, I/O, divergence), 2 for invalid invocations.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::astar::SearchResult;
use crate::bench::{export_report, run_benchmark, synthetic_maps, BenchConfig, BenchMap, Planner, DEFAULT_TRIALS};
use crate::diff_astar::{GuidanceMap, SearchConfig};
use crate::gridmap::{
    from_probabilistic, load_image, Cell, OccupancyMap, PlanningProblem, ProbabilisticGrid, ProblemFile,
    SamplerConfig, DEFAULT_OBSTACLE_CUTOFF,
};
use crate::par::Exec;
use crate::pathpost::{export_path, orient_with, OrientMode, PathFormat};
use crate::trainer::{build_dataset_with, synthetic_dataset, train, Dataset, SyntheticConfig, TrainConfig, TrainError};
use crate::vit::{ModelConfig, ModelParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "vitastar", version, about = "Grid path planning with learned guidance maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one start/goal query and print cost, expansions and time.
    Plan(PlanArgs),
    /// Train the guidance encoder through the differentiable search.
    Train(TrainArgs),
    /// Compare planners on repeated random queries.
    Bench(BenchArgs),
    /// Write a map, or the guidance for a query, as an image.
    Render(RenderArgs),
    /// Write a labelled problem set to disk.
    Dataset(DatasetArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlannerKind {
    Classic,
    Vit,
    Uniform,
}

#[derive(Debug, Clone, Args)]
pub struct MapArgs {
    /// Map file: PGM/PNG image, or a JSON occupancy-probability grid.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Grey level below which image pixels are obstacles.
    #[arg(long, default_value_t = DEFAULT_OBSTACLE_CUTOFF)]
    pub cutoff: u8,
    /// Occupancy threshold for probability grids (blocked iff p ≥ t).
    #[arg(long, default_value_t = 50)]
    pub threshold: i32,
}

#[derive(Debug, Clone, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub map: MapArgs,
    /// Problem JSON with map_path, start and goal; replaces --map/--start/--goal.
    #[arg(long, conflicts_with_all = ["map", "start", "goal"])]
    pub problem: Option<PathBuf>,
    /// Start cell as `row,col`.
    #[arg(long, value_parser = parse_cell)]
    pub start: Option<Cell>,
    /// Goal cell as `row,col`.
    #[arg(long, value_parser = parse_cell)]
    pub goal: Option<Cell>,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[arg(long, value_enum, default_value_t = PlannerKind::Classic)]
    pub planner: PlannerKind,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Softmax temperature (default √W).
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pose path output (.json or .csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// PNG with the search area and path drawn over the map.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Start heading in radians.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub start_theta: f64,
    /// Goal heading in radians.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub goal_theta: f64,
    #[arg(long, value_enum, default_value_t = OrientArg::Heading)]
    pub orient: OrientArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrientArg {
    Heading,
    Literal,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Directory of PGM/PNG maps; problems are sampled on each. Without it a
    /// synthetic corpus of random maps is generated.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    /// Problems per map when --maps is given.
    #[arg(long, default_value_t = 10)]
    pub per_map: usize,
    /// Synthetic corpus size.
    #[arg(long)]
    pub problems: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_OBSTACLE_CUTOFF)]
    pub cutoff: u8,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Output directory for checkpoint.json and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with `model`, `train` and `data` sections; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run everything on the calling thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Directory of PGM/PNG maps.
    #[arg(long, conflicts_with = "synthetic")]
    pub maps: Option<PathBuf>,
    /// Number of random 32×32 maps to use instead of --maps.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Planners to run; repeatable. Defaults to classic and uniform, plus vit
    /// when a checkpoint is given.
    #[arg(long, value_enum)]
    pub planner: Vec<PlannerKind>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Output directory for report.csv and report.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_OBSTACLE_CUTOFF)]
    pub cutoff: u8,
    /// Skip the serial timing pass (wall-time columns become 0).
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    /// With a checkpoint and a query, draw the guidance map instead of the
    /// occupancy map.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives one map image and problem JSON per sample
    /// plus an index.csv.
    #[arg(long)]
    pub out: PathBuf,
}

/// Optional JSON configuration; any section may be omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticConfig,
    pub bench: BenchConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
            }
        }
    }
}

pub fn parse_cell(s: &str) -> Result<Cell, String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected row,col but got `{s}`"))?;
    let r = r.trim().parse().map_err(|_| format!("bad row in `{s}`"))?;
    let c = c.trim().parse().map_err(|_| format!("bad column in `{s}`"))?;
    Ok(Cell::new(r, c))
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Plan(a) => cmd_plan(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Render(a) => cmd_render(a),
        Command::Dataset(a) => cmd_dataset(a),
    }
}

fn is_map_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm" | "pnm")
    )
}

pub fn load_map(args: &MapArgs) -> Result<OccupancyMap, CliError> {
    let path = args.map.as_deref().ok_or_else(|| usage("--map is required"))?;
    if !path.exists() {
        return Err(usage(format!("map file {} does not exist", path.display())));
    }
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let grid = ProbabilisticGrid::load(path).map_err(runtime)?;
        from_probabilistic(&grid, args.threshold).map_err(|e| usage(e.to_string()))
    } else {
        load_image(path, args.cutoff).map_err(runtime)
    }
}

fn load_problem(q: &QueryArgs) -> Result<PlanningProblem, CliError> {
    if let Some(p) = &q.problem {
        let file = ProblemFile::read(p).map_err(|e| usage(e.to_string()))?;
        let base = p.parent().unwrap_or(Path::new("."));
        return file.resolve(base, q.map.cutoff).map_err(runtime);
    }
    let start = q.start.ok_or_else(|| usage("--start is required"))?;
    let goal = q.goal.ok_or_else(|| usage("--goal is required"))?;
    let map = Arc::new(load_map(&q.map)?);
    PlanningProblem::new(map, start, goal).map_err(|e| usage(e.to_string()))
}

fn load_checkpoint(path: Option<&Path>, planner: &str) -> Result<ModelParams, CliError> {
    let path = path.ok_or_else(|| usage(format!("--planner {planner} needs --checkpoint")))?;
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    ModelParams::load(path).map_err(runtime)
}

fn cmd_plan(a: &PlanArgs) -> Result<(), CliError> {
    if a.tau.is_some_and(|t| !(t.is_finite() && t > 0.0)) {
        return Err(usage("--tau must be positive"));
    }
    let planner = match a.planner {
        PlannerKind::Classic => Planner::Classic,
        PlannerKind::Uniform => Planner::Uniform,
        PlannerKind::Vit => Planner::Vit(Arc::new(load_checkpoint(a.checkpoint.as_deref(), "vit")?)),
    };
    let format = a.out.as_deref().map(PathFormat::from_path).transpose().map_err(|e| usage(e.to_string()))?;
    let problem = load_problem(&a.query)?;
    let search = SearchConfig {
        tau: a.tau,
        ..SearchConfig::default()
    };
    let result = planner.solve(&problem, &search);
    if let Some(path) = &a.overlay {
        overlay(&problem, &result).save(path).map_err(runtime)?;
    }
    if !result.found {
        return Err(runtime(format!(
            "no path from {} to {} ({} expansions)",
            problem.start, problem.goal, result.expansions
        )));
    }
    println!("planner: {}", planner.name());
    println!("path_cost: {}", result.path_length());
    println!("path_cells: {}", result.path.len());
    println!("expansions: {}", result.expansions);
    println!("wall_time_s: {}", result.wall_time);
    if let (Some(path), Some(format)) = (&a.out, format) {
        let mode = match a.orient {
            OrientArg::Heading => OrientMode::Heading,
            OrientArg::Literal => OrientMode::Literal,
        };
        let poses = orient_with(&result.path, a.start_theta, a.goal_theta, mode).map_err(runtime)?;
        export_path(&poses, path, format).map_err(runtime)?;
    }
    Ok(())
}

/// Map in white/black, search area green, path red, endpoints blue.
pub fn overlay(problem: &PlanningProblem, result: &SearchResult) -> RgbImage {
    let map = &problem.map;
    let mut img = RgbImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        if map.is_blocked(Cell::new(y as usize, x as usize)) {
            Rgb([0, 0, 0])
        } else {
            Rgb([255, 255, 255])
        }
    });
    let mut paint = |c: Cell, px: Rgb<u8>| img.put_pixel(c.col as u32, c.row as u32, px);
    for &c in &result.expanded {
        paint(c, Rgb([120, 220, 120]));
    }
    for &c in &result.path {
        paint(c, Rgb([220, 40, 40]));
    }
    paint(problem.start, Rgb([40, 40, 220]));
    paint(problem.goal, Rgb([40, 40, 220]));
    img
}

fn read_map_dir(dir: &Path, cutoff: u8) -> Result<Vec<BenchMap>, CliError> {
    if !dir.is_dir() {
        return Err(usage(format!("map directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(runtime)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_map_file(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no .pgm or .png maps in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            Ok(BenchMap {
                name: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                map: Arc::new(load_image(p, cutoff).map_err(runtime)?),
            })
        })
        .collect()
}

fn exec_for(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn build_corpus(c: &CorpusArgs, data: &SyntheticConfig, seed: u64, exec: Exec) -> Result<Dataset, CliError> {
    let val = c.val.unwrap_or(data.val);
    let test = c.test.unwrap_or(data.test);
    let ds = match &c.maps {
        Some(dir) => {
            let maps: Vec<_> = read_map_dir(dir, c.cutoff)?.into_iter().map(|m| m.map).collect();
            let sampler = SamplerConfig {
                min_separation: data.min_separation,
                ..SamplerConfig::default()
            };
            build_dataset_with(&maps, c.per_map, seed, &sampler, exec).map_err(runtime)?
        }
        None => {
            let cfg = SyntheticConfig {
                problems: c.problems.unwrap_or(data.problems),
                seed,
                ..*data
            };
            synthetic_dataset(&cfg, exec).map_err(runtime)?
        }
    };
    if val + test >= ds.len() {
        return Err(usage(format!(
            "{} problems cannot hold {val} validation and {test} test problems plus a training split",
            ds.len()
        )));
    }
    Ok(ds.with_split(val, test))
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(file.train.seed);
    let exec = exec_for(a.sequential);
    let mut cfg = TrainConfig {
        epochs: a.epochs,
        seed,
        exec,
        ..file.train
    };
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if a.tau.is_some() {
        cfg.search.tau = a.tau;
    }
    let model = ModelConfig { seed, ..file.model };
    model.validate().map_err(|e| usage(e.to_string()))?;
    let ds = build_corpus(&a.corpus, &file.data, seed, exec)?;
    fs::create_dir_all(&a.out).map_err(runtime)?;
    let ckpt = a.out.join("checkpoint.json");
    let outcome = match train(&ds, model, &cfg) {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, last_good }) => {
            last_good.save(&ckpt).map_err(runtime)?;
            return Err(runtime(format!(
                "training diverged at epoch {epoch}; last good weights in {}",
                ckpt.display()
            )));
        }
        Err(e) => return Err(runtime(e)),
    };
    outcome.best.save(&ckpt).map_err(runtime)?;
    outcome.write_metrics(&a.out.join("metrics.csv")).map_err(runtime)?;
    let best = &outcome.history[outcome.best_epoch];
    println!(
        "best epoch {} of {}: val expansions {:.3}, val loss {:.6}",
        outcome.best_epoch,
        outcome.history.len() - 1,
        best.val_expansions_mean,
        best.val_loss
    );
    println!("wrote {} and metrics.csv", ckpt.display());
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(file.bench.seed);
    let mut cfg = BenchConfig {
        trials: a.trials,
        seed,
        exec: exec_for(a.sequential),
        ..file.bench
    };
    if a.no_timing {
        cfg.timing = false;
    }
    if a.tau.is_some() {
        cfg.search.tau = a.tau;
    }
    if cfg.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let mut kinds = a.planner.clone();
    if kinds.is_empty() {
        kinds = vec![PlannerKind::Classic, PlannerKind::Uniform];
        if a.checkpoint.is_some() {
            kinds.push(PlannerKind::Vit);
        }
    }
    kinds.dedup();
    let params = if kinds.contains(&PlannerKind::Vit) {
        Some(Arc::new(load_checkpoint(a.checkpoint.as_deref(), "vit")?))
    } else {
        None
    };
    let planners: Vec<Planner> = kinds
        .iter()
        .map(|k| match k {
            PlannerKind::Classic => Planner::Classic,
            PlannerKind::Uniform => Planner::Uniform,
            PlannerKind::Vit => Planner::Vit(Arc::clone(params.as_ref().expect("loaded above"))),
        })
        .collect();
    let maps = match (&a.maps, a.synthetic) {
        (Some(dir), _) => read_map_dir(dir, a.cutoff)?,
        (None, Some(n)) if n > 0 => synthetic_maps(n, 32, 32, 0.25, seed),
        _ => return Err(usage("give --maps DIR or --synthetic N")),
    };
    let report = run_benchmark(&maps, &planners, &cfg).map_err(runtime)?;
    export_report(&report, &a.out).map_err(runtime)?;
    for m in &report.maps {
        for p in &m.planners {
            println!(
                "{} {}: success {:.2}, expansions {:.2}, wall {:.6}s",
                m.map, p.planner, p.success_rate, p.expansions_mean, p.wall_mean_s
            );
        }
    }
    Ok(())
}

fn gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Guidance as grey levels: cheap cells dark, costly cells light.
pub fn guidance_image(g: &GuidanceMap) -> RgbImage {
    let max = g.costs().iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    RgbImage::from_fn(g.width() as u32, g.height() as u32, |x, y| {
        let v = gray(g.at(Cell::new(y as usize, x as usize)) / max);
        Rgb([v, v, v])
    })
}

fn cmd_render(a: &RenderArgs) -> Result<(), CliError> {
    let img = match &a.checkpoint {
        Some(path) => {
            let params = load_checkpoint(Some(path), "vit")?;
            let problem = load_problem(&a.query)?;
            guidance_image(&params.guidance(&problem).map_err(runtime)?)
        }
        None => {
            let map = load_map(&a.query.map)?;
            RgbImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
                let v = if map.is_blocked(Cell::new(y as usize, x as usize)) { 0 } else { 255 };
                Rgb([v, v, v])
            })
        }
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(runtime)?;
    }
    img.save(&a.out).map_err(runtime)?;
    Ok(())
}

fn cmd_dataset(a: &DatasetArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let ds = build_corpus(&a.corpus, &SyntheticConfig::default(), a.seed, Exec::default())?;
    fs::create_dir_all(&a.out).map_err(runtime)?;
    let mut index = csv::Writer::from_path(a.out.join("index.csv")).map_err(runtime)?;
    index
        .write_record(["problem", "map", "split", "start_row", "start_col", "goal_row", "goal_col"])
        .map_err(runtime)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let map_name = format!("map_{i:04}.png");
        let prob_name = format!("problem_{i:04}.json");
        s.problem.map.save_image(&a.out.join(&map_name)).map_err(runtime)?;
        let file = ProblemFile {
            map_path: PathBuf::from(&map_name),
            start: s.problem.start,
            goal: s.problem.goal,
            truth_path: s.problem.truth_path.clone(),
        };
        file.write(&a.out.join(&prob_name)).map_err(runtime)?;
        let split = serde_json::to_value(s.split).map_err(runtime)?;
        index
            .write_record([
                prob_name,
                map_name,
                split.as_str().unwrap_or_default().to_string(),
                s.problem.start.row.to_string(),
                s.problem.start.col.to_string(),
                s.problem.goal.row.to_string(),
                s.problem.goal.col.to_string(),
            ])
            .map_err(runtime)?;
    }
    index.flush().map_err(runtime)?;
    println!("wrote {} problems to {} in {:.2?}", ds.len(), a.out.display(), started.elapsed());
    Ok(())
}
