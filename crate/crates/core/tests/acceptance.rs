//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod support;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitastar::astar::{astar, dijkstra, Connectivity, Heuristic};
use vitastar::cli;
use vitastar::diff_astar::{backtrack, loss, search_in, search_with, GuidanceMap, SearchConfig};
use vitastar::gridmap::{
    from_probabilistic, random_map, sample_problem, Cell, OccupancyMap, PlanningProblem,
    ProbabilisticGrid,
};
use vitastar::numcore::{masked_softmax_values, Graph, Tensor};
use vitastar::par::Exec;
use vitastar::pathpost::{heading, literal_angle, orient_with, world, OrientMode};
use vitastar::trainer::{classic_expansions, evaluate, synthetic_dataset, train, Split, SyntheticConfig, TrainConfig};
use vitastar::vit::{self, patchify, ModelConfig, ModelParams};

use support::{atan2_heading, close, dijkstra_counts, step_counts, Replay};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut solvable = 0;
    for i in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let density = rng.random_range(0.2..0.35);
        let map = random_map(32, 32, density, &mut rng);
        let free: Vec<usize> = (0..map.len()).filter(|&k| map.cells()[k] == 0).collect();
        let start = map.cell_at(free[rng.random_range(0..free.len())]);
        let goal = map.cell_at(free[rng.random_range(0..free.len())]);
        let Ok(problem) = PlanningProblem::new(Arc::new(map), start, goal) else {
            continue;
        };
        let reference = dijkstra(&problem, Connectivity::Eight);
        let oracle = dijkstra_counts(&problem.map, start, goal);
        check(reference.found == oracle.is_some(), || format!("map {i}: reachability disagrees"))?;
        if !reference.found {
            continue;
        }
        solvable += 1;
        let a = astar(&problem, Connectivity::Eight, Heuristic::Octile);
        check(a.found, || format!("map {i}: A* found no path"))?;
        let (ca, cd) = (step_counts(&a.path), step_counts(&reference.path));
        check(ca == cd && Some(cd) == oracle, || {
            format!("map {i}: A* {ca:?} vs Dijkstra {cd:?} vs oracle {oracle:?}")
        })?;
        check(a.path_length() == reference.path_length(), || format!("map {i}: cost mismatch"))?;
    }
    within(started.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{solvable}/200 solvable, costs identical, {:.2?}", started.elapsed()))
}

fn uniform_equivalence() -> Outcome {
    let started = Instant::now();
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + i);
        let density = rng.random_range(0.1..0.3);
        let map = Arc::new(random_map(16, 16, density, &mut rng));
        let Ok(problem) = sample_problem(&map, 0.3, &mut rng) else {
            return Err(format!("instance {i}: sampling failed"));
        };
        let classic = astar(&problem, Connectivity::Eight, Heuristic::Octile);
        let trace = search_with(&problem, &GuidanceMap::uniform(16, 16, 1.0), &SearchConfig::default())
            .map_err(|e| e.to_string())?;
        let neural = backtrack(&trace, &problem).map_err(|e| e.to_string())?;
        check(neural.path.len() == classic.path.len(), || {
            format!("instance {i}: {} vs {} steps", neural.path.len() - 1, classic.path.len() - 1)
        })?;
    }
    within(started.elapsed(), Duration::from_secs(60))?;
    Ok(format!("100/100 step counts equal, {:.2?}", started.elapsed()))
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let n = rng.random_range(1..64);
        let (scores, mask, tau): (Vec<f64>, Vec<f64>, f64) = match k % 4 {
            // a single open cell
            0 => {
                let open = rng.random_range(0..n);
                let s = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
                let m = (0..n).map(|i| f64::from(i == open)).collect();
                (s, m, rng.random_range(0.01..10.0))
            }
            // exponents far beyond the f64 range without the shift
            1 => {
                let s = (0..n).map(|_| rng.random_range(-1e6..1e6)).collect();
                let mut m: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
                m[0] = 1.0;
                (s, m, rng.random_range(1e-3..1.0))
            }
            2 => {
                let base: f64 = rng.random_range(700.0..710.0);
                let s = (0..n).map(|_| base + rng.random_range(0.0..1.0)).collect();
                (s, vec![1.0; n], 1e-3)
            }
            _ => {
                let s = (0..n).map(|_| rng.random_range(0.0..50.0)).collect();
                let mut m: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.7))).collect();
                m[n - 1] = 1.0;
                (s, m, rng.random_range(0.1..8.0))
            }
        };
        let plain = masked_softmax_values(&scores, &mask, tau).map_err(|e| e.to_string())?;
        let mut graph = Graph::new();
        let s = graph.leaf(Tensor::new(vec![n], scores.clone()).map_err(|e| e.to_string())?);
        let m = graph.constant(Tensor::new(vec![n], mask.clone()).map_err(|e| e.to_string())?);
        let w = graph.masked_softmax(s, m, tau).map_err(|e| e.to_string())?;
        for weights in [plain.as_slice(), graph.value(w).data()] {
            check(weights.iter().all(|v| v.is_finite() && *v >= 0.0), || format!("fixture {k}: bad weight"))?;
            check(weights.iter().zip(&mask).all(|(v, m)| *m == 1.0 || *v == 0.0), || {
                format!("fixture {k}: weight on a closed cell")
            })?;
            let err = (weights.iter().sum::<f64>() - 1.0).abs();
            worst = worst.max(err);
            check(err <= 1e-12, || format!("fixture {k}: sum off by {err:e}"))?;
        }
    }
    Ok(format!("1000 fixtures, worst |Σ−1| = {worst:.1e}"))
}

type Fixture = ([&'static str; 8], (usize, usize), (usize, usize));

const FIXTURES: [Fixture; 5] = [
    (
        ["........", "........", "........", "........", "........", "........", "........", "........"],
        (0, 0),
        (7, 7),
    ),
    (
        ["........", "..####..", "......#.", ".##...#.", "..#.....", "..#.##..", "........", "........"],
        (0, 0),
        (7, 6),
    ),
    (
        ["....#...", "....#...", "....#...", "....#...", "........", "....#...", "....#...", "....#..."],
        (0, 1),
        (7, 6),
    ),
    (
        ["........", ".######.", ".#......", ".#.####.", ".#....#.", ".####.#.", "......#.", "........"],
        (2, 2),
        (7, 0),
    ),
    (
        ["..#.....", "..#.##..", "..#..#..", ".....#..", "####.#..", ".....#..", ".#####..", "........"],
        (0, 0),
        (5, 0),
    ),
];

fn fixture_problem(k: usize) -> Result<PlanningProblem, String> {
    let (rows, s, g) = &FIXTURES[k];
    let map = Arc::new(OccupancyMap::from_ascii(rows).map_err(|e| e.to_string())?);
    let p = PlanningProblem::new(map, Cell::new(s.0, s.1), Cell::new(g.0, g.1)).map_err(|e| e.to_string())?;
    let truth = dijkstra(&p, Connectivity::Eight);
    p.with_truth(truth.path).map_err(|e| e.to_string())
}

fn compare(label: &str, analytic: &[f64], fd: &[f64]) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
        check(close(*a, *f, 1e-3, 1e-9), || format!("{label}[{i}]: analytic {a:e} vs fd {f:e}"))?;
        if f.abs() > 1e-9 {
            nonzero += 1;
            worst = worst.max((a - f).abs() / f.abs());
        }
    }
    check(nonzero > 0, || format!("{label}: gradient identically zero"))?;
    Ok(worst)
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let cfg = SearchConfig::default();
    let mut worst: f64 = 0.0;
    for k in 0..FIXTURES.len() {
        let problem = fixture_problem(k)?;
        let truth = problem.truth.clone().ok_or("missing truth")?;
        let mut rng = ChaCha8Rng::seed_from_u64(40 + k as u64);
        let costs: Vec<f64> = (0..64).map(|_| rng.random_range(0.2..1.5)).collect();
        let guidance = GuidanceMap::new(8, 8, costs.clone()).map_err(|e| e.to_string())?;
        let mut trace = search_with(&problem, &guidance, &cfg).map_err(|e| e.to_string())?;
        let l = loss(&mut trace, &truth).map_err(|e| e.to_string())?;
        trace.graph.backward(l).map_err(|e| e.to_string())?;
        let analytic = trace.guidance_grad().ok_or("no gradient")?.to_vec();
        let replay = Replay {
            map: &problem.map,
            goal: problem.goal,
            steps: &trace.steps,
            base: costs,
            truth: truth.as_f64(),
            config: cfg,
        };
        check(close(replay.loss(&replay.base, &replay.base_soft()), trace.graph.value(l).item(), 1e-12, 1e-14), || {
            format!("fixture {k}: replay loss disagrees with the recorded loss")
        })?;
        worst = worst.max(compare(&format!("fixture {k}"), &analytic, &replay.fd_gradient(1e-5))?);
    }

    // end to end through the encoder, D = 8, one block
    let model = ModelParams::init(ModelConfig {
        patch_size: 4,
        hidden_dim: 8,
        blocks: 1,
        heads: 2,
        n_max: 16,
        seed: 5,
        ..ModelConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let problem = fixture_problem(1)?;
    let truth = problem.truth.clone().ok_or("missing truth")?;
    let mut graph = Graph::new();
    let fwd = vit::forward(&mut graph, &model, &problem).map_err(|e| e.to_string())?;
    let mut trace = search_in(graph, fwd.guidance, &problem, &cfg).map_err(|e| e.to_string())?;
    let l = loss(&mut trace, &truth).map_err(|e| e.to_string())?;
    trace.graph.backward(l).map_err(|e| e.to_string())?;
    let grads = model.gradients(&trace.graph, &fwd.bound);
    let w = model.names().iter().position(|n| n == "patch.weight").ok_or("no patch.weight")?;
    let base = model.guidance(&problem).map_err(|e| e.to_string())?.costs().to_vec();
    let replay = Replay {
        map: &problem.map,
        goal: problem.goal,
        steps: &trace.steps,
        base,
        truth: truth.as_f64(),
        config: cfg,
    };
    let soft = replay.base_soft();
    let h = 1e-5;
    let count = model.tensors()[w].len();
    let mut fd = Vec::with_capacity(count);
    for i in 0..count {
        let eval = |delta: f64| -> Result<f64, String> {
            let mut m = model.clone();
            m.tensors_mut()[w].data_mut()[i] += delta;
            let g = m.guidance(&problem).map_err(|e| e.to_string())?;
            Ok(replay.loss(g.costs(), &soft))
        };
        fd.push((eval(h)? - eval(-h)?) / (2.0 * h));
    }
    worst = worst.max(compare("patch.weight", &grads[w], &fd)?);
    within(started.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "5 fixtures + {count} patch weights, worst rel err {worst:.1e}, {:.2?}",
        started.elapsed()
    ))
}

pub fn efficacy_model() -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        hidden_dim: 32,
        blocks: 2,
        heads: 4,
        n_max: 256,
        seed: 0,
        ..ModelConfig::default()
    }
}

fn training_efficacy() -> Outcome {
    let started = Instant::now();
    let data = SyntheticConfig::default();
    let ds = synthetic_dataset(&data, Exec::default()).map_err(|e| e.to_string())?;
    check(ds.len() == 200 && ds.count(Split::Test) == 50, || "corpus shape".into())?;
    let cfg = TrainConfig::default();
    check(cfg.epochs == 300, || "epoch cap".into())?;
    let out = train(&ds, efficacy_model(), &cfg).map_err(|e| e.to_string())?;
    let initial = out.history[0].train_loss;
    let last = out.history.last().ok_or("empty history")?;
    let test = ds.split(Split::Test);
    let (_, learned) = evaluate(&out.best, &test, &cfg.search, Exec::default()).map_err(|e| e.to_string())?;
    let classic = classic_expansions(&test, Connectivity::Eight);
    let reduction = 1.0 - learned / classic;
    let summary = format!(
        "loss {initial:.4} -> {:.4} (x{:.3}) over {} epochs, best epoch {}, test expansions {learned:.2} vs classic {classic:.2} ({:.1}% fewer), {:.1?}",
        last.train_loss,
        last.train_loss / initial,
        last.epoch,
        out.best_epoch,
        100.0 * reduction,
        started.elapsed()
    );
    check(last.train_loss < 0.7 * initial, || format!("(a) failed: {summary}"))?;
    check(reduction >= 0.10, || format!("(b) failed: {summary}"))?;
    within(started.elapsed(), Duration::from_secs(15 * 60))?;
    Ok(summary)
}

fn variable_size() -> Outcome {
    let data = SyntheticConfig {
        problems: 24,
        val: 4,
        test: 0,
        seed: 6,
        ..SyntheticConfig::default()
    };
    let ds = synthetic_dataset(&data, Exec::default()).map_err(|e| e.to_string())?;
    let model = ModelConfig {
        patch_size: 4,
        hidden_dim: 16,
        blocks: 1,
        heads: 2,
        n_max: 128,
        seed: 6,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = train(&ds, model, &cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("checkpoint.json");
    out.best.save(&path).map_err(|e| e.to_string())?;
    let params = ModelParams::load(&path).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for (h, w) in [(17, 17), (32, 32), (41, 29)] {
        let map = Arc::new(random_map(h, w, 0.15, &mut rng));
        let problem = sample_problem(&map, 0.3, &mut rng).map_err(|e| e.to_string())?;
        let g = params.guidance(&problem).map_err(|e| format!("{h}x{w}: {e}"))?;
        check(g.height() == h && g.width() == w, || format!("{h}x{w}: got {}x{}", g.height(), g.width()))?;
    }
    let small = Arc::new(OccupancyMap::free(5, 5));
    let seq = patchify(&small, 2);
    check(seq.len() == 9, || format!("5x5/S=2 gave {} patches", seq.len()))?;
    let s2 = ModelParams::init(ModelConfig {
        patch_size: 2,
        hidden_dim: 8,
        blocks: 1,
        heads: 2,
        n_max: 16,
        ..ModelConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let problem = PlanningProblem::new(small, Cell::new(0, 0), Cell::new(4, 4)).map_err(|e| e.to_string())?;
    let g = s2.guidance(&problem).map_err(|e| e.to_string())?;
    check(g.height() == 5 && g.width() == 5, || "5x5 output not cropped".into())?;
    Ok("17x17, 32x32, 41x29 from one checkpoint; 5x5/S=2 -> 9 patches, 5x5 output".into())
}

fn threshold_rule() -> Outcome {
    let probs: Vec<i32> = (0..=100).collect();
    let grid = ProbabilisticGrid::new(1, 101, probs.clone()).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for t in [0, 50, 100] {
        let map = from_probabilistic(&grid, t).map_err(|e| e.to_string())?;
        for (c, &p) in probs.iter().enumerate() {
            let blocked = map.is_blocked(Cell::new(0, c));
            check(blocked == (p >= t), || format!("p={p} t={t}: blocked={blocked}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} combinations"))
}

fn orientation_modes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a: (f64, f64) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let b: (f64, f64) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let expected = ((a.0 * b.0 + a.1 * b.1) / ((a.0 * a.0 + a.1 * a.1).sqrt() * (b.0 * b.0 + b.1 * b.1).sqrt()))
            .clamp(-1.0, 1.0)
            .acos();
        let err = (literal_angle(a, b) - expected).abs();
        worst = worst.max(err);
        check(err <= 1e-12, || format!("literal {a:?} {b:?}: off by {err:e}"))?;
    }
    // literal mode on cell paths away from the origin
    let path: Vec<Cell> = (0..6).map(|i| Cell::new(3 + i % 2, 2 + i)).collect();
    let poses = orient_with(&path, 0.0, 0.0, OrientMode::Literal).map_err(|e| e.to_string())?;
    for i in 1..path.len() - 1 {
        let (p, q) = (world(path[i]), world(path[i + 1]));
        let expected = ((p.0 * q.0 + p.1 * q.1) / (p.0.hypot(p.1) * q.0.hypot(q.1))).acos();
        check((poses.poses[i].theta - expected).abs() <= 1e-12, || format!("literal pose {i}"))?;
    }
    let straight: Vec<Cell> = (0..10).map(|c| Cell::new(4, c)).collect();
    let poses = orient_with(&straight, 0.0, 0.0, OrientMode::Heading).map_err(|e| e.to_string())?;
    check(poses.poses.iter().all(|p| p.theta == 0.0), || "straight +x path not at 0 rad".into())?;
    for k in 0..100 {
        let len = rng.random_range(3..30);
        let mut cur = Cell::new(rng.random_range(10..90), rng.random_range(10..90));
        let mut path = vec![cur];
        while path.len() < len {
            let (dr, dc): (i64, i64) = (rng.random_range(-1..=1), rng.random_range(-1..=1));
            if dr == 0 && dc == 0 {
                continue;
            }
            cur = Cell::new((cur.row as i64 + dr) as usize, (cur.col as i64 + dc) as usize);
            path.push(cur);
        }
        let poses = orient_with(&path, 0.5, -0.5, OrientMode::Heading).map_err(|e| e.to_string())?;
        for i in 1..path.len() - 1 {
            let expected = atan2_heading(path[i], path[i + 1]);
            let got = poses.poses[i].theta;
            check((got - expected).abs() <= 1e-12 && got == heading(path[i], path[i + 1]), || {
                format!("path {k} pose {i}: {got} vs {expected}")
            })?;
        }
    }
    Ok(format!("literal worst err {worst:.1e}; heading: straight 0 rad, 100 paths match atan2"))
}

fn strip_wall_csv(text: &str) -> String {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !header[i].starts_with("wall_")).collect();
    std::iter::once(header)
        .chain(lines.map(|l| l.split(',').collect()))
        .map(|cols| keep.iter().map(|&i| cols[i]).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

fn strip_wall_json(text: &str) -> Result<serde_json::Value, String> {
    let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    for m in v["maps"].as_array_mut().ok_or("no maps")? {
        for p in m["planners"].as_array_mut().ok_or("no planners")? {
            let obj = p.as_object_mut().ok_or("planner not an object")?;
            obj.retain(|k, _| !k.starts_with("wall_"));
        }
    }
    Ok(v)
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let code = cli::run(std::iter::once("vitastar").chain(args.iter().copied()));
    check(code == cli::EXIT_OK, || format!("`vitastar {}` exited {code}", args.join(" ")))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let config = root.join("config.json");
    fs::write(
        &config,
        r#"{"model": {"patch_size": 4, "hidden_dim": 8, "blocks": 1, "heads": 2, "n_max": 64},
            "data": {"problems": 20, "val": 4, "test": 4}}"#,
    )
    .map_err(|e| e.to_string())?;
    let config = config.to_str().ok_or("path")?;
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
    let mut metrics = Vec::new();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        let train_dir = out.join("train");
        let bench_dir = out.join("bench");
        run_cli(&[
            "train", "--config", config, "--epochs", "3", "--seed", "11", "--out", train_dir.to_str().ok_or("path")?,
        ])?;
        let ckpt = train_dir.join("checkpoint.json");
        run_cli(&[
            "bench",
            "--synthetic",
            "2",
            "--trials",
            "5",
            "--seed",
            "11",
            "--checkpoint",
            ckpt.to_str().ok_or("path")?,
            "--out",
            bench_dir.to_str().ok_or("path")?,
        ])?;
        metrics.push(fs::read(train_dir.join("metrics.csv")).map_err(|e| e.to_string())?);
        reports.push((
            strip_wall_csv(&read(&bench_dir.join("report.csv"))?),
            strip_wall_json(&read(&bench_dir.join("report.json"))?)?,
        ));
    }
    check(metrics[0] == metrics[1], || "metrics.csv differs between runs".into())?;
    check(reports[0].0 == reports[1].0, || "report.csv differs between runs".into())?;
    check(reports[0].1 == reports[1].1, || "report.json differs between runs".into())?;
    Ok("metrics.csv, report.csv and report.json identical across two runs".into())
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("1 oracle equivalence", oracle_equivalence),
        ("2 uniform-guidance equivalence", uniform_equivalence),
        ("3 selection normalization", normalization),
        ("4 gradient fidelity", gradient_fidelity),
        ("5 training efficacy", training_efficacy),
        ("6 variable-size contract", variable_size),
        ("7 threshold rule", threshold_rule),
        ("8 orientation modes", orientation_modes),
        ("9 determinism", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
