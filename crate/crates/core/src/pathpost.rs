//! Orientation filtering of grid paths and pose-path files.
//!
//! Grid cells map to the plane as `x = col`, `y = -row`. Interior waypoints
//! get an orientation; the first and last keep the orientations supplied by
//! the caller.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::Cell;

#[derive(Debug, Error)]
pub enum PathPostError {
    #[error("a path needs at least two waypoints, got {0}")]
    TooShort(usize),
    #[error("waypoints {0} and {next} coincide", next = .0 + 1)]
    DegenerateSegment(usize),
    #[error("waypoint {0} sits at the origin, its angle to a neighbour is undefined")]
    ZeroPosition(usize),
    #[error("orientation {0} is outside (-pi, pi]")]
    OrientationOutOfRange(f64),
    #[error("unknown path format {0:?}, expected .json or .csv")]
    UnknownFormat(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// How interior orientations are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientMode {
    /// Planar angle of the displacement to the next waypoint.
    #[default]
    Heading,
    /// `acos(v_i·v_{i+1} / (|v_i||v_{i+1}|))` on the waypoint position
    /// vectors themselves.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosePath {
    pub cells: Vec<Cell>,
    pub poses: Vec<Pose>,
}

impl PosePath {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

pub fn world(c: Cell) -> (f64, f64) {
    (c.col as f64, -(c.row as f64))
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Heading from `a` to `b`.
pub fn heading(a: Cell, b: Cell) -> f64 {
    let dx = b.col as i64 - a.col as i64;
    let dy = a.row as i64 - b.row as i64;
    wrap_angle((dy as f64).atan2(dx as f64))
}

/// Angle between the position vectors of `a` and `b`.
pub fn literal_angle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dot = a.0 * b.0 + a.1 * b.1;
    let norm = a.0.hypot(a.1) * b.0.hypot(b.1);
    (dot / norm).clamp(-1.0, 1.0).acos()
}

pub fn orient(path: &[Cell], start_theta: f64, goal_theta: f64) -> Result<PosePath, PathPostError> {
    orient_with(path, start_theta, goal_theta, OrientMode::Heading)
}

pub fn orient_with(
    path: &[Cell],
    start_theta: f64,
    goal_theta: f64,
    mode: OrientMode,
) -> Result<PosePath, PathPostError> {
    if path.len() < 2 {
        return Err(PathPostError::TooShort(path.len()));
    }
    for t in [start_theta, goal_theta] {
        if !(t > -PI && t <= PI) {
            return Err(PathPostError::OrientationOutOfRange(t));
        }
    }
    if let Some(i) = path.windows(2).position(|w| w[0] == w[1]) {
        return Err(PathPostError::DegenerateSegment(i));
    }
    let last = path.len() - 1;
    let mut poses = Vec::with_capacity(path.len());
    for (i, &c) in path.iter().enumerate() {
        let (x, y) = world(c);
        let theta = if i == 0 {
            start_theta
        } else if i == last {
            goal_theta
        } else {
            match mode {
                OrientMode::Heading => heading(c, path[i + 1]),
                OrientMode::Literal => {
                    for j in [i, i + 1] {
                        if path[j] == Cell::new(0, 0) {
                            return Err(PathPostError::ZeroPosition(j));
                        }
                    }
                    literal_angle((x, y), world(path[i + 1]))
                }
            }
        };
        poses.push(Pose { x, y, theta });
    }
    Ok(PosePath {
        cells: path.to_vec(),
        poses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathFormat {
    Json,
    Csv,
}

impl PathFormat {
    pub fn from_path(path: &Path) -> Result<Self, PathPostError> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("json") => Ok(Self::Json),
            Some("csv") => Ok(Self::Csv),
            other => Err(PathPostError::UnknownFormat(other.unwrap_or("").to_string())),
        }
    }
}

/// Renders poses as JSON `[{x, y, theta}, ...]` or CSV `x,y,theta`. CSV
/// numbers carry 17 significant digits.
pub fn render_poses(poses: &[Pose], format: PathFormat) -> Result<String, PathPostError> {
    match format {
        PathFormat::Json => Ok(serde_json::to_string_pretty(poses)?),
        PathFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["x", "y", "theta"])?;
            for p in poses {
                w.write_record([
                    format!("{:.16e}", p.x),
                    format!("{:.16e}", p.y),
                    format!("{:.16e}", p.theta),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| e.into_error())?;
            Ok(String::from_utf8(bytes).expect("ascii output"))
        }
    }
}

pub fn parse_poses(text: &str, format: PathFormat) -> Result<Vec<Pose>, PathPostError> {
    match format {
        PathFormat::Json => Ok(serde_json::from_str(text)?),
        PathFormat::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            Ok(r.deserialize().collect::<Result<Vec<Pose>, _>>()?)
        }
    }
}

pub fn export_path(pose_path: &PosePath, path: &Path, format: PathFormat) -> Result<(), PathPostError> {
    fs::write(path, render_poses(&pose_path.poses, format)?)?;
    Ok(())
}

pub fn read_path(path: &Path, format: PathFormat) -> Result<Vec<Pose>, PathPostError> {
    parse_poses(&fs::read_to_string(path)?, format)
}
