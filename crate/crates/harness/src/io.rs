//! Files: JSON-lines datasets, JSON documents and the per-replicate CSV.
//!
//! Floats are written in the shortest decimal form that parses back to the
//! same `f64` (never more than 17 significant digits), and parsed with
//! correct rounding, so every save/load pair is lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use qpilab_core::envs::FeatureMap;
use qpilab_core::mdp::{Dataset, StagedMdp, Step, Trajectory};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result, StageContext};
use crate::experiment::Row;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryLine {
    /// `[state, action, reward]` per stage.
    steps: Vec<(usize, usize, f64)>,
    features: Vec<Vec<Vec<f64>>>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// One trajectory per line; an empty dataset gives an empty file.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for t in &dataset.trajectories {
        let line = TrajectoryLine {
            steps: t
                .steps
                .iter()
                .map(|s| (s.state, s.action, s.reward))
                .collect(),
            features: t.features.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut trajectories = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let parse_err = |message: String| HarnessError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: TrajectoryLine =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.features.len() != rec.steps.len() {
            return Err(parse_err(format!(
                "{} steps but features for {} stages",
                rec.steps.len(),
                rec.features.len()
            )));
        }
        if let Some(first) = trajectories.first().map(|t: &Trajectory| t.steps.len()) {
            if first != rec.steps.len() {
                return Err(parse_err(format!(
                    "trajectory length {} differs from {first}",
                    rec.steps.len()
                )));
            }
        }
        for (k, &(_, a, r)) in rec.steps.iter().enumerate() {
            if a >= rec.features[k].len() {
                return Err(parse_err(format!(
                    "action {a} at stage {k} has no feature row"
                )));
            }
            if !r.is_finite() {
                return Err(parse_err(format!("non-finite reward at stage {k}")));
            }
        }
        trajectories.push(Trajectory {
            steps: rec
                .steps
                .into_iter()
                .map(|(state, action, reward)| Step {
                    state,
                    action,
                    reward,
                })
                .collect(),
            features: rec.features,
        });
    }
    Ok(Dataset { trajectories })
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    Ok(serde_json::from_reader(reader)?)
}

/// An environment on disk: the MDP and its feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvFile {
    pub mdp: StagedMdp,
    pub features: FeatureMap,
}

pub fn load_env(path: &Path) -> Result<EnvFile> {
    let env: EnvFile = load_json(path)?;
    env.mdp.validate().stage("loading environment")?;
    env.features
        .check_against(&env.mdp)
        .stage("loading environment")?;
    Ok(env)
}

/// Replicate rows; undefined gaps and guesses are written as empty fields.
pub fn write_rows_csv(rows: &[Row], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(Row::COLUMNS)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != Row::COLUMNS {
        return Err(HarnessError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected columns {:?}, found {header:?}", Row::COLUMNS),
        });
    }
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<Row>, _>>()?)
}
