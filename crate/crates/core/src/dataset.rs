//! Trajectory datasets and the (history window, action) pairs derived from
//! them.
//!
//! File format (JSON, `version` 1):
//!
//! ```text
//! {
//!   "format": "gantrack-dataset", "version": 1,
//!   "system": "lotka-volterra" | "constant-acceleration",
//!   "state_dim": 2, "dt": 0.05, "history_steps": 10, "horizon_steps": 40,
//!   "seed": 7, "ranges": {"param": [3, 5], "initial": [1, 3]} | null,
//!   "cases": [{"id": 0, "params": [...], "initial": [...],
//!              "trajectory": [[x, y], ...], "actions": [[dx, dy], ...]}],
//!   "pairs": [{"case": 0, "t": 10}, ...]
//! }
//! ```
//!
//! A pair `{case, t}` has history `trajectory[t - history_steps ..= t]` and
//! action `actions[t]`, with `trajectory[t + 1] == trajectory[t] + actions[t]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lvsys::SamplingRanges;
use crate::par::{derive_rng, SimRng};

pub const DATASET_FORMAT: &str = "gantrack-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("dataset version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    LotkaVolterra,
    ConstantAcceleration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: usize,
    pub params: Vec<f64>,
    pub initial: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairIndex {
    pub case: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub format: String,
    pub version: u32,
    pub system: SystemKind,
    pub state_dim: usize,
    pub dt: f64,
    pub history_steps: usize,
    pub horizon_steps: usize,
    pub seed: u64,
    pub ranges: Option<SamplingRanges>,
    pub cases: Vec<Case>,
    pub pairs: Vec<PairIndex>,
}

impl TrajectoryDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        system: SystemKind,
        state_dim: usize,
        dt: f64,
        history_steps: usize,
        horizon_steps: usize,
        seed: u64,
        ranges: Option<SamplingRanges>,
        cases: Vec<Case>,
    ) -> Self {
        let pairs = cases
            .iter()
            .enumerate()
            .flat_map(|(ci, case)| {
                (history_steps..case.actions.len()).map(move |t| PairIndex { case: ci, t })
            })
            .collect();
        TrajectoryDataset {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            system,
            state_dim,
            dt,
            history_steps,
            horizon_steps,
            seed,
            ranges,
            cases,
            pairs,
        }
    }

    pub fn window_len(&self) -> usize {
        self.history_steps + 1
    }

    /// History window of a pair, oldest state first, flattened.
    pub fn history(&self, pair: PairIndex) -> Vec<f64> {
        let case = &self.cases[pair.case];
        case.trajectory[pair.t - self.history_steps..=pair.t]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn action(&self, pair: PairIndex) -> &[f64] {
        &self.cases[pair.case].actions[pair.t]
    }

    /// Pairs drawn from the given cases, in case order.
    pub fn pairs_for_cases(&self, cases: &[usize]) -> PairSet {
        let mut set = PairSet::new(self.window_len(), self.state_dim);
        for &ci in cases {
            for p in self.pairs.iter().filter(|p| p.case == ci) {
                set.push(&self.history(*p), self.action(*p));
            }
        }
        set
    }

    pub fn all_pairs(&self) -> PairSet {
        let ids: Vec<usize> = (0..self.cases.len()).collect();
        self.pairs_for_cases(&ids)
    }

    /// Splits case indices into a training and a test part; the first
    /// `train_fraction` of the cases (rounded, at least one) trains.
    pub fn split_cases(&self, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.cases.len();
        let k = ((n as f64 * train_fraction).round() as usize).clamp(1.min(n), n);
        ((0..k).collect(), (k..n).collect())
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.format != DATASET_FORMAT {
            return Err(DatasetError::Malformed(format!("unknown format tag {:?}", self.format)));
        }
        if self.version != DATASET_VERSION {
            return Err(DatasetError::Version {
                found: self.version,
                expected: DATASET_VERSION,
            });
        }
        for case in &self.cases {
            if case.trajectory.len() != case.actions.len() + 1 {
                return Err(DatasetError::Malformed(format!(
                    "case {} has {} states but {} actions",
                    case.id,
                    case.trajectory.len(),
                    case.actions.len()
                )));
            }
            if case
                .trajectory
                .iter()
                .chain(&case.actions)
                .any(|s| s.len() != self.state_dim)
            {
                return Err(DatasetError::Malformed(format!("case {} has wrong state dimension", case.id)));
            }
        }
        for p in &self.pairs {
            let ok = p.case < self.cases.len()
                && p.t >= self.history_steps
                && p.t < self.cases[p.case].actions.len();
            if !ok {
                return Err(DatasetError::Malformed(format!("pair {p:?} is out of range")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string(self).map_err(|e| DatasetError::Malformed(e.to_string()))?;
        fs::write(path, text).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        // check the version before the full schema so old files report it
        let header: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| DatasetError::Malformed(e.to_string()))?;
        if let Some(v) = header.get("version").and_then(|v| v.as_u64()) {
            if v != DATASET_VERSION as u64 {
                return Err(DatasetError::Version {
                    found: v as u32,
                    expected: DATASET_VERSION,
                });
            }
        }
        let ds: TrajectoryDataset =
            serde_json::from_value(header).map_err(|e| DatasetError::Malformed(e.to_string()))?;
        ds.validate()?;
        Ok(ds)
    }
}

/// Flattened (history window, action) pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSet {
    pub window_len: usize,
    pub dim: usize,
    /// `len() × window_len × dim`, oldest state first in each window.
    pub histories: Vec<f64>,
    /// `len() × dim`.
    pub actions: Vec<f64>,
}

impl PairSet {
    pub fn new(window_len: usize, dim: usize) -> Self {
        PairSet {
            window_len,
            dim,
            histories: Vec::new(),
            actions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, history: &[f64], action: &[f64]) {
        debug_assert_eq!(history.len(), self.window_len * self.dim);
        debug_assert_eq!(action.len(), self.dim);
        self.histories.extend_from_slice(history);
        self.actions.extend_from_slice(action);
    }

    pub fn history(&self, i: usize) -> &[f64] {
        let w = self.window_len * self.dim;
        &self.histories[i * w..(i + 1) * w]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> PairSet {
        let mut out = PairSet::new(self.window_len, self.dim);
        for &i in indices {
            out.push(self.history(i), self.action(i));
        }
        out
    }

    /// Holds out `count` randomly chosen pairs; returns `(rest, held_out)`.
    pub fn split_holdout(&self, count: usize, rng: &mut SimRng) -> (PairSet, PairSet) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let count = count.min(self.len());
        let (held, rest) = idx.split_at(count);
        let mut rest = rest.to_vec();
        rest.sort_unstable();
        let mut held = held.to_vec();
        held.sort_unstable();
        (self.subset(&rest), self.subset(&held))
    }
}

/// Trajectories with constant per-axis acceleration,
/// `s(t) = p₀ + v₀ t + ½ a t²`, built as running sums of their increments.
pub fn constant_acceleration_dataset(
    count: usize,
    seed: u64,
    dt: f64,
    history_steps: usize,
    horizon_steps: usize,
) -> Result<TrajectoryDataset, DatasetError> {
    if count == 0 || horizon_steps == 0 || !(dt > 0.0) {
        return Err(DatasetError::Invalid(
            "count and horizon must be positive and dt > 0".into(),
        ));
    }
    let dim = 2;
    let steps = history_steps + horizon_steps;
    let cases = (0..count)
        .map(|i| {
            let mut rng = derive_rng(seed, &[i as u64]);
            let p0: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v0: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let acc: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mut trajectory = vec![p0.clone()];
            let mut actions = Vec::with_capacity(steps);
            for k in 0..steps {
                let t0 = k as f64 * dt;
                let t1 = (k + 1) as f64 * dt;
                let inc: Vec<f64> = (0..dim)
                    .map(|j| v0[j] * (t1 - t0) + 0.5 * acc[j] * (t1 * t1 - t0 * t0))
                    .collect();
                let next: Vec<f64> = trajectory[k].iter().zip(&inc).map(|(s, a)| s + a).collect();
                actions.push(inc);
                trajectory.push(next);
            }
            let params = v0.iter().chain(&acc).copied().collect();
            Case {
                id: i,
                params,
                initial: p0,
                trajectory,
                actions,
            }
        })
        .collect();
    Ok(TrajectoryDataset::new(
        SystemKind::ConstantAcceleration,
        dim,
        dt,
        history_steps,
        horizon_steps,
        seed,
        None,
        cases,
    ))
}
