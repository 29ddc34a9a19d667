//! Autoregressive rollouts, error metrics and distribution comparison.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::TrajectoryDataset;
use crate::features::WindowBatch;
use crate::gameopt::TrainingLog;
use crate::lvsys::{draw_until_valid, history_window, integrate, Direction, LvError, LvParams, SamplingRanges};
use crate::par::{derive_rng, map_indexed, Execution};
use crate::policy::{ActionModel, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("metric needs at least one value")]
    Empty,
    #[error("length mismatch: {0} predicted vs {1} reference values")]
    LengthMismatch(usize, usize),
    #[error("rollout {rollout} of case {case_id} became non-finite at step {step}")]
    NonFinite { case_id: usize, rollout: usize, step: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    System(#[from] LvError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Mean absolute difference over all components.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Root mean squared Euclidean error between two state sequences.
pub fn rmse(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let sq: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Exact first Wasserstein distance between two empirical measures on the
/// line, `∫ |F(t) − G(t)| dt`.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        let fa = i as f64 / na;
        let fb = j as f64 / nb;
        total += (fa - fb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if values.is_empty() {
        return Histogram {
            edges: vec![0.0, 1.0],
            counts: vec![0],
        };
    }
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl PoolStats {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        PoolStats {
            count: values.len(),
            mean,
            std,
            histogram: histogram(&values, 20),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub variable: String,
    pub predicted: PoolStats,
    pub truth: PoolStats,
    pub wasserstein1: f64,
}

impl DistributionSummary {
    pub fn new(variable: &str, predicted: Vec<f64>, truth: Vec<f64>) -> Result<Self, EvalError> {
        let w = wasserstein1(&predicted, &truth)?;
        Ok(DistributionSummary {
            variable: variable.to_string(),
            predicted: PoolStats::new(predicted),
            truth: PoolStats::new(truth),
            wasserstein1: w,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub case_id: usize,
    pub noise_seed: u64,
    /// `horizon + 1` states starting at the last history state.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

/// Runs `histories.len()` rollouts in lockstep, one batched model call per
/// step. All histories must share a length; each ends at the rollout's
/// starting state.
pub fn rollout_batch<M: ActionModel + ?Sized>(
    model: &M,
    histories: &[Vec<Vec<f64>>],
    horizon: usize,
    noise_seed: u64,
    case_id: usize,
) -> Result<Vec<RolloutResult>, EvalError> {
    let batch = histories.len();
    let Some(first) = histories.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    let dim = first.first().map_or(0, Vec::len);
    if len == 0 || histories.iter().any(|h| h.len() != len || h.iter().any(|s| s.len() != dim)) {
        return Err(EvalError::Invalid("histories must be non-empty and share one shape".into()));
    }
    let mut rng = derive_rng(noise_seed, &[]);
    let mut data: Vec<f64> = histories.iter().flatten().flatten().copied().collect();
    let mut out: Vec<RolloutResult> = histories
        .iter()
        .map(|h| RolloutResult {
            case_id,
            noise_seed,
            states: vec![h[len - 1].clone()],
            actions: Vec::with_capacity(horizon),
        })
        .collect();
    for step in 1..=horizon {
        let windows = WindowBatch::new(batch, len, dim, data);
        let actions = model.sample_actions(&windows, &mut rng)?;
        if actions.len() != batch * dim {
            return Err(EvalError::Invalid(format!(
                "model returned {} values for {batch} windows of dimension {dim}",
                actions.len()
            )));
        }
        data = windows.data;
        for (b, r) in out.iter_mut().enumerate() {
            let a = &actions[b * dim..(b + 1) * dim];
            let next: Vec<f64> = r.states[step - 1].iter().zip(a).map(|(s, d)| s + d).collect();
            if !next.iter().all(|v| v.is_finite()) {
                return Err(EvalError::NonFinite {
                    case_id,
                    rollout: b,
                    step,
                });
            }
            let w = &mut data[b * len * dim..(b + 1) * len * dim];
            w.copy_within(dim.., 0);
            w[(len - 1) * dim..].copy_from_slice(&next);
            r.actions.push(a.to_vec());
            r.states.push(next);
        }
    }
    Ok(out)
}

pub fn rollout<M: ActionModel + ?Sized>(
    model: &M,
    history: &[Vec<f64>],
    horizon: usize,
    noise_seed: u64,
    case_id: usize,
) -> Result<RolloutResult, EvalError> {
    let mut r = rollout_batch(model, &[history.to_vec()], horizon, noise_seed, case_id)?;
    Ok(r.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// Values at the final step only.
    #[default]
    Terminal,
    /// Values at every predicted step.
    AllSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionConfig {
    /// Number of rate sets.
    pub m: usize,
    /// Rollouts per rate set.
    pub n: usize,
    pub horizon: usize,
    pub history_steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub pool: PoolMode,
    pub ranges: SamplingRanges,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    /// One summary per state variable (`x`, `y`).
    pub summaries: Vec<DistributionSummary>,
    /// Rollouts grouped by rate set.
    pub rollouts: Vec<Vec<RolloutResult>>,
    pub truths: Vec<Vec<Vec<f64>>>,
    pub params: Vec<LvParams>,
}

struct SetupCase {
    params: LvParams,
    history: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
}

/// Draws rate sets and initial states, runs `n` model rollouts from each
/// backward-integrated history and compares the pooled state values with
/// those of the true forward trajectories.
pub fn evaluate_distribution<F, M>(
    make_model: F,
    cfg: &DistributionConfig,
    exec: Execution,
) -> Result<DistributionReport, EvalError>
where
    F: Fn(&LvParams) -> M + Sync,
    M: ActionModel,
{
    if cfg.m == 0 || cfg.n == 0 || cfg.horizon == 0 {
        return Err(EvalError::Invalid("m, n and T must be at least 1".into()));
    }
    cfg.ranges.validate()?;
    let per_case = map_indexed(exec, cfg.m, |i| -> Result<_, EvalError> {
        let mut rng = derive_rng(cfg.seed, &[2, i as u64]);
        let setup = draw_until_valid(&mut rng, &cfg.ranges, |params, s0| {
            let truth = integrate(s0, &params, cfg.dt, cfg.horizon, Direction::Forward)?;
            let history = history_window(s0, &params, cfg.dt, cfg.history_steps)?;
            Ok(SetupCase {
                params,
                history: history.iter().map(|s| s.to_vec()).collect(),
                truth: truth.states.iter().map(|s| s.to_vec()).collect(),
            })
        })?;
        let model = make_model(&setup.params);
        let histories = vec![setup.history.clone(); cfg.n];
        let noise_seed = derive_seed(cfg.seed, i);
        let rollouts = rollout_batch(&model, &histories, cfg.horizon, noise_seed, i)?;
        Ok((setup, rollouts))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let pick = |states: &[Vec<f64>], j: usize| -> Vec<f64> {
        match cfg.pool {
            PoolMode::Terminal => vec![states[states.len() - 1][j]],
            PoolMode::AllSteps => states[1..].iter().map(|s| s[j]).collect(),
        }
    };
    let mut summaries = Vec::new();
    for (j, name) in ["x", "y"].iter().enumerate() {
        let pred: Vec<f64> = per_case
            .iter()
            .flat_map(|(_, rs)| rs.iter().flat_map(|r| pick(&r.states, j)))
            .collect();
        let truth: Vec<f64> = per_case.iter().flat_map(|(s, _)| pick(&s.truth, j)).collect();
        summaries.push(DistributionSummary::new(name, pred, truth)?);
    }
    let mut params = Vec::new();
    let mut truths = Vec::new();
    let mut rollouts = Vec::new();
    for (s, r) in per_case {
        params.push(s.params);
        truths.push(s.truth);
        rollouts.push(r);
    }
    Ok(DistributionReport {
        summaries,
        rollouts,
        truths,
        params,
    })
}

fn derive_seed(seed: u64, i: usize) -> u64 {
    use rand::RngCore;
    derive_rng(seed, &[3, i as u64]).next_u64()
}

/// Per-horizon position MAE of autoregressive rollouts started after the
/// first `history_steps` states of each listed case.
pub fn horizon_mae<M: ActionModel + ?Sized>(
    model: &M,
    dataset: &TrajectoryDataset,
    cases: &[usize],
    horizons: &[usize],
    seed: u64,
) -> Result<Vec<f64>, EvalError> {
    let max_h = horizons.iter().copied().max().unwrap_or(0);
    let th = dataset.history_steps;
    if cases.is_empty() || horizons.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut errs = vec![Vec::new(); horizons.len()];
    for &ci in cases {
        let case = &dataset.cases[ci];
        if case.trajectory.len() < th + max_h + 1 {
            return Err(EvalError::Invalid(format!(
                "case {} has {} states; history {} plus horizon {} needs {}",
                case.id,
                case.trajectory.len(),
                th,
                max_h,
                th + max_h + 1
            )));
        }
        let history = case.trajectory[..=th].to_vec();
        let r = rollout(model, &history, max_h, derive_seed(seed, ci), case.id)?;
        for (k, &h) in horizons.iter().enumerate() {
            errs[k].extend(r.states[h].iter().zip(&case.trajectory[th + h]).map(|(p, t)| p - t));
        }
    }
    errs.iter()
        .map(|e| mae(e, &vec![0.0; e.len()]))
        .collect()
}

pub const VIOLIN_HEADER: [&str; 3] = ["variable", "source", "value"];

/// Writes the raw pools as `variable,source,value` rows, predicted values
/// first within each variable.
pub fn export_violin_data(summaries: &[DistributionSummary], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(VIOLIN_HEADER)?;
    for s in summaries {
        for (source, pool) in [("predicted", &s.predicted), ("truth", &s.truth)] {
            for v in &pool.values {
                w.write_record([s.variable.as_str(), source, &v.to_string()])?;
            }
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads a violin export back as `(variable, source, value)` rows.
pub fn read_violin_data(path: &Path) -> Result<Vec<(String, String, f64)>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(VIOLIN_HEADER) {
        return Err(EvalError::Invalid("unexpected violin header".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: f64 = rec[2]
            .parse()
            .map_err(|_| EvalError::Invalid(format!("bad value {:?}", &rec[2])))?;
        out.push((rec[0].to_string(), rec[1].to_string(), v));
    }
    Ok(out)
}

/// Validation MAE per logged iteration, starting with iteration 0.
pub fn export_mae_curve(log: &TrainingLog, path: &Path) -> Result<(), EvalError> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut body = String::from("iteration,val_mae\n");
    body.push_str(&format!("0,{}\n", log.initial_val_mae));
    for r in &log.records {
        body.push_str(&format!("{},{}\n", r.iteration, r.val_mae));
    }
    f.write_all(body.as_bytes()).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// `case_id,rollout,t,x,y` rows; `rollout` numbers the repetitions of a
/// case.
pub fn export_rollouts(groups: &[Vec<RolloutResult>], path: &Path) -> Result<(), EvalError> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(f, "case_id,rollout,t,x,y").map_err(io_err(path))?;
    for group in groups {
        for (k, r) in group.iter().enumerate() {
            for (t, s) in r.states.iter().enumerate() {
                writeln!(f, "{},{},{},{},{}", r.case_id, k, t, s[0], s[1]).map_err(io_err(path))?;
            }
        }
    }
    f.flush().map_err(io_err(path))
}
