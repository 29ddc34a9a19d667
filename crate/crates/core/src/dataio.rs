//! Trajectory CSV ingestion and constant-acceleration Kalman smoothing.
//!
//! CSV schema: a header row with `agent_id,t,x,y` and optionally `vx,vy`,
//! in any column order. `t` is in seconds and must increase strictly within
//! each agent. Agents are returned in order of first appearance.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing required column {0:?}")]
    MissingColumn(String),
    #[error("line {line}: column {column:?} holds {value:?}, which is not a number")]
    Parse { line: u64, column: String, value: String },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("agent {agent}: timestamp {t} at line {line} does not increase")]
    NonMonotone { agent: String, t: f64, line: u64 },
    #[error("agent {agent}: innovation covariance is not positive at step {step}")]
    NotPositive { agent: String, step: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub vx: Option<f64>,
    pub vy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub agent_id: String,
    pub records: Vec<RawRecord>,
}

pub fn ingest_csv(path: &Path) -> Result<Vec<AgentTrack>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ingest_reader(file)
}

pub fn ingest_reader<R: std::io::Read>(reader: R) -> Result<Vec<AgentTrack>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| DataError::MissingColumn(name.to_string()));
    let (ia, it, ix, iy) = (need("agent_id")?, need("t")?, need("x")?, need("y")?);
    let (ivx, ivy) = (col("vx"), col("vy"));
    if ivx.is_some() != ivy.is_some() {
        return Err(DataError::MissingColumn(if ivx.is_some() { "vy" } else { "vx" }.into()));
    }
    let mut tracks: Vec<AgentTrack> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<f64, DataError> {
            let raw = rec.get(i).ok_or_else(|| DataError::Malformed {
                line,
                message: format!("missing field {name}"),
            })?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    line,
                    column: name.to_string(),
                    value: raw.to_string(),
                })
        };
        let agent = rec
            .get(ia)
            .ok_or_else(|| DataError::Malformed {
                line,
                message: "missing agent_id".into(),
            })?
            .to_string();
        let r = RawRecord {
            t: field(it, "t")?,
            x: field(ix, "x")?,
            y: field(iy, "y")?,
            vx: ivx.map(|i| field(i, "vx")).transpose()?,
            vy: ivy.map(|i| field(i, "vy")).transpose()?,
        };
        let track = match tracks.iter_mut().position(|a| a.agent_id == agent) {
            Some(k) => &mut tracks[k],
            None => {
                tracks.push(AgentTrack {
                    agent_id: agent.clone(),
                    records: Vec::new(),
                });
                tracks.last_mut().unwrap()
            }
        };
        if let Some(prev) = track.records.last() {
            if r.t <= prev.t {
                return Err(DataError::NonMonotone { agent, t: r.t, line });
            }
        }
        track.records.push(r);
    }
    Ok(tracks)
}

/// Writes tracks in the ingestion schema; velocity columns appear when every
/// record carries them.
pub fn export_csv(tracks: &[AgentTrack], path: &Path) -> Result<(), DataError> {
    let with_v = tracks
        .iter()
        .flat_map(|a| &a.records)
        .all(|r| r.vx.is_some() && r.vy.is_some());
    let mut w = csv::Writer::from_path(path)?;
    if with_v {
        w.write_record(["agent_id", "t", "x", "y", "vx", "vy"])?;
    } else {
        w.write_record(["agent_id", "t", "x", "y"])?;
    }
    for a in tracks {
        for r in &a.records {
            let mut row = vec![a.agent_id.clone(), r.t.to_string(), r.x.to_string(), r.y.to_string()];
            if with_v {
                row.push(r.vx.unwrap().to_string());
                row.push(r.vy.unwrap().to_string());
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanConfig {
    /// Spectral density of the white jerk driving each axis.
    pub jerk_density: f64,
    /// Variance of each position measurement.
    pub position_var: f64,
    /// Variance of each velocity measurement, when the data has them.
    pub velocity_var: f64,
    /// Initial variance of velocity and acceleration.
    pub initial_var: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig {
            jerk_density: 1.0,
            position_var: 0.25,
            velocity_var: 1.0,
            initial_var: 100.0,
        }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(self.jerk_density) && ok(self.position_var) && ok(self.velocity_var) && ok(self.initial_var)) {
            return Err(DataError::Invalid("Kalman noise parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Filtered `(position, velocity, acceleration)` per axis at one timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedPoint {
    pub t: f64,
    pub x: [f64; 3],
    pub y: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTrack {
    pub agent_id: String,
    pub points: Vec<SmoothedPoint>,
}

fn transition(dt: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, dt, 0.5 * dt * dt, 0.0, 1.0, dt, 0.0, 0.0, 1.0)
}

fn process_noise(dt: f64, q: f64) -> Matrix3<f64> {
    let (d2, d3, d4, d5) = (dt * dt, dt.powi(3), dt.powi(4), dt.powi(5));
    Matrix3::new(
        d5 / 20.0,
        d4 / 8.0,
        d3 / 6.0,
        d4 / 8.0,
        d3 / 3.0,
        d2 / 2.0,
        d3 / 6.0,
        d2 / 2.0,
        dt,
    ) * q
}

/// Forward Kalman filter on one axis. `pos` and optional `vel` are the
/// measurements at times `ts`.
fn filter_axis(
    ts: &[f64],
    pos: &[f64],
    vel: Option<&[f64]>,
    cfg: &KalmanConfig,
    agent: &str,
) -> Result<Vec<[f64; 3]>, DataError> {
    let mut m = Vector3::new(pos[0], vel.map_or(0.0, |v| v[0]), 0.0);
    let mut p = Matrix3::from_diagonal(&Vector3::new(
        cfg.position_var,
        if vel.is_some() { cfg.velocity_var } else { cfg.initial_var },
        cfg.initial_var,
    ));
    let mut out = vec![[m[0], m[1], m[2]]];
    for k in 1..ts.len() {
        let dt = ts[k] - ts[k - 1];
        let f = transition(dt);
        m = f * m;
        p = f * p * f.transpose() + process_noise(dt, cfg.jerk_density);
        // sequential scalar updates: position, then velocity
        let mut updates = vec![(0usize, pos[k], cfg.position_var)];
        if let Some(v) = vel {
            updates.push((1, v[k], cfg.velocity_var));
        }
        for (row, z, r) in updates {
            let s = p[(row, row)] + r;
            if !(s > 0.0 && s.is_finite()) {
                return Err(DataError::NotPositive {
                    agent: agent.to_string(),
                    step: k,
                });
            }
            let gain: Vector3<f64> = p.column(row) / s;
            let innov = z - m[row];
            m += gain * innov;
            let h_p = p.row(row).into_owned();
            p -= gain * h_p;
            p = (p + p.transpose()) * 0.5;
        }
        out.push([m[0], m[1], m[2]]);
    }
    Ok(out)
}

/// Filters every agent independently; output follows input order.
pub fn smooth(tracks: &[AgentTrack], cfg: &KalmanConfig) -> Result<Vec<SmoothedTrack>, DataError> {
    cfg.validate()?;
    tracks
        .iter()
        .map(|a| {
            if a.records.len() < 2 {
                return Err(DataError::Invalid(format!(
                    "agent {} has {} samples; at least 2 are needed",
                    a.agent_id,
                    a.records.len()
                )));
            }
            let ts: Vec<f64> = a.records.iter().map(|r| r.t).collect();
            let xs: Vec<f64> = a.records.iter().map(|r| r.x).collect();
            let ys: Vec<f64> = a.records.iter().map(|r| r.y).collect();
            let has_v = a.records.iter().all(|r| r.vx.is_some() && r.vy.is_some());
            let vx: Option<Vec<f64>> = has_v.then(|| a.records.iter().map(|r| r.vx.unwrap()).collect());
            let vy: Option<Vec<f64>> = has_v.then(|| a.records.iter().map(|r| r.vy.unwrap()).collect());
            let fx = filter_axis(&ts, &xs, vx.as_deref(), cfg, &a.agent_id)?;
            let fy = filter_axis(&ts, &ys, vy.as_deref(), cfg, &a.agent_id)?;
            Ok(SmoothedTrack {
                agent_id: a.agent_id.clone(),
                points: ts
                    .iter()
                    .zip(fx.into_iter().zip(fy))
                    .map(|(&t, (x, y))| SmoothedPoint { t, x, y })
                    .collect(),
            })
        })
        .collect()
}

pub const SMOOTHED_HEADER: &str = "agent_id,t,x,y,vx,vy,ax,ay";

pub fn export_smoothed(tracks: &[SmoothedTrack], path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SMOOTHED_HEADER.split(','))?;
    for a in tracks {
        for p in &a.points {
            w.write_record([
                a.agent_id.clone(),
                p.t.to_string(),
                p.x[0].to_string(),
                p.y[0].to_string(),
                p.x[1].to_string(),
                p.y[1].to_string(),
                p.x[2].to_string(),
                p.y[2].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
