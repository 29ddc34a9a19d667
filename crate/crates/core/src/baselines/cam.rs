//! Constant-acceleration extrapolation.
//!
//! Each state component is fitted with a least-squares quadratic in the step
//! index over the whole history window and extended one step at a time.

use crate::features::WindowBatch;
use crate::par::SimRng;
use crate::policy::{ActionModel, ModelError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("constant-acceleration extrapolation needs at least 3 states, got {0}")]
pub struct HistoryTooShort(pub usize);

/// Value at step `len` of the least-squares quadratic through
/// `values[k]` at steps `k = 0..len`.
fn extrapolate_one(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    // centred abscissa keeps the normal equations well conditioned
    let c = (n - 1.0) / 2.0;
    let ts: Vec<f64> = (0..values.len()).map(|k| k as f64 - c).collect();
    let s2: f64 = ts.iter().map(|t| t * t).sum();
    let s4: f64 = ts.iter().map(|t| t.powi(4)).sum();
    let sy: f64 = values.iter().sum();
    let sty: f64 = ts.iter().zip(values).map(|(t, y)| t * y).sum();
    let st2y: f64 = ts.iter().zip(values).map(|(t, y)| t * t * y).sum();
    // odd moments vanish for a symmetric abscissa
    let slope = sty / s2;
    let det = n * s4 - s2 * s2;
    let curv = (n * st2y - s2 * sy) / det;
    let offset = (sy - curv * s2) / n;
    let t = n - c;
    offset + slope * t + curv * t * t
}

/// Next state after the window `history` (oldest first).
pub fn cam_next(history: &[Vec<f64>]) -> Result<Vec<f64>, HistoryTooShort> {
    if history.len() < 3 {
        return Err(HistoryTooShort(history.len()));
    }
    let dim = history[0].len();
    Ok((0..dim)
        .map(|j| {
            let v: Vec<f64> = history.iter().map(|s| s[j]).collect();
            extrapolate_one(&v)
        })
        .collect())
}

/// Extrapolates `horizon` states past the end of `history`, refitting on
/// the sliding window after each step.
pub fn cam_predict(history: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>, HistoryTooShort> {
    let mut window = history.to_vec();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let next = cam_next(&window)?;
        window.remove(0);
        window.push(next.clone());
        out.push(next);
    }
    Ok(out)
}

/// [`cam_next`] as an action model: the action is the extrapolated
/// increment.
#[derive(Debug, Clone, Copy)]
pub struct CamModel {
    pub dim: usize,
}

impl ActionModel for CamModel {
    fn action_dim(&self) -> usize {
        self.dim
    }

    fn sample_actions(&self, windows: &WindowBatch, _rng: &mut SimRng) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(windows.batch * windows.dim);
        for b in 0..windows.batch {
            let states: Vec<Vec<f64>> = (0..windows.len).map(|t| windows.state(b, t).to_vec()).collect();
            let next = cam_next(&states).map_err(|e| ModelError::Other(e.to_string()))?;
            out.extend(next.iter().zip(windows.last_state(b)).map(|(n, s)| n - s));
        }
        Ok(out)
    }
}
