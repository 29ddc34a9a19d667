//! Horizon-by-model position MAE table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::TrajectoryDataset;
use crate::evalsuite::{horizon_mae, EvalError};
use crate::policy::ActionModel;

pub const MODEL_COLUMNS: [&str; 5] = ["gan", "gmr", "p_mlp", "p_lstm", "cam"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonTable {
    /// Horizons in seconds.
    pub horizons: Vec<f64>,
    pub steps: Vec<usize>,
    pub models: Vec<String>,
    /// `mae[row][col]`: one row per horizon, one column per model.
    pub mae: Vec<Vec<f64>>,
}

/// Converts horizons in seconds to step counts at `steps_per_second`.
pub fn horizon_steps(horizons: &[f64], steps_per_second: f64) -> Result<Vec<usize>, EvalError> {
    if !(steps_per_second > 0.0 && steps_per_second.is_finite()) {
        return Err(EvalError::Invalid("steps per second must be positive".into()));
    }
    horizons
        .iter()
        .map(|&h| {
            let s = (h * steps_per_second).round();
            if !(s >= 1.0) {
                return Err(EvalError::Invalid(format!("horizon {h} s maps to fewer than one step")));
            }
            Ok(s as usize)
        })
        .collect()
}

/// Rollout MAE of every model on the listed cases at each horizon.
pub fn horizon_table(
    models: &[(&str, &dyn ActionModel)],
    dataset: &TrajectoryDataset,
    cases: &[usize],
    horizons: &[f64],
    steps_per_second: f64,
    seed: u64,
) -> Result<HorizonTable, EvalError> {
    let steps = horizon_steps(horizons, steps_per_second)?;
    let columns = models
        .iter()
        .map(|(_, m)| horizon_mae(*m, dataset, cases, &steps, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(HorizonTable {
        horizons: horizons.to_vec(),
        steps: steps.clone(),
        models: models.iter().map(|(n, _)| n.to_string()).collect(),
        mae: (0..steps.len()).map(|r| columns.iter().map(|c| c[r]).collect()).collect(),
    })
}

impl HorizonTable {
    /// Header `horizon_s,steps,<models>`; MAE with six decimals.
    pub fn to_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["horizon_s".to_string(), "steps".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for (r, row) in self.mae.iter().enumerate() {
            let mut rec = vec![self.horizons[r].to_string(), self.steps[r].to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
