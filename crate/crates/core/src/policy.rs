//! The interface every action predictor exposes to rollouts, the tracker and
//! the baseline table.

use crate::features::WindowBatch;
use crate::lvsys::{rk4_increment, LvParams};
use crate::nets::{GanModel, NetError};
use crate::par::SimRng;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{0}")]
    Other(String),
}

/// Samples one action per history window. Implementations may draw
/// randomness only from `rng`.
pub trait ActionModel: Sync {
    fn action_dim(&self) -> usize;

    /// Returns `batch × action_dim` values, row-major.
    fn sample_actions(&self, windows: &WindowBatch, rng: &mut SimRng) -> Result<Vec<f64>, ModelError>;
}

impl<M: ActionModel + ?Sized> ActionModel for &M {
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
    fn sample_actions(&self, windows: &WindowBatch, rng: &mut SimRng) -> Result<Vec<f64>, ModelError> {
        (**self).sample_actions(windows, rng)
    }
}

impl<M: ActionModel + ?Sized> ActionModel for Box<M> {
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
    fn sample_actions(&self, windows: &WindowBatch, rng: &mut SimRng) -> Result<Vec<f64>, ModelError> {
        (**self).sample_actions(windows, rng)
    }
}

impl ActionModel for GanModel {
    fn action_dim(&self) -> usize {
        self.generator.config.action_dim
    }

    fn sample_actions(&self, windows: &WindowBatch, rng: &mut SimRng) -> Result<Vec<f64>, ModelError> {
        let cond = self.normalizer.encode_windows(windows);
        let noise = self.generator.sample_noise(windows.batch, windows.len, rng);
        let out = self.generator.generate_values(&cond, &noise)?;
        Ok(self.normalizer.decode_actions(&out))
    }
}

/// Always predicts no motion.
#[derive(Debug, Clone, Copy)]
pub struct ZeroModel {
    pub dim: usize,
}

impl ActionModel for ZeroModel {
    fn action_dim(&self) -> usize {
        self.dim
    }

    fn sample_actions(&self, windows: &WindowBatch, _rng: &mut SimRng) -> Result<Vec<f64>, ModelError> {
        Ok(vec![0.0; windows.batch * self.dim])
    }
}

/// The exact integrator step of a known system; a perfect predictor.
#[derive(Debug, Clone, Copy)]
pub struct LvOracle {
    pub params: LvParams,
    pub dt: f64,
}

impl ActionModel for LvOracle {
    fn action_dim(&self) -> usize {
        2
    }

    fn sample_actions(&self, windows: &WindowBatch, _rng: &mut SimRng) -> Result<Vec<f64>, ModelError> {
        Ok((0..windows.batch)
            .flat_map(|b| {
                let s = windows.last_state(b);
                rk4_increment([s[0], s[1]], &self.params, self.dt)
            })
            .collect())
    }
}
