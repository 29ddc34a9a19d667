//! Network-side encoding of history windows and actions.

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::PairSet;

/// A batch of history windows, `batch × len × dim`, oldest state first.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl WindowBatch {
    pub fn new(batch: usize, len: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), batch * len * dim, "window batch size");
        WindowBatch { batch, len, dim, data }
    }

    pub fn from_pairs(pairs: &PairSet) -> Self {
        WindowBatch::new(pairs.len(), pairs.window_len, pairs.dim, pairs.histories.clone())
    }

    pub fn window(&self, b: usize) -> &[f64] {
        let w = self.len * self.dim;
        &self.data[b * w..(b + 1) * w]
    }

    pub fn state(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.len + t) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn last_state(&self, b: usize) -> &[f64] {
        self.state(b, self.len - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionEncoding {
    /// Normalized states only.
    States,
    /// Normalized states followed by the scaled increment into each state
    /// (zero for the oldest one).
    #[default]
    StatesAndIncrements,
}

/// Affine state scaling and per-component action scaling fitted on
/// training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_scale: Vec<f64>,
    pub encoding: ConditionEncoding,
}

fn spread(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Normalizer {
    pub fn identity(dim: usize, encoding: ConditionEncoding) -> Self {
        Normalizer {
            state_mean: vec![0.0; dim],
            state_std: vec![1.0; dim],
            action_scale: vec![1.0; dim],
            encoding,
        }
    }

    pub fn fit(pairs: &PairSet, encoding: ConditionEncoding) -> Self {
        let dim = pairs.dim;
        let mut out = Normalizer::identity(dim, encoding);
        if pairs.is_empty() {
            return out;
        }
        for j in 0..dim {
            let states = pairs.histories.iter().skip(j).step_by(dim).copied();
            let (m, s) = spread(states);
            out.state_mean[j] = m;
            out.state_std[j] = if s > 1e-12 { s } else { 1.0 };
            let actions = pairs.actions.iter().skip(j).step_by(dim).copied();
            let rms = (actions.clone().map(|a| a * a).sum::<f64>() / pairs.len() as f64).sqrt();
            out.action_scale[j] = if rms > 1e-12 { rms } else { 1.0 };
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn cond_dim(&self) -> usize {
        match self.encoding {
            ConditionEncoding::States => self.dim(),
            ConditionEncoding::StatesAndIncrements => 2 * self.dim(),
        }
    }

    /// One `[batch, cond_dim]` tensor per timestep.
    pub fn encode_windows(&self, w: &WindowBatch) -> Vec<Tensor> {
        let dim = self.dim();
        assert_eq!(w.dim, dim, "window dimension");
        let cd = self.cond_dim();
        (0..w.len)
            .map(|t| {
                let mut data = Vec::with_capacity(w.batch * cd);
                for b in 0..w.batch {
                    let s = w.state(b, t);
                    data.extend((0..dim).map(|j| (s[j] - self.state_mean[j]) / self.state_std[j]));
                    if self.encoding == ConditionEncoding::StatesAndIncrements {
                        if t == 0 {
                            data.extend(std::iter::repeat_n(0.0, dim));
                        } else {
                            let p = w.state(b, t - 1);
                            data.extend((0..dim).map(|j| (s[j] - p[j]) / self.action_scale[j]));
                        }
                    }
                }
                Tensor::matrix(w.batch, cd, data).expect("encoded window shape")
            })
            .collect()
    }

    /// `[batch, dim]` tensor of scaled actions.
    pub fn encode_actions(&self, actions: &[f64]) -> Tensor {
        let dim = self.dim();
        let data: Vec<f64> = actions
            .iter()
            .enumerate()
            .map(|(i, a)| a / self.action_scale[i % dim])
            .collect();
        Tensor::matrix(actions.len() / dim, dim, data).expect("encoded action shape")
    }

    pub fn decode_actions(&self, t: &Tensor) -> Vec<f64> {
        let dim = self.dim();
        t.data()
            .iter()
            .enumerate()
            .map(|(i, a)| a * self.action_scale[i % dim])
            .collect()
    }
}
