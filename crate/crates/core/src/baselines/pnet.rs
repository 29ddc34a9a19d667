//! Regression networks with Gaussian input perturbation.
//!
//! The MLP variant reads the flattened encoded window through `layers`
//! ReLU layers of width `width` and a linear output. The LSTM variant
//! replaces the first of those layers with an LSTM of the same width.
//! Inputs receive fresh `N(0, σ_in²)` noise at every training draw and
//! every prediction, which is what makes the predictions stochastic.

use diffcore::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointError, Container};
use crate::dataset::PairSet;
use crate::features::{Normalizer, WindowBatch};
use crate::gameopt::{OptimizerConfig, Preconditioning, RmsPropState};
use crate::nets::{lstm_sequence, NetError, ParamSet};
use crate::par::{derive_rng, SimRng};
use crate::policy::{ActionModel, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PnetKind {
    Mlp,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PnetConfig {
    pub kind: PnetKind,
    pub layers: usize,
    pub width: usize,
    pub sigma_in: f64,
}

impl PnetConfig {
    pub fn mlp() -> Self {
        PnetConfig {
            kind: PnetKind::Mlp,
            layers: 5,
            width: 128,
            sigma_in: 0.1,
        }
    }

    pub fn lstm() -> Self {
        PnetConfig {
            kind: PnetKind::Lstm,
            ..Self::mlp()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PnetTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    pub divergence_threshold: f64,
}

impl Default for PnetTrainConfig {
    fn default() -> Self {
        PnetTrainConfig {
            iterations: 5000,
            batch_size: 64,
            alpha: 1e-3,
            rho: 0.9,
            eps: 1e-8,
            seed: 0,
            divergence_threshold: 1e6,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PnetError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error("training diverged at iteration {iteration}: loss {loss:e}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedNet {
    pub config: PnetConfig,
    pub normalizer: Normalizer,
    pub window_len: usize,
    pub params: ParamSet,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut SimRng) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-b..=b)).collect()).expect("shape")
}

impl PerturbedNet {
    pub fn new(config: PnetConfig, normalizer: Normalizer, window_len: usize, seed: u64) -> Result<Self, PnetError> {
        if config.layers == 0 || config.width == 0 || window_len == 0 {
            return Err(PnetError::Invalid("layers, width and window length must be positive".into()));
        }
        if !(config.sigma_in >= 0.0) {
            return Err(PnetError::Invalid("input noise scale must be >= 0".into()));
        }
        let mut rng = derive_rng(seed, &[0x706e_6574]);
        let cd = normalizer.cond_dim();
        let w = config.width;
        let mut ps = ParamSet::default();
        let (mut fan, fc_layers) = match config.kind {
            PnetKind::Mlp => (window_len * cd, config.layers),
            PnetKind::Lstm => {
                ps.push("lstm.w_x", uniform(&[cd, 4 * w], cd, &mut rng));
                ps.push("lstm.w_h", uniform(&[w, 4 * w], w, &mut rng));
                let mut b = uniform(&[4 * w], w, &mut rng);
                b.data_mut()[w..2 * w].fill(1.0);
                ps.push("lstm.b", b);
                (w, config.layers - 1)
            }
        };
        for l in 0..fc_layers {
            ps.push(format!("fc{l}.w"), uniform(&[fan, w], fan, &mut rng));
            ps.push(format!("fc{l}.b"), uniform(&[w], fan, &mut rng));
            fan = w;
        }
        let out = normalizer.dim();
        ps.push("out.w", uniform(&[fan, out], fan, &mut rng));
        ps.push("out.b", uniform(&[out], fan, &mut rng));
        Ok(PerturbedNet {
            config,
            normalizer,
            window_len,
            params: ps,
        })
    }

    /// Encoded windows with input noise, one tensor per timestep.
    fn noisy_inputs(&self, windows: &WindowBatch, rng: &mut SimRng) -> Vec<Tensor> {
        let mut enc = self.normalizer.encode_windows(windows);
        if self.config.sigma_in > 0.0 {
            let n = Normal::new(0.0, self.config.sigma_in).expect("sigma");
            for t in &mut enc {
                t.data_mut().iter_mut().for_each(|v| *v += n.sample(rng));
            }
        }
        enc
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], inputs: &[Var]) -> Result<Var, PnetError> {
        let (mut x, rest) = match self.config.kind {
            PnetKind::Mlp => (g.concat_cols(inputs)?, vars),
            PnetKind::Lstm => (lstm_sequence(g, inputs, (vars[0], vars[1], vars[2]))?, &vars[3..]),
        };
        let layers = rest.len() / 2;
        for l in 0..layers {
            let z = g.matmul(x, rest[2 * l])?;
            x = g.add_row(z, rest[2 * l + 1])?;
            if l + 1 < layers {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Normalized predictions for noisy inputs.
    pub fn predict_encoded(&self, windows: &WindowBatch, rng: &mut SimRng) -> Result<Tensor, PnetError> {
        let mut g = Graph::new();
        let vars = self.params.register_constant(&mut g);
        let inputs: Vec<Var> = self
            .noisy_inputs(windows, rng)
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let out = self.forward(&mut g, &vars, &inputs)?;
        Ok(g.value(out).clone())
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "config": self.config,
            "normalizer": self.normalizer,
            "window_len": self.window_len,
        });
        let mut c = Container::new(PNET_KIND, meta);
        for (name, t) in self.params.iter() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, PnetError> {
        c.expect_kind(PNET_KIND)?;
        let bad = |e: serde_json::Error| CheckpointError::Corrupt(format!("pnet header: {e}"));
        let config: PnetConfig = serde_json::from_value(c.meta["config"].clone()).map_err(bad)?;
        let normalizer: Normalizer = serde_json::from_value(c.meta["normalizer"].clone()).map_err(bad)?;
        let window_len: usize = serde_json::from_value(c.meta["window_len"].clone()).map_err(bad)?;
        let mut net = PerturbedNet::new(config, normalizer, window_len, 0)?;
        let mut flat = Vec::with_capacity(net.params.num_scalars());
        for (name, t) in net.params.iter() {
            flat.extend_from_slice(c.get_shaped(name, t.shape())?.data());
        }
        net.params.set_flat(&flat);
        Ok(net)
    }
}

pub const PNET_KIND: &str = "pnet";

/// Minimizes the mean squared error between predictions on perturbed
/// inputs and the scaled true actions with RMSProp, the step size decaying
/// linearly from `alpha` towards zero. Returns the per-iteration loss.
pub fn pnet_train(net: &mut PerturbedNet, pairs: &PairSet, cfg: &PnetTrainConfig) -> Result<Vec<f64>, PnetError> {
    if pairs.is_empty() || cfg.batch_size == 0 {
        return Err(PnetError::Invalid("training needs pairs and a positive batch size".into()));
    }
    if pairs.window_len != net.window_len {
        return Err(PnetError::Invalid(format!(
            "network expects windows of {} states, pairs have {}",
            net.window_len, pairs.window_len
        )));
    }
    let opt = OptimizerConfig {
        alpha: cfg.alpha,
        gamma: 0.0,
        rho: cfg.rho,
        eps: cfg.eps,
        preconditioning: Preconditioning::RmsProp,
    };
    opt.validate().map_err(|e| PnetError::Invalid(e.to_string()))?;
    let mut rms = RmsPropState::new(net.params.num_scalars());
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let mut rng = derive_rng(cfg.seed, &[0x7074, it as u64]);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..pairs.len())).collect();
        let sub = pairs.subset(&idx);
        let windows = WindowBatch::from_pairs(&sub);
        let mut g = Graph::new();
        let vars = net.params.register(&mut g);
        let inputs: Vec<Var> = net
            .noisy_inputs(&windows, &mut rng)
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let target = g.constant(net.normalizer.encode_actions(&sub.actions));
        let pred = net.forward(&mut g, &vars, &inputs)?;
        let diff = g.sub(pred, target)?;
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let value = g.value(loss).item().unwrap_or(f64::NAN);
        if !value.is_finite() || value > cfg.divergence_threshold {
            return Err(PnetError::Diverged { iteration: it, loss: value });
        }
        losses.push(value);
        let grads = g.backward(loss, &vars)?;
        let step = rms.precondition(&grads.flatten(), &opt);
        let lr = cfg.alpha * (1.0 - (it - 1) as f64 / cfg.iterations as f64);
        let mut flat = net.params.flatten();
        for (p, s) in flat.iter_mut().zip(&step) {
            *p -= lr * s;
        }
        net.params.set_flat(&flat);
    }
    Ok(losses)
}

impl ActionModel for PerturbedNet {
    fn action_dim(&self) -> usize {
        self.normalizer.dim()
    }

    fn sample_actions(&self, windows: &WindowBatch, rng: &mut SimRng) -> Result<Vec<f64>, ModelError> {
        let out = self
            .predict_encoded(windows, rng)
            .map_err(|e| ModelError::Other(e.to_string()))?;
        Ok(self.normalizer.decode_actions(&out))
    }
}
