//! Generator and discriminator networks recorded on a [`Graph`].
//!
//! Both networks read the condition sequence with one LSTM layer (gate order
//! input, forget, cell, output; zero initial state). The generator also reads
//! a fresh noise vector at every timestep, concatenated to the condition. Its
//! final hidden state passes through `fc_layers` ReLU layers of width
//! `fc_width` and a linear output of the action dimension. The discriminator
//! concatenates its final hidden state with the candidate action and maps it
//! through the same kind of stack to a single logit.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use diffcore::{DiffError, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointError, Container};
use crate::features::Normalizer;
use crate::par::{derive_rng, SimRng};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("condition has {cond} timesteps but noise has {noise}")]
    SequenceLength { cond: usize, noise: usize },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetProfile {
    pub hidden: usize,
    pub fc_layers: usize,
    pub fc_width: usize,
    pub noise_dim: usize,
}

impl NetProfile {
    pub const FULL: NetProfile = NetProfile {
        hidden: 128,
        fc_layers: 4,
        fc_width: 64,
        noise_dim: 16,
    };
    pub const SCALED: NetProfile = NetProfile {
        hidden: 32,
        fc_layers: 2,
        fc_width: 32,
        noise_dim: 8,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Full,
    #[default]
    Scaled,
}

impl ProfileName {
    pub fn profile(self) -> NetProfile {
        match self {
            ProfileName::Full => NetProfile::FULL,
            ProfileName::Scaled => NetProfile::SCALED,
        }
    }
}

impl FromStr for ProfileName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(ProfileName::Full),
            "scaled" => Ok(ProfileName::Scaled),
            other => Err(format!("unknown profile {other:?} (expected full or scaled)")),
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileName::Full => "full",
            ProfileName::Scaled => "scaled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Normal,
    Uniform,
}

impl NoiseKind {
    pub fn sample(self, rng: &mut SimRng) -> f64 {
        match self {
            NoiseKind::Normal => StandardNormal.sample(rng),
            NoiseKind::Uniform => rng.random::<f64>(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub cond_dim: usize,
    pub action_dim: usize,
    pub profile: NetProfile,
    pub noise: NoiseKind,
}

/// Ordered named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length");
        let mut pos = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }

    /// Records every tensor as a trainable leaf.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors().map(|t| g.param(t.clone())).collect()
    }

    /// Records every tensor as a constant.
    pub fn register_constant(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors().map(|t| g.constant(t.clone())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.data_mut().fill(value);
        }
    }

    fn to_container(&self, prefix: &str, c: &mut Container) {
        for (name, t) in self.iter() {
            c.push(format!("{prefix}.{name}"), t.clone());
        }
    }

    fn load_from(&mut self, prefix: &str, c: &Container) -> Result<(), CheckpointError> {
        for (name, t) in self.entries.iter_mut() {
            let full = format!("{prefix}.{name}");
            *t = c.get_shaped(&full, t.shape())?.clone();
        }
        Ok(())
    }
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut SimRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn push_lstm(ps: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut SimRng) {
    ps.push(format!("{prefix}.w_x"), uniform_tensor(&[input, 4 * hidden], 1.0 / (input as f64).sqrt(), rng));
    ps.push(format!("{prefix}.w_h"), uniform_tensor(&[hidden, 4 * hidden], 1.0 / (hidden as f64).sqrt(), rng));
    let mut b = uniform_tensor(&[4 * hidden], 1.0 / (hidden as f64).sqrt(), rng);
    b.data_mut()[hidden..2 * hidden].fill(1.0);
    ps.push(format!("{prefix}.b"), b);
}

fn push_fc(ps: &mut ParamSet, prefix: &str, input: usize, output: usize, rng: &mut SimRng) {
    let bound = 1.0 / (input as f64).sqrt();
    ps.push(format!("{prefix}.w"), uniform_tensor(&[input, output], bound, rng));
    ps.push(format!("{prefix}.b"), uniform_tensor(&[output], bound, rng));
}

fn push_stack(ps: &mut ParamSet, input: usize, profile: &NetProfile, output: usize, rng: &mut SimRng) {
    let mut width = input;
    for l in 0..profile.fc_layers {
        push_fc(ps, &format!("fc{l}"), width, profile.fc_width, rng);
        width = profile.fc_width;
    }
    push_fc(ps, "out", width, output, rng);
}

/// One LSTM cell update. `x` is `[B, in]`, `h` and `c` are `[B, H]`.
pub fn lstm_step(g: &mut Graph, x: Var, h: Var, c: Var, w_x: Var, w_h: Var, b: Var) -> Result<(Var, Var), DiffError> {
    let hidden = g.shape(w_h)[0];
    let zx = g.matmul(x, w_x)?;
    let zh = g.matmul(h, w_h)?;
    let z = g.add(zx, zh)?;
    let z = g.add_row(z, b)?;
    let (h2, c2) = gates(g, z, Some(c), hidden)?;
    Ok((h2, c2))
}

fn gates(g: &mut Graph, z: Var, c: Option<Var>, hidden: usize) -> Result<(Var, Var), DiffError> {
    let zi = g.slice_cols(z, 0, hidden)?;
    let zf = g.slice_cols(z, hidden, hidden)?;
    let zg = g.slice_cols(z, 2 * hidden, hidden)?;
    let zo = g.slice_cols(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let mut c2 = g.mul(i, cand)?;
    if let Some(c) = c {
        let f = g.sigmoid(zf);
        let keep = g.mul(f, c)?;
        c2 = g.add(keep, c2)?;
    }
    let tc = g.tanh(c2);
    let h2 = g.mul(o, tc)?;
    Ok((h2, c2))
}

/// Runs an LSTM over `inputs` from a zero state and returns the final
/// hidden state. `w` holds `(w_x, w_h, b)`.
pub fn lstm_sequence(g: &mut Graph, inputs: &[Var], w: (Var, Var, Var)) -> Result<Var, NetError> {
    let (w_x, w_h, b) = w;
    let hidden = g.shape(w_h)[0];
    if inputs.is_empty() {
        return Err(NetError::Shape("empty input sequence".into()));
    }
    // a zero initial state contributes nothing, so the first step skips it
    let zx = g.matmul(inputs[0], w_x)?;
    let z = g.add_row(zx, b)?;
    let (mut h, mut c) = gates(g, z, None, hidden)?;
    for &x in &inputs[1..] {
        (h, c) = lstm_step(g, x, h, c, w_x, w_h, b)?;
    }
    Ok(h)
}

fn fc_stack(g: &mut Graph, mut x: Var, vars: &[Var]) -> Result<Var, DiffError> {
    let layers = vars.len() / 2;
    for l in 0..layers {
        let z = g.matmul(x, vars[2 * l])?;
        x = g.add_row(z, vars[2 * l + 1])?;
        if l + 1 < layers {
            x = g.relu(x);
        }
    }
    Ok(x)
}

fn check_vars(vars: &[Var], ps: &ParamSet) -> Result<(), NetError> {
    if vars.len() != ps.len() {
        return Err(NetError::Shape(format!(
            "expected {} parameter nodes, got {}",
            ps.len(),
            vars.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    pub config: NetConfig,
    pub params: ParamSet,
}

impl GeneratorNet {
    pub fn new(config: NetConfig, rng: &mut SimRng) -> Self {
        let p = config.profile;
        let mut params = ParamSet::default();
        push_lstm(&mut params, "lstm", config.cond_dim + p.noise_dim, p.hidden, rng);
        push_stack(&mut params, p.hidden, &p, config.action_dim, rng);
        GeneratorNet { config, params }
    }

    pub fn noise_dim(&self) -> usize {
        self.config.profile.noise_dim
    }

    /// Draws one `[batch, noise_dim]` noise tensor per timestep.
    pub fn sample_noise(&self, batch: usize, len: usize, rng: &mut SimRng) -> Vec<Tensor> {
        let d = self.noise_dim();
        (0..len)
            .map(|_| {
                let data = (0..batch * d).map(|_| self.config.noise.sample(rng)).collect();
                Tensor::matrix(batch, d, data).expect("noise shape")
            })
            .collect()
    }

    /// Records the generator on `g`; `vars` are the registered parameters.
    pub fn generate(&self, g: &mut Graph, vars: &[Var], cond: &[Var], noise: &[Var]) -> Result<Var, NetError> {
        check_vars(vars, &self.params)?;
        if cond.len() != noise.len() {
            return Err(NetError::SequenceLength {
                cond: cond.len(),
                noise: noise.len(),
            });
        }
        let inputs = cond
            .iter()
            .zip(noise)
            .map(|(&c, &z)| g.concat_cols(&[c, z]))
            .collect::<Result<Vec<_>, _>>()?;
        let h = lstm_sequence(g, &inputs, (vars[0], vars[1], vars[2]))?;
        Ok(fc_stack(g, h, &vars[3..])?)
    }

    /// Forward pass on plain tensors.
    pub fn generate_values(&self, cond: &[Tensor], noise: &[Tensor]) -> Result<Tensor, NetError> {
        let mut g = Graph::new();
        let vars = self.params.register_constant(&mut g);
        let c: Vec<Var> = cond.iter().map(|t| g.constant(t.clone())).collect();
        let z: Vec<Var> = noise.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.generate(&mut g, &vars, &c, &z)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorNet {
    pub config: NetConfig,
    pub params: ParamSet,
}

impl DiscriminatorNet {
    pub fn new(config: NetConfig, rng: &mut SimRng) -> Self {
        let p = config.profile;
        let mut params = ParamSet::default();
        push_lstm(&mut params, "lstm", config.cond_dim, p.hidden, rng);
        push_stack(&mut params, p.hidden + config.action_dim, &p, 1, rng);
        DiscriminatorNet { config, params }
    }

    /// Final LSTM hidden state over the condition; shared by real and fake
    /// candidates of the same batch.
    pub fn encode(&self, g: &mut Graph, vars: &[Var], cond: &[Var]) -> Result<Var, NetError> {
        check_vars(vars, &self.params)?;
        lstm_sequence(g, cond, (vars[0], vars[1], vars[2]))
    }

    /// `[batch, 1]` logits for candidate actions `y` given an encoded
    /// condition.
    pub fn logits(&self, g: &mut Graph, vars: &[Var], encoded: Var, y: Var) -> Result<Var, NetError> {
        check_vars(vars, &self.params)?;
        if g.shape(y).get(1) != Some(&self.config.action_dim) {
            return Err(NetError::Shape(format!(
                "candidate shape {:?} does not have {} columns",
                g.shape(y),
                self.config.action_dim
            )));
        }
        let joined = g.concat_cols(&[encoded, y])?;
        Ok(fc_stack(g, joined, &vars[3..])?)
    }

    /// Probabilities `D(y | x)` in (0, 1).
    pub fn discriminate(&self, g: &mut Graph, vars: &[Var], cond: &[Var], y: Var) -> Result<Var, NetError> {
        let h = self.encode(g, vars, cond)?;
        let z = self.logits(g, vars, h, y)?;
        Ok(g.sigmoid(z))
    }

    pub fn discriminate_values(&self, cond: &[Tensor], y: &Tensor) -> Result<Tensor, NetError> {
        let mut g = Graph::new();
        let vars = self.params.register_constant(&mut g);
        let c: Vec<Var> = cond.iter().map(|t| g.constant(t.clone())).collect();
        let yv = g.constant(y.clone());
        let out = self.discriminate(&mut g, &vars, &c, yv)?;
        Ok(g.value(out).clone())
    }
}

/// Metadata stored alongside trained networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub iteration: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub seed: u64,
    pub dt: f64,
    pub history_steps: usize,
}

#[derive(Serialize, Deserialize)]
struct GanHeader {
    config: NetConfig,
    profile_name: Option<ProfileName>,
    normalizer: Normalizer,
    training: TrainingMeta,
}

/// A trained generator/discriminator pair with its input scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct GanModel {
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub normalizer: Normalizer,
    pub profile_name: Option<ProfileName>,
    pub meta: TrainingMeta,
}

pub const GAN_KIND: &str = "gan";

impl GanModel {
    pub fn init(config: NetConfig, normalizer: Normalizer, meta: TrainingMeta) -> Self {
        let mut rng = derive_rng(meta.seed, &[0x6e65_7473]);
        let generator = GeneratorNet::new(config, &mut rng);
        let discriminator = DiscriminatorNet::new(config, &mut rng);
        GanModel {
            generator,
            discriminator,
            normalizer,
            profile_name: None,
            meta,
        }
    }

    pub fn to_container(&self) -> Container {
        let header = GanHeader {
            config: self.generator.config,
            profile_name: self.profile_name,
            normalizer: self.normalizer.clone(),
            training: self.meta.clone(),
        };
        let mut c = Container::new(GAN_KIND, serde_json::to_value(header).expect("header"));
        self.generator.params.to_container("gen", &mut c);
        self.discriminator.params.to_container("disc", &mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, NetError> {
        c.expect_kind(GAN_KIND)?;
        let header: GanHeader = serde_json::from_value(c.meta.clone())
            .map_err(|e| CheckpointError::Corrupt(format!("model header: {e}")))?;
        let mut model = GanModel::init(header.config, header.normalizer, header.training);
        model.profile_name = header.profile_name;
        model.generator.params.load_from("gen", c)?;
        model.discriminator.params.load_from("disc", c)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::from_container(&Container::load(path)?)
    }
}
