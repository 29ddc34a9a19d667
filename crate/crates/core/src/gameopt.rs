//! Two-player game dynamics: losses, the gradient field, simultaneous
//! gradient ascent and the consensus update, plus the GAN training loop.
//!
//! The game state `x = (θ, φ)` stacks the discriminator parameters `θ`
//! before the generator parameters `φ`. Each player minimizes its own loss
//! and `v(x) = (−∇θ L_D, −∇φ L_G)` is the stacked ascent direction. The
//! consensus direction is `u = v − γ ∇(½‖v‖²)`, with the second term
//! obtained by differentiating the recorded gradient field. Both updates
//! apply `x ← x + α · P(u)` where `P` is RMSProp scaling or the identity.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use diffcore::{DiffError, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PairSet;
use crate::evalsuite::mae;
use crate::features::WindowBatch;
use crate::nets::{DiscriminatorNet, GanModel, GeneratorNet, NetError};
use crate::par::{derive_rng, SimRng};

#[derive(Debug, thiserror::Error)]
pub enum GameError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("non-finite update at iteration {iteration}: |v| = {v_norm:e}, |u| = {u_norm:e}")]
    NonFinite { iteration: usize, v_norm: f64, u_norm: f64 },
    #[error("invalid optimizer setting: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioning {
    #[default]
    RmsProp,
    /// Plain `x + α u`, for which the bilinear closed forms hold.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub rho: f64,
    pub eps: f64,
    pub preconditioning: Preconditioning,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            alpha: 0.01,
            gamma: 0.0,
            rho: 0.9,
            eps: 1e-8,
            preconditioning: Preconditioning::RmsProp,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), GameError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(GameError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(GameError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(GameError::Config(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.eps > 0.0) {
            return Err(GameError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Running mean of squared update directions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RmsPropState {
    pub mean_sq: Vec<f64>,
}

impl RmsPropState {
    pub fn new(n: usize) -> Self {
        RmsPropState { mean_sq: vec![0.0; n] }
    }

    /// Applies `P` to `u`, updating the running statistics in RMSProp mode.
    pub fn precondition(&mut self, u: &[f64], cfg: &OptimizerConfig) -> Vec<f64> {
        match cfg.preconditioning {
            Preconditioning::Raw => u.to_vec(),
            Preconditioning::RmsProp => {
                if self.mean_sq.len() != u.len() {
                    self.mean_sq = vec![0.0; u.len()];
                }
                u.iter()
                    .zip(self.mean_sq.iter_mut())
                    .map(|(&ui, m)| {
                        *m = cfg.rho * *m + (1.0 - cfg.rho) * ui * ui;
                        ui / (m.sqrt() + cfg.eps)
                    })
                    .collect()
            }
        }
    }
}

/// Flat game state; the first `theta_len` entries belong to the
/// discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct GameState {
    pub x: Vec<f64>,
    pub theta_len: usize,
}

impl GameState {
    pub fn theta(&self) -> &[f64] {
        &self.x[..self.theta_len]
    }

    pub fn phi(&self) -> &[f64] {
        &self.x[self.theta_len..]
    }

    pub fn norm(&self) -> f64 {
        norm(&self.x)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// The recorded losses of one game evaluation.
pub struct GameRecord {
    pub theta: Vec<Var>,
    pub phi: Vec<Var>,
    pub disc_loss: Var,
    pub gen_loss: Var,
}

pub trait TwoPlayerGame {
    /// Records both losses at `state` on `g` with the parameters as leaves.
    fn record(&self, g: &mut Graph, state: &GameState) -> Result<GameRecord, GameError>;
}

/// `f(θ, φ) = θ·φ` for scalar players: the discriminator ascends `f`, the
/// generator descends it.
#[derive(Debug, Clone, Copy, Default)]
pub struct BilinearGame;

impl TwoPlayerGame for BilinearGame {
    fn record(&self, g: &mut Graph, state: &GameState) -> Result<GameRecord, GameError> {
        if state.theta_len != 1 || state.x.len() != 2 {
            return Err(GameError::Data("bilinear game needs scalar players".into()));
        }
        let t = g.param(Tensor::scalar(state.x[0]));
        let p = g.param(Tensor::scalar(state.x[1]));
        let f = g.mul(t, p)?;
        let disc_loss = g.neg(f);
        Ok(GameRecord {
            theta: vec![t],
            phi: vec![p],
            disc_loss,
            gen_loss: f,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub v: Vec<f64>,
    pub disc_loss: f64,
    pub gen_loss: f64,
}

fn field_vars(g: &mut Graph, rec: &GameRecord) -> Result<Vec<Var>, DiffError> {
    let gt = g.grad(rec.disc_loss, &rec.theta)?;
    let gp = g.grad(rec.gen_loss, &rec.phi)?;
    Ok(gt.into_iter().chain(gp).map(|d| g.neg(d)).collect())
}

fn flatten_vars(g: &Graph, vars: &[Var]) -> Vec<f64> {
    vars.iter().flat_map(|&v| g.value(v).data().iter().copied()).collect()
}

pub fn gradient_field<G: TwoPlayerGame + ?Sized>(game: &G, state: &GameState) -> Result<FieldEval, GameError> {
    let mut g = Graph::new();
    let rec = game.record(&mut g, state)?;
    let field = field_vars(&mut g, &rec)?;
    Ok(FieldEval {
        v: flatten_vars(&g, &field),
        disc_loss: g.value(rec.disc_loss).item().unwrap_or(f64::NAN),
        gen_loss: g.value(rec.gen_loss).item().unwrap_or(f64::NAN),
    })
}

/// `(v, ∇ ½‖v‖²)` at `state`.
pub fn field_and_norm_grad<G: TwoPlayerGame + ?Sized>(
    game: &G,
    state: &GameState,
) -> Result<(FieldEval, Vec<f64>), GameError> {
    let mut g = Graph::new();
    let rec = game.record(&mut g, state)?;
    let field = field_vars(&mut g, &rec)?;
    let all: Vec<Var> = rec.theta.iter().chain(&rec.phi).copied().collect();
    let r = g.half_sq_norm_grad(&field, &all)?;
    let eval = FieldEval {
        v: flatten_vars(&g, &field),
        disc_loss: g.value(rec.disc_loss).item().unwrap_or(f64::NAN),
        gen_loss: g.value(rec.gen_loss).item().unwrap_or(f64::NAN),
    };
    Ok((eval, flatten_vars(&g, &r)))
}

/// `x + α · P(v)`.
pub fn sga_step(state: &GameState, v: &[f64], cfg: &OptimizerConfig, rms: &mut RmsPropState) -> GameState {
    let dir = rms.precondition(v, cfg);
    GameState {
        x: state.x.iter().zip(&dir).map(|(x, d)| x + cfg.alpha * d).collect(),
        theta_len: state.theta_len,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub state: GameState,
    pub v_norm: f64,
    pub u_norm: f64,
    pub disc_loss: f64,
    pub gen_loss: f64,
}

/// One consensus update. With `γ = 0` the norm gradient is skipped and the
/// result equals [`sga_step`] applied to the same field.
pub fn consensus_step<G: TwoPlayerGame + ?Sized>(
    game: &G,
    state: &GameState,
    cfg: &OptimizerConfig,
    rms: &mut RmsPropState,
    iteration: usize,
) -> Result<StepReport, GameError> {
    let (eval, u) = if cfg.gamma == 0.0 {
        let eval = gradient_field(game, state)?;
        let u = eval.v.clone();
        (eval, u)
    } else {
        let (eval, r) = field_and_norm_grad(game, state)?;
        let u = eval.v.iter().zip(&r).map(|(v, r)| v - cfg.gamma * r).collect();
        (eval, u)
    };
    let v_norm = norm(&eval.v);
    let u_norm = norm(&u);
    if !u.iter().all(|a| a.is_finite()) {
        return Err(GameError::NonFinite {
            iteration,
            v_norm,
            u_norm,
        });
    }
    Ok(StepReport {
        state: sga_step(state, &u, cfg, rms),
        v_norm,
        u_norm,
        disc_loss: eval.disc_loss,
        gen_loss: eval.gen_loss,
    })
}

/// `−[mean log D_real + mean log(1 − D_fake)]`, logs floored at 1e-12.
pub fn disc_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    let lg = |p: f64| p.max(diffcore::LOG_FLOOR).ln();
    let real = d_real.iter().map(|&p| lg(p)).sum::<f64>() / d_real.len() as f64;
    let fake = d_fake.iter().map(|&p| lg(1.0 - p)).sum::<f64>() / d_fake.len() as f64;
    -(real + fake)
}

/// `−mean log D_fake`.
pub fn gen_loss(d_fake: &[f64]) -> f64 {
    -d_fake.iter().map(|&p| p.max(diffcore::LOG_FLOOR).ln()).sum::<f64>() / d_fake.len() as f64
}

/// Records the discriminator loss on probability nodes.
pub fn record_disc_loss(g: &mut Graph, d_real: Var, d_fake: Var) -> Var {
    let lr = g.log(d_real);
    let lr = g.mean(lr);
    let one_minus = g.affine(d_fake, -1.0, 1.0);
    let lf = g.log(one_minus);
    let lf = g.mean(lf);
    let total = g.add(lr, lf).expect("scalar add");
    g.neg(total)
}

pub fn record_gen_loss(g: &mut Graph, d_fake: Var) -> Var {
    let l = g.log(d_fake);
    let l = g.mean(l);
    g.neg(l)
}

/// Inputs of one GAN evaluation, already encoded for the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct GanBatch {
    pub cond: Vec<Tensor>,
    pub real: Tensor,
    pub noise: Vec<Tensor>,
}

/// The adversarial game over a fixed batch.
pub struct GanGame<'a> {
    pub generator: &'a GeneratorNet,
    pub discriminator: &'a DiscriminatorNet,
    pub batch: &'a GanBatch,
}

fn unflatten(g: &mut Graph, flat: &[f64], like: &crate::nets::ParamSet) -> Result<Vec<Var>, GameError> {
    let mut pos = 0;
    let mut out = Vec::with_capacity(like.len());
    for t in like.tensors() {
        let n = t.len();
        let data = flat
            .get(pos..pos + n)
            .ok_or_else(|| GameError::Data("state shorter than the parameter layout".into()))?;
        out.push(g.param(Tensor::new(t.shape().to_vec(), data.to_vec())?));
        pos += n;
    }
    if pos != flat.len() {
        return Err(GameError::Data("state longer than the parameter layout".into()));
    }
    Ok(out)
}

impl<'a> GanGame<'a> {
    pub fn state(&self) -> GameState {
        let mut x = self.discriminator.params.flatten();
        let theta_len = x.len();
        x.extend(self.generator.params.flatten());
        GameState { x, theta_len }
    }
}

impl TwoPlayerGame for GanGame<'_> {
    fn record(&self, g: &mut Graph, state: &GameState) -> Result<GameRecord, GameError> {
        let theta = unflatten(g, state.theta(), &self.discriminator.params)?;
        let phi = unflatten(g, state.phi(), &self.generator.params)?;
        let cond: Vec<Var> = self.batch.cond.iter().map(|t| g.constant(t.clone())).collect();
        let noise: Vec<Var> = self.batch.noise.iter().map(|t| g.constant(t.clone())).collect();
        let real = g.constant(self.batch.real.clone());
        let fake = self.generator.generate(g, &phi, &cond, &noise)?;
        let h = self.discriminator.encode(g, &theta, &cond)?;
        let zr = self.discriminator.logits(g, &theta, h, real)?;
        let zf = self.discriminator.logits(g, &theta, h, fake)?;
        let dr = g.sigmoid(zr);
        let df = g.sigmoid(zf);
        let disc_loss = record_disc_loss(g, dr, df);
        let gen_loss = record_gen_loss(g, df);
        Ok(GameRecord {
            theta,
            phi,
            disc_loss,
            gen_loss,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub validation_size: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            batch_size: 64,
            log_every: 100,
            validation_size: 256,
            divergence_threshold: 1e6,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub v_norm: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub initial_val_mae: f64,
    pub records: Vec<LogRecord>,
    /// Set when `‖v‖` crossed the divergence threshold; the last record is
    /// the step that tripped it.
    pub diverged_at: Option<usize>,
}

impl TrainingLog {
    pub fn final_val_mae(&self) -> f64 {
        self.records.last().map_or(self.initial_val_mae, |r| r.val_mae)
    }
}

/// Draws `batch` pairs uniformly with replacement and encodes them.
pub fn sample_batch(model: &GanModel, pairs: &PairSet, batch: usize, rng: &mut SimRng) -> GanBatch {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..pairs.len())).collect();
    let sub = pairs.subset(&idx);
    encode_batch(model, &sub, rng)
}

pub fn encode_batch(model: &GanModel, pairs: &PairSet, rng: &mut SimRng) -> GanBatch {
    let windows = WindowBatch::from_pairs(pairs);
    let cond = model.normalizer.encode_windows(&windows);
    let real = model.normalizer.encode_actions(&pairs.actions);
    let noise = model.generator.sample_noise(pairs.len(), pairs.window_len, rng);
    GanBatch { cond, real, noise }
}

/// One-step action MAE (original units) of the generator on `batch`.
pub fn batch_mae(model: &GanModel, batch: &GanBatch, truth: &[f64]) -> Result<f64, GameError> {
    let out = model.generator.generate_values(&batch.cond, &batch.noise)?;
    let pred = model.normalizer.decode_actions(&out);
    mae(&pred, truth).map_err(|e| GameError::Data(e.to_string()))
}

/// Runs `cfg.iterations` consensus updates on `model`. `val` is scored with
/// a single fixed noise draw per pair every `log_every` iterations, and
/// `on_log` sees the model after each logged iteration.
pub fn train(
    model: &mut GanModel,
    train_pairs: &PairSet,
    val: &PairSet,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&GanModel, &LogRecord) -> Result<(), GameError>,
) -> Result<TrainingLog, GameError> {
    cfg.optimizer.validate()?;
    if train_pairs.is_empty() || val.is_empty() {
        return Err(GameError::Data("training and validation pairs must be non-empty".into()));
    }
    if cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(GameError::Config("batch size and log interval must be positive".into()));
    }
    let mut vrng = derive_rng(cfg.seed, &[0x7661_6c]);
    let val_batch = encode_batch(model, val, &mut vrng);
    let initial_val_mae = batch_mae(model, &val_batch, &val.actions)?;
    let mut log = TrainingLog {
        initial_val_mae,
        records: Vec::new(),
        diverged_at: None,
    };
    let mut state = {
        let game = GanGame {
            generator: &model.generator,
            discriminator: &model.discriminator,
            batch: &val_batch,
        };
        game.state()
    };
    let mut rms = RmsPropState::new(state.x.len());
    for it in 1..=cfg.iterations {
        let mut rng = derive_rng(cfg.seed, &[1, it as u64]);
        let batch = sample_batch(model, train_pairs, cfg.batch_size, &mut rng);
        let game = GanGame {
            generator: &model.generator,
            discriminator: &model.discriminator,
            batch: &batch,
        };
        let report = consensus_step(&game, &state, &cfg.optimizer, &mut rms, it)?;
        state = report.state;
        model.discriminator.params.set_flat(state.theta());
        model.generator.params.set_flat(state.phi());
        model.meta.iteration = it;
        let diverged = report.v_norm > cfg.divergence_threshold;
        if it % cfg.log_every == 0 || diverged {
            let rec = LogRecord {
                iteration: it,
                disc_loss: report.disc_loss,
                gen_loss: report.gen_loss,
                v_norm: report.v_norm,
                val_mae: batch_mae(model, &val_batch, &val.actions)?,
            };
            log::debug!(
                "iter {it}: L_D {:.4} L_G {:.4} |v| {:.3e} val MAE {:.5}",
                rec.disc_loss,
                rec.gen_loss,
                rec.v_norm,
                rec.val_mae
            );
            on_log(model, &rec)?;
            log.records.push(rec);
        }
        if diverged {
            log::warn!(
                "stopping at iteration {it}: |v| = {:.3e} exceeds {:.1e}",
                report.v_norm,
                cfg.divergence_threshold
            );
            log.diverged_at = Some(it);
            break;
        }
    }
    Ok(log)
}

pub const LOG_HEADER: &str = "iteration,disc_loss,gen_loss,v_norm,val_mae";

/// Append-only CSV training log.
pub struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{LOG_HEADER}")?;
        out.flush()?;
        Ok(LogWriter { out })
    }

    pub fn append(&mut self, r: &LogRecord) -> std::io::Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{}",
            r.iteration, r.disc_loss, r.gen_loss, r.v_norm, r.val_mae
        )?;
        self.out.flush()
    }
}
