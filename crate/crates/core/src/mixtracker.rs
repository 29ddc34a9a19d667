//! Mixture particle filter whose prior update samples actions from an
//! [`ActionModel`].
//!
//! Every particle carries its own history window; its current state is the
//! window's last entry. The prior update asks the model for one action per
//! particle and slides the window. The measurement update reweights
//! particles by a Gaussian likelihood inside each component and moves the
//! component weights `π` in proportion to each component's total
//! likelihood. Components whose effective sample size falls below a
//! threshold are resampled systematically.
//!
//! Random streams are keyed by `(seed, purpose, step, component)`, so a
//! one-component mixture and [`ParticleFilter`] consume identical noise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::evalsuite::rmse;
use crate::features::WindowBatch;
use crate::par::{derive_rng, for_each_mut, Execution, SimRng};
use crate::policy::{ActionModel, ModelError};

const PURPOSE_INIT: u64 = 11;
const PURPOSE_PRIOR: u64 = 12;
const PURPOSE_RESAMPLE: u64 = 13;
const PURPOSE_REPAIR: u64 = 14;

#[derive(Debug, thiserror::Error)]
pub enum TrackError {
    #[error("noise covariance is not symmetric positive definite")]
    NotSpd,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("every particle of component {component} became non-finite at step {step}")]
    AllRejected { step: usize, component: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    /// History window, oldest first; the last entry is the current state.
    pub window: Vec<Vec<f64>>,
    pub weight: f64,
}

impl Particle {
    pub fn state(&self) -> &[f64] {
        self.window.last().expect("non-empty window")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub pi: f64,
    pub particles: Vec<Particle>,
}

impl Component {
    pub fn weighted_mean(&self) -> Vec<f64> {
        let dim = self.particles[0].state().len();
        let mut m = vec![0.0; dim];
        for p in &self.particles {
            for (mj, sj) in m.iter_mut().zip(p.state()) {
                *mj += p.weight * sj;
            }
        }
        m
    }

    pub fn ess(&self) -> f64 {
        1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBelief {
    pub components: Vec<Component>,
}

fn gaussian_window(window: &[Vec<f64>], sigma: f64, rng: &mut SimRng) -> Vec<Vec<f64>> {
    if sigma == 0.0 {
        return window.to_vec();
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    window
        .iter()
        .map(|s| s.iter().map(|v| v + n.sample(rng)).collect())
        .collect()
}

impl MixtureBelief {
    /// One component per window, equal `π`, `particles` copies of each
    /// window perturbed with `N(0, init_noise²)` per entry.
    pub fn from_windows(
        windows: &[Vec<Vec<f64>>],
        particles: usize,
        init_noise: f64,
        seed: u64,
    ) -> Result<Self, TrackError> {
        if windows.is_empty() || particles == 0 {
            return Err(TrackError::Invalid("need at least one component and one particle".into()));
        }
        if windows.iter().any(|w| w.is_empty()) {
            return Err(TrackError::Invalid("history windows must be non-empty".into()));
        }
        if !(init_noise >= 0.0 && init_noise.is_finite()) {
            return Err(TrackError::Invalid("initial noise must be finite and >= 0".into()));
        }
        let nc = windows.len();
        let components = windows
            .iter()
            .enumerate()
            .map(|(n, w)| {
                let mut rng = derive_rng(seed, &[PURPOSE_INIT, n as u64]);
                Component {
                    pi: 1.0 / nc as f64,
                    particles: (0..particles)
                        .map(|_| Particle {
                            window: gaussian_window(w, init_noise, &mut rng),
                            weight: 1.0 / particles as f64,
                        })
                        .collect(),
                }
            })
            .collect();
        Ok(MixtureBelief { components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].particles[0].state().len()
    }

    /// `Σ π_n Σ_i w_{n,i} s_{n,i}`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (mj, cj) in m.iter_mut().zip(c.weighted_mean()) {
                *mj += c.pi * cj;
            }
        }
        m
    }

    /// Largest deviation from one of `Σπ` and every component's `Σw`.
    pub fn normalization_error(&self) -> f64 {
        let pi = (self.components.iter().map(|c| c.pi).sum::<f64>() - 1.0).abs();
        self.components
            .iter()
            .map(|c| (c.particles.iter().map(|p| p.weight).sum::<f64>() - 1.0).abs())
            .fold(pi, f64::max)
    }

    /// Unweighted mean and standard deviation of all particle states.
    pub fn cloud_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let states: Vec<&[f64]> = self
            .components
            .iter()
            .flat_map(|c| c.particles.iter().map(Particle::state))
            .collect();
        cloud_stats(&states)
    }
}

fn cloud_stats(states: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let dim = states[0].len();
    let n = states.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| states.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let std = (0..dim)
        .map(|j| (states.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

/// Identity observation with Gaussian noise of covariance `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    r_inv: DMatrix<f64>,
    log_norm: f64,
}

impl MeasurementModel {
    /// `r` is given row by row and must be symmetric positive definite.
    pub fn new(r: &[Vec<f64>]) -> Result<Self, TrackError> {
        let dim = r.len();
        if dim == 0 || r.iter().any(|row| row.len() != dim) {
            return Err(TrackError::Invalid("noise covariance must be square".into()));
        }
        let m = DMatrix::from_fn(dim, dim, |i, j| r[i][j]);
        if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) || !m.iter().all(|v| v.is_finite()) {
            return Err(TrackError::NotSpd);
        }
        let chol = m.clone().cholesky().ok_or(TrackError::NotSpd)?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(MeasurementModel {
            r_inv: chol.inverse(),
            log_norm: -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self, TrackError> {
        let r: Vec<Vec<f64>> = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { sigma * sigma } else { 0.0 }).collect())
            .collect();
        Self::new(&r)
    }

    pub fn dim(&self) -> usize {
        self.r_inv.nrows()
    }

    pub fn log_likelihood(&self, z: &[f64], x: &[f64]) -> f64 {
        let d = DVector::from_iterator(z.len(), z.iter().zip(x).map(|(a, b)| a - b));
        self.log_norm - 0.5 * d.dot(&(&self.r_inv * &d))
    }
}

/// Proposes every particle of one component forward by one model step.
fn propagate(
    particles: &mut [Particle],
    model: &(impl ActionModel + ?Sized),
    rng: &mut SimRng,
) -> Result<Vec<usize>, ModelError> {
    let len = particles[0].window.len();
    let dim = particles[0].state().len();
    let data = particles.iter().flat_map(|p| p.window.iter().flatten().copied()).collect();
    let windows = WindowBatch::new(particles.len(), len, dim, data);
    let actions = model.sample_actions(&windows, rng)?;
    let mut bad = Vec::new();
    for (i, p) in particles.iter_mut().enumerate() {
        let next: Vec<f64> = p
            .state()
            .iter()
            .zip(&actions[i * dim..(i + 1) * dim])
            .map(|(s, a)| s + a)
            .collect();
        if !next.iter().all(|v| v.is_finite()) {
            bad.push(i);
        }
        p.window.remove(0);
        p.window.push(next);
    }
    Ok(bad)
}

/// Replaces rejected particles with copies of survivors drawn by weight.
fn repair(particles: &mut [Particle], bad: &[usize], rng: &mut SimRng) -> bool {
    if bad.is_empty() {
        return true;
    }
    let good: Vec<usize> = (0..particles.len()).filter(|i| !bad.contains(i)).collect();
    if good.is_empty() {
        return false;
    }
    let total: f64 = good.iter().map(|&i| particles[i].weight).sum();
    for &b in bad {
        let mut u = rng.random::<f64>() * total;
        let mut pick = *good.last().unwrap();
        for &g in &good {
            u -= particles[g].weight;
            if u < 0.0 {
                pick = g;
                break;
            }
        }
        let weight = particles[b].weight;
        particles[b] = Particle {
            window: particles[pick].window.clone(),
            weight,
        };
    }
    true
}

/// Samples the next state of every particle; weights are left alone.
/// Returns the number of particles that had to be replaced.
pub fn prior_update(
    belief: &mut MixtureBelief,
    model: &(impl ActionModel + ?Sized),
    seed: u64,
    step: usize,
    exec: Execution,
) -> Result<usize, TrackError> {
    let mut work: Vec<(&mut Component, Result<Vec<usize>, ModelError>)> =
        belief.components.iter_mut().map(|c| (c, Ok(Vec::new()))).collect();
    for_each_mut(exec, &mut work, |n, (c, out)| {
        let mut rng = derive_rng(seed, &[PURPOSE_PRIOR, step as u64, n as u64]);
        *out = propagate(&mut c.particles, model, &mut rng);
    });
    let results: Vec<_> = work.into_iter().map(|(_, r)| r).collect();
    let mut replaced = 0;
    for (n, (res, c)) in results.into_iter().zip(belief.components.iter_mut()).enumerate() {
        let bad = res?;
        if !bad.is_empty() {
            log::warn!("step {step}: component {n} rejected {} non-finite particles", bad.len());
            let mut rng = derive_rng(seed, &[PURPOSE_REPAIR, step as u64, n as u64]);
            if !repair(&mut c.particles, &bad, &mut rng) {
                return Err(TrackError::AllRejected { step, component: n });
            }
            replaced += bad.len();
        }
    }
    Ok(replaced)
}

/// Reweights with per-particle log-likelihoods `loglik[n][i]`. Returns
/// `true` when every weight underflowed and the weights were reset to
/// uniform.
pub fn apply_log_likelihoods(belief: &mut MixtureBelief, loglik: &[Vec<f64>]) -> bool {
    // log of π_n · w_{n,i} · L_{n,i}
    let lw: Vec<Vec<f64>> = belief
        .components
        .iter()
        .zip(loglik)
        .map(|(c, ls)| {
            c.particles
                .iter()
                .zip(ls)
                .map(|(p, l)| c.pi.ln() + p.weight.ln() + l)
                .collect()
        })
        .collect();
    let global = lw.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if !global.is_finite() {
        for c in &mut belief.components {
            let n = c.particles.len() as f64;
            c.particles.iter_mut().for_each(|p| p.weight = 1.0 / n);
        }
        log::warn!("all likelihoods underflowed; particle weights reset to uniform");
        return true;
    }
    let mut masses = Vec::with_capacity(lw.len());
    for (c, lws) in belief.components.iter_mut().zip(&lw) {
        let local = lws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if local == f64::NEG_INFINITY {
            // this component explains nothing; keep its weights, drop its mass
            masses.push(0.0);
            continue;
        }
        let e: Vec<f64> = lws.iter().map(|l| (l - local).exp()).collect();
        let s: f64 = e.iter().sum();
        for (p, ei) in c.particles.iter_mut().zip(&e) {
            p.weight = ei / s;
        }
        masses.push((local - global).exp() * s);
    }
    let total: f64 = masses.iter().sum();
    for (c, m) in belief.components.iter_mut().zip(&masses) {
        c.pi = m / total;
    }
    false
}

pub fn measurement_update(belief: &mut MixtureBelief, z: &[f64], model: &MeasurementModel) -> Result<bool, TrackError> {
    if z.len() != model.dim() || !z.iter().all(|v| v.is_finite()) {
        return Err(TrackError::Invalid("measurement must be finite and match the model dimension".into()));
    }
    let loglik: Vec<Vec<f64>> = belief
        .components
        .iter()
        .map(|c| c.particles.iter().map(|p| model.log_likelihood(z, p.state())).collect())
        .collect();
    Ok(apply_log_likelihoods(belief, &loglik))
}

/// Systematic resampling of one particle set; returns the chosen indices.
pub fn systematic_indices(weights: &[f64], rng: &mut SimRng) -> Vec<usize> {
    let n = weights.len();
    let u0 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for k in 0..n {
        let u = u0 + k as f64 / n as f64;
        while u >= cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

fn resample_set(particles: &mut Vec<Particle>, threshold: f64, rng: &mut SimRng) -> bool {
    let n = particles.len();
    let ess = 1.0 / particles.iter().map(|p| p.weight * p.weight).sum::<f64>();
    if ess / n as f64 >= threshold {
        return false;
    }
    let w: Vec<f64> = particles.iter().map(|p| p.weight).collect();
    let idx = systematic_indices(&w, rng);
    *particles = idx
        .into_iter()
        .map(|i| Particle {
            window: particles[i].window.clone(),
            weight: 1.0 / n as f64,
        })
        .collect();
    true
}

/// Resamples every component whose ESS ratio is below `threshold`; `π` is
/// untouched. Returns how many components were resampled.
pub fn resample(belief: &mut MixtureBelief, threshold: f64, seed: u64, step: usize) -> usize {
    let mut count = 0;
    for (n, c) in belief.components.iter_mut().enumerate() {
        let mut rng = derive_rng(seed, &[PURPOSE_RESAMPLE, step as u64, n as u64]);
        if resample_set(&mut c.particles, threshold, &mut rng) {
            count += 1;
        }
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub particles: usize,
    pub ess_threshold: f64,
    pub init_noise: f64,
    pub seed: u64,
    pub keep_clouds: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            particles: 100,
            ess_threshold: 0.5,
            init_noise: 0.01,
            seed: 0,
            keep_clouds: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if self.particles == 0 {
            return Err(TrackError::Invalid("particle count must be positive".into()));
        }
        if !(self.ess_threshold > 0.0 && self.ess_threshold <= 1.0) {
            return Err(TrackError::Invalid(format!(
                "ESS threshold must lie in (0, 1], got {}",
                self.ess_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEstimate {
    pub step: usize,
    pub mean: Vec<f64>,
    pub component_means: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    /// Unweighted statistics of the predicted cloud before reweighting.
    pub cloud_mean: Vec<f64>,
    pub cloud_std: Vec<f64>,
    pub normalization_error: f64,
    pub underflow: bool,
    pub resampled: usize,
    #[serde(skip)]
    pub cloud: Vec<Vec<f64>>,
}

/// Runs predict, update and conditional resampling for each measurement.
/// `windows` seeds one component each.
pub fn track(
    model: &(impl ActionModel + ?Sized),
    windows: &[Vec<Vec<f64>>],
    measurements: &[Vec<f64>],
    meas: &MeasurementModel,
    cfg: &TrackerConfig,
    exec: Execution,
) -> Result<Vec<StepEstimate>, TrackError> {
    cfg.validate()?;
    let mut belief = MixtureBelief::from_windows(windows, cfg.particles, cfg.init_noise, cfg.seed)?;
    let mut out = Vec::with_capacity(measurements.len());
    for (k, z) in measurements.iter().enumerate() {
        let step = k + 1;
        prior_update(&mut belief, model, cfg.seed, step, exec)?;
        let states: Vec<&[f64]> = belief
            .components
            .iter()
            .flat_map(|c| c.particles.iter().map(Particle::state))
            .collect();
        let (cloud_mean, cloud_std) = cloud_stats(&states);
        let cloud = if cfg.keep_clouds {
            states.iter().map(|s| s.to_vec()).collect()
        } else {
            Vec::new()
        };
        let underflow = measurement_update(&mut belief, z, meas)?;
        let est = StepEstimate {
            step,
            mean: belief.mean(),
            component_means: belief.components.iter().map(Component::weighted_mean).collect(),
            pi: belief.components.iter().map(|c| c.pi).collect(),
            cloud_mean,
            cloud_std,
            normalization_error: belief.normalization_error(),
            underflow,
            resampled: 0,
            cloud,
        };
        let resampled = resample(&mut belief, cfg.ess_threshold, cfg.seed, step);
        out.push(StepEstimate { resampled, ..est });
    }
    Ok(out)
}

/// Mean of the particle cloud propagated without measurements, per step.
pub fn open_loop_means(
    model: &(impl ActionModel + ?Sized),
    windows: &[Vec<Vec<f64>>],
    steps: usize,
    cfg: &TrackerConfig,
    exec: Execution,
) -> Result<Vec<Vec<f64>>, TrackError> {
    cfg.validate()?;
    let mut belief = MixtureBelief::from_windows(windows, cfg.particles, cfg.init_noise, cfg.seed)?;
    let mut out = Vec::with_capacity(steps);
    for step in 1..=steps {
        prior_update(&mut belief, model, cfg.seed, step, exec)?;
        out.push(belief.mean());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub steps: usize,
    pub particles: usize,
    pub tracking_rmse: f64,
    pub open_loop_rmse: f64,
    pub max_band_ratio: f64,
}

/// Compares the tracked and open-loop means with the true states
/// `truth[1..=K]`; `truth[0]` is the starting state.
pub fn summarize(
    estimates: &[StepEstimate],
    open_loop: &[Vec<f64>],
    truth: &[Vec<f64>],
    particles: usize,
) -> Result<TrackingSummary, TrackError> {
    let k = estimates.len();
    if truth.len() < k + 1 || open_loop.len() != k {
        return Err(TrackError::Invalid("truth must cover every tracked step".into()));
    }
    let means: Vec<Vec<f64>> = estimates.iter().map(|e| e.mean.clone()).collect();
    let t = &truth[1..=k];
    let err = |e: crate::evalsuite::EvalError| TrackError::Invalid(e.to_string());
    Ok(TrackingSummary {
        steps: k,
        particles,
        tracking_rmse: rmse(&means, t).map_err(err)?,
        open_loop_rmse: rmse(open_loop, t).map_err(err)?,
        max_band_ratio: estimates.iter().map(band_ratio).fold(0.0, f64::max),
    })
}

/// Largest `|mean − cloud_mean| / cloud_std` over components; at most 3
/// means the estimate lies inside the ±3σ band.
pub fn band_ratio(e: &StepEstimate) -> f64 {
    e.mean
        .iter()
        .zip(&e.cloud_mean)
        .zip(&e.cloud_std)
        .map(|((m, c), s)| {
            let d = (m - c).abs();
            if d == 0.0 {
                0.0
            } else {
                d / s
            }
        })
        .fold(0.0, f64::max)
}

/// A single weighted particle set with the same random streams as a
/// one-component [`MixtureBelief`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleFilter {
    pub particles: Vec<Particle>,
    pub seed: u64,
    pub ess_threshold: f64,
}

impl ParticleFilter {
    pub fn new(window: &[Vec<f64>], cfg: &TrackerConfig) -> Result<Self, TrackError> {
        cfg.validate()?;
        let mut rng = derive_rng(cfg.seed, &[PURPOSE_INIT, 0]);
        let particles = (0..cfg.particles)
            .map(|_| Particle {
                window: gaussian_window(window, cfg.init_noise, &mut rng),
                weight: 1.0 / cfg.particles as f64,
            })
            .collect();
        Ok(ParticleFilter {
            particles,
            seed: cfg.seed,
            ess_threshold: cfg.ess_threshold,
        })
    }

    pub fn mean(&self) -> Vec<f64> {
        let dim = self.particles[0].state().len();
        let mut m = vec![0.0; dim];
        for p in &self.particles {
            for (mj, sj) in m.iter_mut().zip(p.state()) {
                *mj += p.weight * sj;
            }
        }
        m
    }

    /// Predict, update and conditionally resample; returns the posterior
    /// mean before resampling.
    pub fn step(
        &mut self,
        model: &(impl ActionModel + ?Sized),
        z: &[f64],
        meas: &MeasurementModel,
        step: usize,
    ) -> Result<Vec<f64>, TrackError> {
        let mut rng = derive_rng(self.seed, &[PURPOSE_PRIOR, step as u64, 0]);
        let bad = propagate(&mut self.particles, model, &mut rng)?;
        if !bad.is_empty() {
            let mut rng = derive_rng(self.seed, &[PURPOSE_REPAIR, step as u64, 0]);
            if !repair(&mut self.particles, &bad, &mut rng) {
                return Err(TrackError::AllRejected { step, component: 0 });
            }
        }
        let lw: Vec<f64> = self
            .particles
            .iter()
            .map(|p| p.weight.ln() + meas.log_likelihood(z, p.state()))
            .collect();
        let top = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top.is_finite() {
            let e: Vec<f64> = lw.iter().map(|l| (l - top).exp()).collect();
            let s: f64 = e.iter().sum();
            for (p, ei) in self.particles.iter_mut().zip(&e) {
                p.weight = ei / s;
            }
        } else {
            let n = self.particles.len() as f64;
            self.particles.iter_mut().for_each(|p| p.weight = 1.0 / n);
        }
        let mean = self.mean();
        let mut rng = derive_rng(self.seed, &[PURPOSE_RESAMPLE, step as u64, 0]);
        resample_set(&mut self.particles, self.ess_threshold, &mut rng);
        Ok(mean)
    }
}
