//! Gaussian mixture regression.
//!
//! A full-covariance mixture is fitted to joint vectors `[input ∥ output]`
//! by EM, and outputs are sampled from the mixture conditioned on the
//! input. The covariance update adds a ridge: EM maximizes the log-likelihood
//! plus the penalty `−½ c Σ_k tr(Σ_k⁻¹)` with `c = ridge · N / K`, whose
//! maximizer is `Σ_k = S_k + (c / N_k) I`. With balanced components that is
//! `S_k + ridge · I`, and EM stays monotone in the penalized objective.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointError, Container};
use crate::features::{Normalizer, WindowBatch};
use crate::par::{derive_rng, SimRng};
use crate::policy::{ActionModel, ModelError};
use diffcore::Tensor;

pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, thiserror::Error)]
pub enum GmrError {
    #[error(
        "covariance of component {component} is singular (condition number {condition:e}); \
         a shorter flattened history or a larger ridge may help"
    )]
    SingularCovariance { component: usize, condition: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmrConfig {
    pub components: usize,
    pub ridge: f64,
    pub max_iter: usize,
    /// Stop once the objective improves by less than `tol · |objective|`.
    pub tol: f64,
    pub seed: u64,
}

impl Default for GmrConfig {
    fn default() -> Self {
        GmrConfig {
            components: 8,
            ridge: 1e-6,
            max_iter: 100,
            tol: 1e-10,
            seed: 0,
        }
    }
}

/// Mixture over `input_dim + output_dim` joint coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GmrModel {
    pub input_dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Penalized objective after each E-step, starting at the
    /// initialization.
    pub objective: Vec<f64>,
    /// Plain data log-likelihood at the same points.
    pub log_likelihood: Vec<f64>,
}

fn log_gauss(chol: &Cholesky<f64, Dyn>, log_det: f64, d: &DVector<f64>) -> f64 {
    let z = chol.l().solve_lower_triangular(d).expect("triangular solve");
    -0.5 * (d.len() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
}

fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_condition(k: usize, cov: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, GmrError> {
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(GmrError::SingularCovariance { component: k, condition });
    }
    cov.clone()
        .cholesky()
        .ok_or(GmrError::SingularCovariance { component: k, condition })
}

impl GmrModel {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, DVector::len)
    }

    pub fn output_dim(&self) -> usize {
        self.dim() - self.input_dim
    }

    fn factors(&self) -> Result<Vec<(Cholesky<f64, Dyn>, f64)>, GmrError> {
        self.covs
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let ch = check_condition(k, c)?;
                let ld = chol_log_det(&ch);
                Ok((ch, ld))
            })
            .collect()
    }

    /// Per-point component log-densities `log π_k + log N(x | μ_k, Σ_k)`.
    fn joint_logs(&self, data: &[DVector<f64>]) -> Result<Vec<Vec<f64>>, GmrError> {
        let f = self.factors()?;
        Ok(data
            .iter()
            .map(|x| {
                (0..self.weights.len())
                    .map(|k| self.weights[k].ln() + log_gauss(&f[k].0, f[k].1, &(x - &self.means[k])))
                    .collect()
            })
            .collect())
    }

    pub fn log_likelihood(&self, data: &[DVector<f64>]) -> Result<f64, GmrError> {
        Ok(self.joint_logs(data)?.iter().map(|l| logsumexp(l)).sum())
    }

    /// Fits `config.components` components to `data` (rows of equal
    /// length). The first `input_dim` coordinates are the conditioning
    /// input.
    pub fn fit(data: &[Vec<f64>], input_dim: usize, config: &GmrConfig) -> Result<(Self, EmTrace), GmrError> {
        let n = data.len();
        let k = config.components;
        let dim = data.first().map_or(0, Vec::len);
        if k == 0 || n < k || dim <= input_dim || input_dim == 0 {
            return Err(GmrError::Invalid(format!(
                "need at least {k} points with both input and output coordinates (got {n} of dimension {dim})"
            )));
        }
        if data.iter().any(|r| r.len() != dim || !r.iter().all(|v| v.is_finite())) {
            return Err(GmrError::Invalid("rows must be finite and of equal length".into()));
        }
        if !(config.ridge > 0.0) {
            return Err(GmrError::Invalid("ridge must be positive".into()));
        }
        let xs: Vec<DVector<f64>> = data.iter().map(|r| DVector::from_column_slice(r)).collect();
        let c = config.ridge * n as f64 / k as f64;

        // initialization: random distinct points as means, pooled covariance
        let mut rng = derive_rng(config.seed, &[0x676d_72]);
        let mean_all = xs.iter().fold(DVector::zeros(dim), |a, x| a + x) / n as f64;
        let mut pooled = DMatrix::zeros(dim, dim);
        for x in &xs {
            let d = x - &mean_all;
            pooled += &d * d.transpose();
        }
        pooled /= n as f64;
        for i in 0..dim {
            pooled[(i, i)] += config.ridge;
        }
        let mut model = GmrModel {
            input_dim,
            weights: vec![1.0 / k as f64; k],
            means: sample(&mut rng, n, k).iter().map(|i| xs[i].clone()).collect(),
            covs: vec![pooled; k],
        };

        let penalty = |m: &GmrModel| -> Result<f64, GmrError> {
            let mut p = 0.0;
            for (j, cov) in m.covs.iter().enumerate() {
                let ch = check_condition(j, cov)?;
                p += ch.inverse().trace();
            }
            Ok(-0.5 * c * p)
        };

        let mut trace = EmTrace {
            objective: Vec::new(),
            log_likelihood: Vec::new(),
        };
        for _ in 0..=config.max_iter {
            // E-step
            let logs = model.joint_logs(&xs)?;
            let lse: Vec<f64> = logs.iter().map(|l| logsumexp(l)).collect();
            let ll: f64 = lse.iter().sum();
            let obj = ll + penalty(&model)?;
            let converged = trace
                .objective
                .last()
                .is_some_and(|&prev| (obj - prev).abs() <= config.tol * obj.abs().max(1.0));
            trace.objective.push(obj);
            trace.log_likelihood.push(ll);
            if converged || trace.objective.len() > config.max_iter {
                break;
            }
            let resp: Vec<Vec<f64>> = logs
                .iter()
                .zip(&lse)
                .map(|(l, s)| l.iter().map(|v| (v - s).exp()).collect())
                .collect();
            // M-step
            for j in 0..k {
                let nk: f64 = resp.iter().map(|r| r[j]).sum();
                if nk <= 0.0 {
                    continue;
                }
                let mu = xs.iter().zip(&resp).fold(DVector::zeros(dim), |a, (x, r)| a + x * r[j]) / nk;
                let mut s = DMatrix::zeros(dim, dim);
                for (x, r) in xs.iter().zip(&resp) {
                    let d = x - &mu;
                    s.ger(r[j], &d, &d, 1.0);
                }
                s /= nk;
                for i in 0..dim {
                    s[(i, i)] += c / nk;
                }
                // keep exact symmetry
                let s = (&s + s.transpose()) * 0.5;
                model.weights[j] = nk / n as f64;
                model.means[j] = mu;
                model.covs[j] = s;
            }
            let total: f64 = model.weights.iter().sum();
            model.weights.iter_mut().for_each(|w| *w /= total);
        }
        model.factors()?;
        Ok((model, trace))
    }

    /// Precomputes the conditional distributions used by [`Self::sample`].
    pub fn conditioner(&self) -> Result<Conditioner, GmrError> {
        let di = self.input_dim;
        let dout = self.output_dim();
        let mut parts = Vec::with_capacity(self.weights.len());
        for (k, cov) in self.covs.iter().enumerate() {
            let sxx = cov.view((0, 0), (di, di)).into_owned();
            let syx = cov.view((di, 0), (dout, di)).into_owned();
            let syy = cov.view((di, di), (dout, dout)).into_owned();
            let cxx = check_condition(k, &sxx)?;
            // A = Σ_yx Σ_xx⁻¹
            let a = cxx.solve(&syx.transpose()).transpose();
            let cond_cov = &syy - &a * syx.transpose();
            let cond_cov = (&cond_cov + cond_cov.transpose()) * 0.5;
            let cl = cond_cov
                .clone()
                .cholesky()
                .or_else(|| {
                    let mut j = cond_cov.clone();
                    for i in 0..dout {
                        j[(i, i)] += 1e-12 * cond_cov.diagonal().amax().max(1e-300);
                    }
                    j.cholesky()
                })
                .ok_or(GmrError::SingularCovariance {
                    component: k,
                    condition: f64::INFINITY,
                })?;
            let log_det = chol_log_det(&cxx);
            parts.push(CondPart {
                log_weight: self.weights[k].ln(),
                mu_x: self.means[k].rows(0, di).into_owned(),
                mu_y: self.means[k].rows(di, dout).into_owned(),
                a,
                chol_xx: cxx,
                log_det_xx: log_det,
                chol_cond: cl.l(),
            });
        }
        Ok(Conditioner { parts })
    }
}

struct CondPart {
    log_weight: f64,
    mu_x: DVector<f64>,
    mu_y: DVector<f64>,
    a: DMatrix<f64>,
    chol_xx: Cholesky<f64, Dyn>,
    log_det_xx: f64,
    chol_cond: DMatrix<f64>,
}

/// The mixture conditioned on an input: per-component responsibilities
/// and Gaussian conditionals.
pub struct Conditioner {
    parts: Vec<CondPart>,
}

impl Conditioner {
    /// `(responsibilities, conditional means)` at input `x`.
    pub fn condition(&self, x: &[f64]) -> (Vec<f64>, Vec<DVector<f64>>) {
        let xv = DVector::from_column_slice(x);
        let logs: Vec<f64> = self
            .parts
            .iter()
            .map(|p| p.log_weight + log_gauss(&p.chol_xx, p.log_det_xx, &(&xv - &p.mu_x)))
            .collect();
        let s = logsumexp(&logs);
        let resp = logs.iter().map(|l| (l - s).exp()).collect();
        let means = self.parts.iter().map(|p| &p.mu_y + &p.a * (&xv - &p.mu_x)).collect();
        (resp, means)
    }

    /// `E[y | x]`.
    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        let (r, m) = self.condition(x);
        let mut out = DVector::zeros(m[0].len());
        for (rk, mk) in r.iter().zip(&m) {
            out += mk * *rk;
        }
        out.iter().copied().collect()
    }

    pub fn sample(&self, x: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let (r, m) = self.condition(x);
        let mut u = rng.random::<f64>();
        let mut k = r.len() - 1;
        for (i, ri) in r.iter().enumerate() {
            u -= ri;
            if u < 0.0 {
                k = i;
                break;
            }
        }
        let e = DVector::from_iterator(m[k].len(), (0..m[k].len()).map(|_| StandardNormal.sample(rng)));
        (&m[k] + &self.parts[k].chol_cond * e).iter().copied().collect()
    }
}

pub const GMR_KIND: &str = "gmr";

#[derive(Serialize, Deserialize)]
struct GmrHeader {
    input_dim: usize,
    components: usize,
    dim: usize,
    normalizer: Normalizer,
    window_len: usize,
}

/// GMR over flattened, normalized history windows.
pub struct GmrPolicy {
    pub model: GmrModel,
    pub normalizer: Normalizer,
    pub window_len: usize,
    cond: Conditioner,
}

impl GmrPolicy {
    pub fn new(model: GmrModel, normalizer: Normalizer, window_len: usize) -> Result<Self, GmrError> {
        let cond = model.conditioner()?;
        Ok(GmrPolicy {
            model,
            normalizer,
            window_len,
            cond,
        })
    }

    /// Flattened encoded inputs, one row per window.
    pub fn inputs(normalizer: &Normalizer, windows: &WindowBatch) -> Vec<Vec<f64>> {
        let enc = normalizer.encode_windows(windows);
        (0..windows.batch)
            .map(|b| enc.iter().flat_map(|t| t.row(b).iter().copied()).collect())
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let header = GmrHeader {
            input_dim: self.model.input_dim,
            components: self.model.weights.len(),
            dim: self.model.dim(),
            normalizer: self.normalizer.clone(),
            window_len: self.window_len,
        };
        let mut c = Container::new(GMR_KIND, serde_json::to_value(header).expect("header"));
        c.push("weights", Tensor::from_vec(self.model.weights.clone()));
        for (k, (m, s)) in self.model.means.iter().zip(&self.model.covs).enumerate() {
            c.push(format!("mean{k}"), Tensor::from_vec(m.iter().copied().collect()));
            let rows: Vec<f64> = (0..s.nrows()).flat_map(|i| (0..s.ncols()).map(move |j| s[(i, j)])).collect();
            c.push(format!("cov{k}"), Tensor::matrix(s.nrows(), s.ncols(), rows).expect("cov shape"));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, GmrError> {
        c.expect_kind(GMR_KIND)?;
        let h: GmrHeader = serde_json::from_value(c.meta.clone())
            .map_err(|e| CheckpointError::Corrupt(format!("gmr header: {e}")))?;
        let weights = c.get_shaped("weights", &[h.components])?.data().to_vec();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for k in 0..h.components {
            means.push(DVector::from_column_slice(c.get_shaped(&format!("mean{k}"), &[h.dim])?.data()));
            let t = c.get_shaped(&format!("cov{k}"), &[h.dim, h.dim])?;
            covs.push(DMatrix::from_row_slice(h.dim, h.dim, t.data()));
        }
        let model = GmrModel {
            input_dim: h.input_dim,
            weights,
            means,
            covs,
        };
        GmrPolicy::new(model, h.normalizer, h.window_len)
    }
}

impl ActionModel for GmrPolicy {
    fn action_dim(&self) -> usize {
        self.model.output_dim()
    }

    fn sample_actions(&self, windows: &WindowBatch, rng: &mut SimRng) -> Result<Vec<f64>, ModelError> {
        if windows.len != self.window_len {
            return Err(ModelError::Other(format!(
                "GMR was fitted on windows of {} states, got {}",
                self.window_len, windows.len
            )));
        }
        let mut out = Vec::with_capacity(windows.batch * self.action_dim());
        for x in Self::inputs(&self.normalizer, windows) {
            let y = self.cond.sample(&x, rng);
            let t = Tensor::matrix(1, y.len(), y).expect("action shape");
            out.extend(self.normalizer.decode_actions(&t));
        }
        Ok(out)
    }
}
