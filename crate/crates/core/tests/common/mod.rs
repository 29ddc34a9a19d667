//! Shared checks for the integration and acceptance tests.
#![allow(dead_code)]

use diffcore::{DiffError, Graph, Tensor, Var};
use gantrack::gameopt::{field_and_norm_grad, gradient_field, GameState, GanBatch, GanGame, TwoPlayerGame};
use gantrack::nets::{DiscriminatorNet, GeneratorNet, NetConfig, NetProfile, NoiseKind};
use gantrack::par::{derive_rng, SimRng};
use rand::Rng;

pub const FD_EPS: f64 = 1e-5;

/// ‖a − b‖ / max(‖a‖, ‖b‖).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = na.max(nb);
    if d < 1e-12 {
        diff
    } else {
        diff / d
    }
}

pub type Scalar<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var, DiffError> + 'a;

fn eval(f: &Scalar, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).item().unwrap()
}

/// Relative error between reverse-mode and central-difference gradients of
/// a scalar function of `inputs`.
pub fn gradient_error(f: &Scalar, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let analytic = g.backward(out, &vars).unwrap().flatten();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            numeric.push((eval(f, &plus) - eval(f, &minus)) / (2.0 * FD_EPS));
        }
    }
    rel_err(&analytic, &numeric)
}

pub fn random_tensor(rng: &mut SimRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinks of relu and clamps are not
/// straddled by the finite difference.
pub fn away_from_zero(rng: &mut SimRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_sum(g: &mut Graph, y: Var, rng: &mut SimRng) -> Result<Var, DiffError> {
    let shape = g.shape(y).to_vec();
    let w = random_tensor(rng, &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Worst gradient error over every primitive on shapes and data drawn from
/// `seed`.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = derive_rng(seed, &[0x7072]);
    let r = rng.random_range(1..5);
    let c = rng.random_range(1..5);
    let k = rng.random_range(1..5);
    let w_seed: u64 = rng.random();
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor>, f: &Scalar| {
        let wrapped = |g: &mut Graph, v: &[Var]| {
            let y = f(g, v)?;
            let mut wr = derive_rng(w_seed, &[]);
            weighted_sum(g, y, &mut wr)
        };
        out.push((name, gradient_error(&wrapped, &inputs)));
    };
    let a = away_from_zero(&mut rng, &[r, c]);
    let b = away_from_zero(&mut rng, &[r, c]);
    let pos = random_tensor(&mut rng, &[r, c], 0.2, 3.0);
    let m = away_from_zero(&mut rng, &[c, k]);
    let row = away_from_zero(&mut rng, &[c]);
    let mt = away_from_zero(&mut rng, &[k, c]);

    check("matmul", vec![a.clone(), m.clone()], &|g, v| g.matmul(v[0], v[1]));
    check("matmul_t", vec![a.clone(), mt.clone()], &|g, v| g.matmul_t(v[0], v[1], false, true));
    check("matmul_tt", vec![a.clone(), b.clone()], &|g, v| g.matmul_t(v[0], v[1], true, false));
    check("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]));
    check("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]));
    check("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]));
    check("div", vec![a.clone(), pos.clone()], &|g, v| g.div(v[0], v[1]));
    check("neg", vec![a.clone()], &|g, v| Ok(g.neg(v[0])));
    check("affine", vec![a.clone()], &|g, v| Ok(g.affine(v[0], -1.7, 0.3)));
    check("scale", vec![a.clone()], &|g, v| Ok(g.scale(v[0], 2.5)));
    check("add_row", vec![a.clone(), row.clone()], &|g, v| g.add_row(v[0], v[1]));
    check("sum_rows", vec![a.clone()], &|g, v| g.sum_rows(v[0]));
    check("broadcast_rows", vec![row.clone()], &|g, v| g.broadcast_rows(v[0], 3));
    check("sum", vec![a.clone()], &|g, v| Ok(g.sum(v[0])));
    check("mean", vec![a.clone()], &|g, v| Ok(g.mean(v[0])));
    check("reshape", vec![a.clone()], &|g, v| g.reshape(v[0], &[c, r]));
    check("concat_cols", vec![a.clone(), b.clone()], &|g, v| g.concat_cols(&[v[0], v[1]]));
    check("slice_cols", vec![a.clone()], &|g, v| g.slice_cols(v[0], c / 2, c - c / 2));
    check("pad_cols", vec![a.clone()], &|g, v| g.pad_cols(v[0], 1, c + 2));
    check("tanh", vec![a.clone()], &|g, v| Ok(g.tanh(v[0])));
    check("sigmoid", vec![a.clone()], &|g, v| Ok(g.sigmoid(v[0])));
    check("relu", vec![a.clone()], &|g, v| Ok(g.relu(v[0])));
    check("log", vec![pos.clone()], &|g, v| Ok(g.log(v[0])));
    check("exp", vec![a.clone()], &|g, v| Ok(g.exp(v[0])));
    check("square", vec![a.clone()], &|g, v| Ok(g.square(v[0])));
    check("clamp_min", vec![a.clone()], &|g, v| Ok(g.clamp_min(v[0], 0.05)));
    out
}

/// A tiny network configuration drawn from `seed`.
pub fn tiny_config(seed: u64) -> (NetConfig, usize, usize) {
    let mut rng = derive_rng(seed, &[0x636667]);
    let profile = NetProfile {
        hidden: rng.random_range(2..5),
        fc_layers: rng.random_range(1..3),
        fc_width: rng.random_range(2..5),
        noise_dim: rng.random_range(1..3),
    };
    let cfg = NetConfig {
        cond_dim: rng.random_range(1..4),
        action_dim: rng.random_range(1..3),
        profile,
        noise: NoiseKind::Normal,
    };
    let len = rng.random_range(1..4);
    let batch = rng.random_range(1..4);
    (cfg, len, batch)
}

pub struct TinyGan {
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub batch: GanBatch,
}

impl TinyGan {
    pub fn new(seed: u64) -> Self {
        let (cfg, len, batch) = tiny_config(seed);
        let mut rng = derive_rng(seed, &[0x6e6574]);
        let mut generator = GeneratorNet::new(cfg, &mut rng);
        let mut discriminator = DiscriminatorNet::new(cfg, &mut rng);
        // larger weights than the default init exercise the nonlinearities
        for t in generator.params.tensors_mut().chain(discriminator.params.tensors_mut()) {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let cond = (0..len)
            .map(|_| random_tensor(&mut rng, &[batch, cfg.cond_dim], -1.5, 1.5))
            .collect();
        let noise = generator.sample_noise(batch, len, &mut rng);
        let real = random_tensor(&mut rng, &[batch, cfg.action_dim], -1.5, 1.5);
        TinyGan {
            generator,
            discriminator,
            batch: GanBatch { cond, real, noise },
        }
    }

    pub fn game(&self) -> GanGame<'_> {
        GanGame {
            generator: &self.generator,
            discriminator: &self.discriminator,
            batch: &self.batch,
        }
    }

    fn constants(&self, g: &mut Graph) -> (Vec<Var>, Vec<Var>) {
        let c = self.batch.cond.iter().map(|t| g.constant(t.clone())).collect();
        let z = self.batch.noise.iter().map(|t| g.constant(t.clone())).collect();
        (c, z)
    }

    /// Generator output, reduced by a fixed weighting, against all
    /// generator parameters.
    pub fn generator_error(&self, seed: u64) -> f64 {
        let f = |g: &mut Graph, v: &[Var]| {
            let (c, z) = self.constants(g);
            let y = self.generator.generate(g, v, &c, &z).unwrap();
            weighted_sum(g, y, &mut derive_rng(seed, &[1]))
        };
        gradient_error(&f, &self.generator.params.tensors().cloned().collect::<Vec<_>>())
    }

    /// Mean `log D(y | x)` against all discriminator parameters and `y`.
    pub fn discriminator_error(&self) -> f64 {
        let n = self.discriminator.params.len();
        let f = |g: &mut Graph, v: &[Var]| {
            let (c, _) = self.constants(g);
            let d = self.discriminator.discriminate(g, &v[..n], &c, v[n]).unwrap();
            let l = g.log(d);
            Ok(g.mean(l))
        };
        let mut inputs: Vec<Tensor> = self.discriminator.params.tensors().cloned().collect();
        inputs.push(self.batch.real.clone());
        gradient_error(&f, &inputs)
    }

    /// The gradient field of both adversarial losses against finite
    /// differences of each loss in its own player's parameters.
    pub fn field_error(&self) -> f64 {
        let game = self.game();
        let state = game.state();
        let v = gradient_field(&game, &state).unwrap().v;
        let losses = |x: &[f64]| {
            let s = GameState {
                x: x.to_vec(),
                theta_len: state.theta_len,
            };
            let mut g = Graph::new();
            let rec = game.record(&mut g, &s).unwrap();
            (
                g.value(rec.disc_loss).item().unwrap(),
                g.value(rec.gen_loss).item().unwrap(),
            )
        };
        let numeric: Vec<f64> = (0..state.x.len())
            .map(|i| {
                let mut p = state.x.clone();
                p[i] += FD_EPS;
                let mut m = state.x.clone();
                m[i] -= FD_EPS;
                let (dp, gp) = losses(&p);
                let (dm, gm) = losses(&m);
                let d = if i < state.theta_len { dp - dm } else { gp - gm };
                -d / (2.0 * FD_EPS)
            })
            .collect();
        rel_err(&v, &numeric)
    }

    /// `∇ ½‖v‖²` from double backprop against finite differences of
    /// `½‖v‖²` at `coords` random coordinates.
    pub fn norm_grad_error(&self, coords: usize, seed: u64) -> f64 {
        let game = self.game();
        let state = game.state();
        let (_, r) = field_and_norm_grad(&game, &state).unwrap();
        let half_sq = |x: &[f64]| {
            let s = GameState {
                x: x.to_vec(),
                theta_len: state.theta_len,
            };
            let v = gradient_field(&game, &s).unwrap().v;
            0.5 * v.iter().map(|a| a * a).sum::<f64>()
        };
        let mut rng = derive_rng(seed, &[2]);
        let idx: Vec<usize> = if coords >= state.x.len() {
            (0..state.x.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, state.x.len(), coords).into_vec()
        };
        let mut a = Vec::new();
        let mut n = Vec::new();
        for i in idx {
            let mut p = state.x.clone();
            p[i] += FD_EPS;
            let mut m = state.x.clone();
            m[i] -= FD_EPS;
            n.push((half_sq(&p) - half_sq(&m)) / (2.0 * FD_EPS));
            a.push(r[i]);
        }
        rel_err(&a, &n)
    }
}
