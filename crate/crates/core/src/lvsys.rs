//! Lotka-Volterra predator-prey dynamics: `ẋ = ax − bxy`, `ẏ = cxy − dy`.
//!
//! Integration is classical fourth-order Runge-Kutta. Each step is stored as
//! an increment, and the next state is `state + increment` exactly, so
//! a trajectory is precisely the running sum of its actions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Case, SystemKind, TrajectoryDataset};
use crate::par::{derive_rng, map_indexed, Execution, SimRng};

pub type State = [f64; 2];

/// States must stay inside `[0, STATE_LIMIT)` on both axes. Zero is allowed
/// because each axis is an invariant set of the dynamics.
pub const STATE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LvError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("integration left the valid region at step {step}: state {state:?}")]
    Blowup { step: usize, state: State },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LvParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl LvParams {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self, LvError> {
        let p = LvParams { a, b, c, d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LvError> {
        if [self.a, self.b, self.c, self.d].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(LvError::InvalidConfig(format!("rates must be positive, got {self:?}")))
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.a, self.b, self.c, self.d]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, LvError> {
        match v {
            [a, b, c, d] => LvParams::new(*a, *b, *c, *d),
            _ => Err(LvError::InvalidConfig(format!("expected 4 rates, got {}", v.len()))),
        }
    }

    /// `V(x, y) = c·x − d·ln x + b·y − a·ln y`, constant along exact orbits.
    pub fn conserved_quantity(&self, s: State) -> f64 {
        self.c * s[0] - self.d * s[0].ln() + self.b * s[1] - self.a * s[1].ln()
    }

    /// Interior fixed point `(d/c, a/b)`.
    pub fn equilibrium(&self) -> State {
        [self.d / self.c, self.a / self.b]
    }
}

/// A full experiment configuration for one system instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LvConfig {
    pub params: LvParams,
    pub initial: State,
    pub dt: f64,
    pub horizon_steps: usize,
    pub history_steps: usize,
}

impl LvConfig {
    pub fn validate(&self) -> Result<(), LvError> {
        self.params.validate()?;
        if !(self.initial.iter().all(|v| v.is_finite() && *v > 0.0)) {
            return Err(LvError::InvalidConfig(format!(
                "initial populations must be positive, got {:?}",
                self.initial
            )));
        }
        check_dt(self.dt)
    }
}

fn check_dt(dt: f64) -> Result<(), LvError> {
    if dt.is_finite() && dt > 0.0 {
        Ok(())
    } else {
        Err(LvError::InvalidConfig(format!("dt must be positive, got {dt}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// States in integration order with uniform spacing `dt`.
///
/// For a backward integration `states[k]` is the state `k` steps *before*
/// the origin; use [`Trajectory::chronological`] to reorder.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    /// `states[k + 1] == states[k] + increments[k]` exactly.
    pub increments: Vec<State>,
    pub dt: f64,
    pub direction: Direction,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> State {
        *self.states.last().expect("trajectory holds at least its origin")
    }

    /// States in increasing time order.
    pub fn chronological(&self) -> Vec<State> {
        match self.direction {
            Direction::Forward => self.states.clone(),
            Direction::Backward => self.states.iter().rev().copied().collect(),
        }
    }
}

pub fn lv_derivative(s: State, p: &LvParams) -> State {
    let [x, y] = s;
    [p.a * x - p.b * x * y, p.c * x * y - p.d * y]
}

pub fn rk4_increment(s: State, p: &LvParams, h: f64) -> State {
    let f = |s: State| lv_derivative(s, p);
    let add = |s: State, k: State, w: f64| [s[0] + w * k[0], s[1] + w * k[1]];
    let k1 = f(s);
    let k2 = f(add(s, k1, h / 2.0));
    let k3 = f(add(s, k2, h / 2.0));
    let k4 = f(add(s, k3, h));
    [
        h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

fn in_bounds(s: State) -> bool {
    s.iter().all(|v| v.is_finite() && *v >= 0.0 && *v < STATE_LIMIT)
}

/// One RK4 step of size `dt` in the given direction.
pub fn step(s: State, p: &LvParams, dt: f64, direction: Direction) -> State {
    let h = match direction {
        Direction::Forward => dt,
        Direction::Backward => -dt,
    };
    rk4_increment(s, p, h)
}

/// Integrates `steps` RK4 steps from `s`. Backward integration uses the
/// negated vector field.
pub fn integrate(
    s: State,
    p: &LvParams,
    dt: f64,
    steps: usize,
    direction: Direction,
) -> Result<Trajectory, LvError> {
    p.validate()?;
    check_dt(dt)?;
    if steps == 0 {
        return Err(LvError::InvalidConfig("at least one step is required".into()));
    }
    if !in_bounds(s) {
        return Err(LvError::Blowup { step: 0, state: s });
    }
    let mut states = Vec::with_capacity(steps + 1);
    let mut increments = Vec::with_capacity(steps);
    states.push(s);
    let mut cur = s;
    for k in 1..=steps {
        let inc = step(cur, p, dt, direction);
        let next = [cur[0] + inc[0], cur[1] + inc[1]];
        if !in_bounds(next) {
            return Err(LvError::Blowup { step: k, state: next });
        }
        increments.push(inc);
        states.push(next);
        cur = next;
    }
    Ok(Trajectory {
        states,
        increments,
        dt,
        direction,
    })
}

/// The `history_steps + 1` states ending at `s0`, oldest first, obtained by
/// integrating backward from `s0`.
pub fn history_window(s0: State, p: &LvParams, dt: f64, history_steps: usize) -> Result<Vec<State>, LvError> {
    if history_steps == 0 {
        return Ok(vec![s0]);
    }
    Ok(integrate(s0, p, dt, history_steps, Direction::Backward)?.chronological())
}

/// Sampling ranges for rates and initial populations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingRanges {
    pub param: (f64, f64),
    pub initial: (f64, f64),
}

impl Default for SamplingRanges {
    fn default() -> Self {
        SamplingRanges {
            param: (3.0, 5.0),
            initial: (1.0, 3.0),
        }
    }
}

impl SamplingRanges {
    pub fn validate(&self) -> Result<(), LvError> {
        for (name, (lo, hi)) in [("param", self.param), ("initial", self.initial)] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(LvError::InvalidConfig(format!(
                    "{name} range min {lo} exceeds max {hi}"
                )));
            }
            if lo <= 0.0 {
                return Err(LvError::InvalidConfig(format!("{name} range must be positive")));
            }
        }
        Ok(())
    }

    fn draw(rng: &mut SimRng, (lo, hi): (f64, f64)) -> f64 {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    }

    pub fn draw_params(&self, rng: &mut SimRng) -> LvParams {
        let mut r = || Self::draw(rng, self.param);
        LvParams {
            a: r(),
            b: r(),
            c: r(),
            d: r(),
        }
    }

    pub fn draw_initial(&self, rng: &mut SimRng) -> State {
        [Self::draw(rng, self.initial), Self::draw(rng, self.initial)]
    }
}

/// Draws a rate set and initial state from `rng`, retrying until `build`
/// succeeds. Gives up after a fixed number of attempts.
pub fn draw_until_valid<T>(
    rng: &mut SimRng,
    ranges: &SamplingRanges,
    mut build: impl FnMut(LvParams, State) -> Result<T, LvError>,
) -> Result<T, LvError> {
    const ATTEMPTS: usize = 1000;
    let mut last = None;
    for _ in 0..ATTEMPTS {
        let params = ranges.draw_params(rng);
        let s0 = ranges.draw_initial(rng);
        match build(params, s0) {
            Ok(t) => return Ok(t),
            Err(e @ LvError::Blowup { .. }) => {
                log::warn!("redrawing case {params:?} from {s0:?}: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| LvError::InvalidConfig("no valid case drawn".into())))
}

/// Dataset of forward trajectories of `history_steps + horizon_steps + 1`
/// states with randomly drawn rates and initial states.
pub fn sample_dataset(
    count: usize,
    seed: u64,
    ranges: &SamplingRanges,
    dt: f64,
    history_steps: usize,
    horizon_steps: usize,
    exec: Execution,
) -> Result<TrajectoryDataset, LvError> {
    if count == 0 {
        return Err(LvError::InvalidConfig("count must be at least 1".into()));
    }
    if horizon_steps == 0 {
        return Err(LvError::InvalidConfig("horizon must be at least one step".into()));
    }
    ranges.validate()?;
    check_dt(dt)?;
    let steps = history_steps + horizon_steps;
    let cases = map_indexed(exec, count, |i| {
        let mut rng = derive_rng(seed, &[i as u64]);
        draw_until_valid(&mut rng, ranges, |params, s0| {
            let traj = integrate(s0, &params, dt, steps, Direction::Forward)?;
            Ok(Case {
                id: i,
                params: params.to_vec(),
                initial: s0.to_vec(),
                trajectory: traj.states.iter().map(|s| s.to_vec()).collect(),
                actions: traj.increments.iter().map(|s| s.to_vec()).collect(),
            })
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    Ok(TrajectoryDataset::new(
        SystemKind::LotkaVolterra,
        2,
        dt,
        history_steps,
        horizon_steps,
        seed,
        Some(*ranges),
        cases,
    ))
}
