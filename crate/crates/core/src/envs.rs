//! Built-in deterministic continuous-control tasks and a vectorized,
//! auto-resetting wrapper.
//!
//! PointMass2D is a damped double integrator steered to the origin
//! (near-linear-quadratic, the easy regime); Pendulum is the classic
//! swing-up (nonlinear, the harder regime). Both truncate at 200 steps and
//! never terminate early, rewards are nonpositive with zero attained only at
//! the goal/upright fixed points under zero action, and trajectories are
//! bit-reproducible given `(seed, action sequence)`.

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const EPISODE_HORIZON: usize = 200;

const DT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    PointMass,
    Pendulum,
}

impl EnvKind {
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "pointmass" => Ok(EnvKind::PointMass),
            "pendulum" => Ok(EnvKind::Pendulum),
            other => Err(Error::Config(format!("unknown env id '{other}'"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            EnvKind::PointMass => "pointmass",
            EnvKind::Pendulum => "pendulum",
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            EnvKind::PointMass => 4,
            EnvKind::Pendulum => 3,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvKind::PointMass => 2,
            EnvKind::Pendulum => 1,
        }
    }

    pub fn action_bound(&self) -> f64 {
        match self {
            EnvKind::PointMass => 1.0,
            EnvKind::Pendulum => 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub kind: EnvKind,
    /// PointMass: `[px, py, vx, vy]`. Pendulum: `[theta, theta_dot]`.
    internal: Vec<f64>,
    pub steps_elapsed: usize,
    rng: RngStream,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

fn wrap_angle(x: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut y = (x + std::f64::consts::PI) % two_pi;
    if y < 0.0 {
        y += two_pi;
    }
    y - std::f64::consts::PI
}

impl EnvState {
    /// Fresh environment; initial conditions drawn from the seed's stream.
    pub fn reset(kind: EnvKind, seed: u64) -> EnvState {
        let rng = RngStream::named(seed, "env-reset");
        Self::init_from(kind, rng)
    }

    /// Environment pinned at a chosen internal state (fixed-point checks and
    /// degenerate-policy tests).
    pub fn from_internal(kind: EnvKind, internal: Vec<f64>, seed: u64) -> EnvState {
        let mut state = Self::reset(kind, seed);
        assert_eq!(internal.len(), state.internal.len());
        state.internal = internal;
        state
    }

    /// New episode continuing this state's random stream (auto-reset).
    fn reinit(&self) -> EnvState {
        Self::init_from(self.kind, self.rng.clone())
    }

    fn init_from(kind: EnvKind, mut rng: RngStream) -> EnvState {
        let internal = match kind {
            EnvKind::PointMass => {
                vec![rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), 0.0, 0.0]
            }
            EnvKind::Pendulum => {
                vec![
                    rng.range(-std::f64::consts::PI, std::f64::consts::PI),
                    rng.range(-1.0, 1.0),
                ]
            }
        };
        EnvState {
            kind,
            internal,
            steps_elapsed: 0,
            rng,
        }
    }

    pub fn observation(&self) -> Vec<f64> {
        match self.kind {
            EnvKind::PointMass => {
                // (p - goal, v) with the goal at the origin.
                self.internal.clone()
            }
            EnvKind::Pendulum => {
                let (theta, theta_dot) = (self.internal[0], self.internal[1]);
                vec![theta.cos(), theta.sin(), theta_dot]
            }
        }
    }

    /// One transition. Actions are clipped to the admissible box, never
    /// rejected. Truncates at [`EPISODE_HORIZON`]; neither task terminates.
    pub fn step(&self, action: &[f64]) -> (EnvState, StepResult) {
        let mut next = self.clone();
        let reward = match self.kind {
            EnvKind::PointMass => {
                let ax = action.first().copied().unwrap_or(0.0).clamp(-1.0, 1.0);
                let ay = action.get(1).copied().unwrap_or(0.0).clamp(-1.0, 1.0);
                let (px, py, vx, vy) = (
                    self.internal[0],
                    self.internal[1],
                    self.internal[2],
                    self.internal[3],
                );
                let vx2 = 0.95 * vx + 0.5 * ax * DT * 20.0;
                let vy2 = 0.95 * vy + 0.5 * ay * DT * 20.0;
                let px2 = px + vx2 * DT;
                let py2 = py + vy2 * DT;
                next.internal = vec![px2, py2, vx2, vy2];
                -(px2 * px2 + py2 * py2) - 0.01 * (ax * ax + ay * ay)
            }
            EnvKind::Pendulum => {
                let u = action.first().copied().unwrap_or(0.0).clamp(-2.0, 2.0);
                let (theta, theta_dot) = (self.internal[0], self.internal[1]);
                // Cost on the pre-step state, gym convention.
                let cost = wrap_angle(theta).powi(2) + 0.1 * theta_dot * theta_dot + 0.001 * u * u;
                let (g, m, l) = (10.0, 1.0, 1.0);
                let accel = 3.0 * g / (2.0 * l) * theta.sin() + 3.0 / (m * l * l) * u;
                let theta_dot2 = (theta_dot + accel * DT).clamp(-8.0, 8.0);
                let theta2 = wrap_angle(theta + theta_dot2 * DT);
                next.internal = vec![theta2, theta_dot2];
                -cost
            }
        };
        next.steps_elapsed = self.steps_elapsed + 1;
        let truncated = next.steps_elapsed >= EPISODE_HORIZON;
        let result = StepResult {
            observation: next.observation(),
            reward,
            terminated: false,
            truncated,
        };
        (next, result)
    }
}

/// One vectorized step: per-slot results plus, where an episode ended this
/// step, the terminal observation that the auto-reset replaced.
#[derive(Debug, Clone)]
pub struct VecStep {
    pub results: Vec<StepResult>,
    pub terminal_observations: Vec<Option<Vec<f64>>>,
}

/// Element-wise stepping with auto-reset: when a slot truncates or
/// terminates, a fresh reset observation replaces the terminal one in the
/// observation stream and the flag is kept for GAE masking.
#[derive(Debug, Clone)]
pub struct VecEnv {
    pub states: Vec<EnvState>,
}

impl VecEnv {
    pub fn new(kind: EnvKind, base_seed: u64, num_envs: usize) -> VecEnv {
        let states = (0..num_envs)
            .map(|i| EnvState::reset(kind, base_seed.wrapping_add(i as u64)))
            .collect();
        VecEnv { states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.observation()).collect()
    }

    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<VecStep> {
        if actions.len() != self.states.len() {
            return Err(Error::ShapeMismatch {
                context: "vec env actions",
                expected: self.states.len(),
                got: actions.len(),
            });
        }
        let mut results = Vec::with_capacity(self.states.len());
        let mut terminal_observations = vec![None; self.states.len()];
        for (i, action) in actions.iter().enumerate() {
            let (next, mut result) = self.states[i].step(action);
            if result.terminated || result.truncated {
                terminal_observations[i] = Some(result.observation.clone());
                let fresh = next.reinit();
                result.observation = fresh.observation();
                self.states[i] = fresh;
            } else {
                self.states[i] = next;
            }
            results.push(result);
        }
        Ok(VecStep {
            results,
            terminal_observations,
        })
    }
}
