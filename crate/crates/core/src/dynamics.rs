//! Planar quadcopter rigid-body model, the equilibrium/stabilizer control
//! terms, and the integrators that advance it.
//!
//! The plant state is s = (x, y, theta, xdot, ydot, thetadot). Controls are
//! the right/left rotor thrusts, decomposed as u = u_e + u_s + u_c: a constant
//! equilibrium term, a linear state-feedback stabilizer, and the controller
//! term supplied by whichever policy is driving the simulation.

use crate::numerics::Vec6;
use std::fmt;
use thiserror::Error;

/// Control period of every policy in the toolkit: 20 Hz.
pub const CONTROL_DT: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SimulationError {
    /// The policy callback failed at `tick`; the trajectory up to that tick
    /// is attached.
    #[error("policy failed at tick {tick}: {message}")]
    PolicyFailed {
        tick: usize,
        message: String,
        partial: Trajectory,
    },
    /// The state went non-finite at `tick`; the trajectory up to that tick is
    /// attached.
    #[error("state diverged to non-finite values at tick {tick}")]
    Diverged { tick: usize, partial: Trajectory },
    #[error("control_dt {control_dt} does not divide duration {duration}")]
    BadTiming { duration: f64, control_dt: f64 },
    #[error("substeps must be >= 1")]
    NoSubsteps,
}

/// Planar quadcopter state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct State {
    /// Horizontal position (m).
    pub x: f64,
    /// Altitude (m). Deliberately unclamped: below-ground values must stay
    /// representable because the safe-landing metric looks for them.
    pub y: f64,
    /// Tilt angle (rad).
    pub theta: f64,
    pub xdot: f64,
    pub ydot: f64,
    pub thetadot: f64,
}

impl State {
    pub fn new(x: f64, y: f64, theta: f64, xdot: f64, ydot: f64, thetadot: f64) -> Self {
        State {
            x,
            y,
            theta,
            xdot,
            ydot,
            thetadot,
        }
    }

    pub fn origin() -> Self {
        State::default()
    }

    pub fn from_vec6(v: &Vec6) -> Self {
        State {
            x: v.0[0],
            y: v.0[1],
            theta: v.0[2],
            xdot: v.0[3],
            ydot: v.0[4],
            thetadot: v.0[5],
        }
    }

    pub fn as_vec6(&self) -> Vec6 {
        Vec6([self.x, self.y, self.theta, self.xdot, self.ydot, self.thetadot])
    }

    pub fn is_finite(&self) -> bool {
        self.as_vec6().is_finite()
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({:.4}, {:.4}, {:.4}, {:.4}, {:.4}, {:.4})",
            self.x, self.y, self.theta, self.xdot, self.ydot, self.thetadot
        )
    }
}

/// Rotor thrust pair (N).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Control {
    pub u_r: f64,
    pub u_l: f64,
}

impl Control {
    pub fn new(u_r: f64, u_l: f64) -> Self {
        Control { u_r, u_l }
    }

    pub fn zero() -> Self {
        Control { u_r: 0.0, u_l: 0.0 }
    }

    pub fn add(&self, other: &Control) -> Control {
        Control {
            u_r: self.u_r + other.u_r,
            u_l: self.u_l + other.u_l,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u_r.is_finite() && self.u_l.is_finite()
    }
}

/// Physical constants plus the stabilizer gain.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantParams {
    /// Mass (kg).
    pub m: f64,
    /// Half-length of the rotor arm (m).
    pub l_half: f64,
    /// Moment of inertia (kg m^2).
    pub j: f64,
    /// Gravity (m/s^2).
    pub g: f64,
    /// 2x6 stabilizer gain; row 0 feeds the right thrust, row 1 the left.
    /// Columns for x and y must be zero: the stabilizer regulates only the
    /// tilt angle and the rates, never the position.
    pub kappa: [[f64; 6]; 2],
}

impl PlantParams {
    /// Checks positivity of the physical constants and the structural zeros
    /// of the gain matrix.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.m > 0.0) {
            return Err(format!("mass must be positive, got {}", self.m));
        }
        if !(self.l_half > 0.0) {
            return Err(format!("half_length must be positive, got {}", self.l_half));
        }
        if !(self.j > 0.0) {
            return Err(format!("inertia must be positive, got {}", self.j));
        }
        if !(self.g > 0.0) {
            return Err(format!("gravity must be positive, got {}", self.g));
        }
        for row in 0..2 {
            for col in 0..2 {
                if self.kappa[row][col] != 0.0 {
                    return Err(format!(
                        "kappa_row{} column {} must be zero (stabilizer may not act on position)",
                        row + 1,
                        col + 1
                    ));
                }
            }
            if self.kappa[row].iter().any(|v| !v.is_finite()) {
                return Err(format!("kappa_row{} has a non-finite entry", row + 1));
            }
        }
        Ok(())
    }
}

impl PlantParams {
    /// Canonical key=value rendering; provenance digests hash this.
    pub fn canonical_string(&self) -> String {
        use crate::fmtio::fmt_f64;
        let row = |r: &[f64; 6]| {
            r.iter()
                .map(|v| fmt_f64(*v))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "mass={}\nhalf_length={}\ninertia={}\ngravity={}\nkappa_row1={}\nkappa_row2={}\n",
            fmt_f64(self.m),
            fmt_f64(self.l_half),
            fmt_f64(self.j),
            fmt_f64(self.g),
            row(&self.kappa[0]),
            row(&self.kappa[1]),
        )
    }

    /// 16-hex-character provenance digest of the plant constants.
    pub fn digest(&self) -> String {
        crate::fmtio::short_digest(self.canonical_string().as_bytes())
    }
}

impl Default for PlantParams {
    /// m = 1 makes the equilibrium thrust [mg/2, mg/2] cancel gravity exactly
    /// in the vertical equation, which divides g by m. The gain places the
    /// closed tilt/velocity poles at real parts <= -1 (see the regression
    /// test below).
    fn default() -> Self {
        PlantParams {
            m: 1.0,
            l_half: 0.3,
            j: 0.2,
            g: 9.81,
            kappa: [
                [0.0, 0.0, -4.0, 0.3, -1.5, -2.0],
                [0.0, 0.0, 4.0, -0.3, -1.5, 2.0],
            ],
        }
    }
}

/// State-space right-hand side: sdot = f(s, u).
pub fn derivative(s: &State, u: &Control, p: &PlantParams) -> Vec6 {
    let thrust = u.u_r + u.u_l;
    let (sin_t, cos_t) = s.theta.sin_cos();
    Vec6([
        s.xdot,
        s.ydot,
        s.thetadot,
        -sin_t * thrust / p.m,
        (cos_t * thrust - p.g) / p.m,
        p.l_half * (u.u_r - u.u_l) / p.j,
    ])
}

/// Equilibrium plus stabilizer thrust: u_e + u_s = [mg/2, mg/2] + kappa s.
pub fn stabilizer_control(s: &State, p: &PlantParams) -> Control {
    let sv = s.as_vec6();
    let hover = 0.5 * p.m * p.g;
    let mut out = [hover, hover];
    for (row, acc) in out.iter_mut().enumerate() {
        for col in 0..6 {
            *acc += p.kappa[row][col] * sv.0[col];
        }
    }
    Control::new(out[0], out[1])
}

/// One explicit Euler step with `u` held constant. This exact scheme is what
/// the training losses predict with; do not swap in a higher-order method
/// there.
pub fn euler_step(s: &State, u: &Control, dt: f64, p: &PlantParams) -> State {
    let f = derivative(s, u, p);
    State::from_vec6(&s.as_vec6().add(&f.scale(dt)))
}

/// One classical fourth-order Runge-Kutta step with `u` held constant
/// (zero-order hold across the substages).
pub fn rk4_step(s: &State, u: &Control, dt: f64, p: &PlantParams) -> State {
    let sv = s.as_vec6();
    let k1 = derivative(s, u, p);
    let k2 = derivative(&State::from_vec6(&sv.add(&k1.scale(dt * 0.5))), u, p);
    let k3 = derivative(&State::from_vec6(&sv.add(&k2.scale(dt * 0.5))), u, p);
    let k4 = derivative(&State::from_vec6(&sv.add(&k3.scale(dt))), u, p);
    let incr = k1
        .add(&k2.scale(2.0))
        .add(&k3.scale(2.0))
        .add(&k4)
        .scale(dt / 6.0);
    State::from_vec6(&sv.add(&incr))
}

/// A control policy queried once per tick with the current state; returns the
/// controller term u_c (the stabilizer and equilibrium terms are added by the
/// simulation loop).
pub trait Policy {
    fn control(&mut self, state: &State) -> Result<Control, String>;
}

impl<F> Policy for F
where
    F: FnMut(&State) -> Result<Control, String>,
{
    fn control(&mut self, state: &State) -> Result<Control, String> {
        self(state)
    }
}

/// One recorded control tick: the observed state, the controller term
/// applied, and the state one control period later.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajStep {
    pub state: State,
    pub control_term: Control,
    pub next_state: State,
}

/// A rollout sampled at the control rate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajStep>,
    pub control_dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Every observed state in order: the initial state of each tick followed
    /// by the final tick's successor, so a trajectory of n steps yields n + 1
    /// states.
    pub fn states(&self) -> Vec<State> {
        let mut out: Vec<State> = self.steps.iter().map(|t| t.state).collect();
        if let Some(last) = self.steps.last() {
            out.push(last.next_state);
        }
        out
    }
}

/// Advances the plant from `s0` for `duration` seconds. At each control tick
/// the policy supplies u_c; the net thrust u_e + u_s + u_c is held fixed for
/// `control_dt` and integrated with `substeps` RK4 substeps.
pub fn simulate<P: Policy>(
    s0: &State,
    policy: &mut P,
    duration: f64,
    control_dt: f64,
    substeps: usize,
    p: &PlantParams,
) -> Result<Trajectory, SimulationError> {
    if substeps == 0 {
        return Err(SimulationError::NoSubsteps);
    }
    let ticks_f = duration / control_dt;
    let ticks = ticks_f.round() as usize;
    if ticks == 0 || (ticks_f - ticks as f64).abs() > 1e-9 * ticks_f.max(1.0) {
        return Err(SimulationError::BadTiming {
            duration,
            control_dt,
        });
    }

    let mut traj = Trajectory {
        steps: Vec::with_capacity(ticks),
        control_dt,
    };
    let mut s = *s0;
    let sub_dt = control_dt / substeps as f64;
    for tick in 0..ticks {
        let u_c = match policy.control(&s) {
            Ok(u) => u,
            Err(message) => {
                return Err(SimulationError::PolicyFailed {
                    tick,
                    message,
                    partial: traj,
                })
            }
        };
        let u_net = stabilizer_control(&s, p).add(&u_c);
        let mut next = s;
        for _ in 0..substeps {
            next = rk4_step(&next, &u_net, sub_dt, p);
        }
        if !next.is_finite() {
            return Err(SimulationError::Diverged {
                tick,
                partial: traj,
            });
        }
        traj.steps.push(TrajStep {
            state: s,
            control_term: u_c,
            next_state: next,
        });
        s = next;
    }
    Ok(traj)
}

/// A policy that always returns zero controller effort, leaving the
/// stabilizer alone to fly the plant.
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn control(&mut self, _state: &State) -> Result<Control, String> {
        Ok(Control::zero())
    }
}
