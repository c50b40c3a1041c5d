//! The reference controller: a finite-horizon nonlinear MPC solved by
//! iterative LQR over the Euler-discretized closed-loop plant.
//!
//! The decision variable is the controller term u_c; the equilibrium and
//! stabilizer thrusts are part of the predicted dynamics, so the solver sees
//! the same closed loop the simulator flies.

use crate::dynamics::{
    derivative, stabilizer_control, Control, PlantParams, Policy, State, CONTROL_DT,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpcError {
    /// A rollout produced a non-finite cost. Carries the last finite plan so
    /// callers can inspect where the solve was before it blew up.
    #[error("mpc solve diverged to a non-finite cost at iteration {iteration}")]
    Diverged {
        iteration: usize,
        last_plan: ControlPlan,
    },
}

/// Weights and iteration budget for the receding-horizon solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    /// Lookahead steps at the control period (30 steps = 1.5 s).
    pub horizon: usize,
    /// Diagonal of the stage state weight Q.
    pub state_weight: [f64; 6],
    /// Diagonal of the stage input weight R.
    pub input_weight: [f64; 2],
    /// Diagonal of the terminal weight Q_f.
    pub terminal_weight: [f64; 6],
    pub max_iters: usize,
    /// Convergence threshold on the relative cost decrease per iteration.
    pub tol: f64,
    /// Initial Levenberg regularization added to Q_uu.
    pub reg_init: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 30,
            state_weight: [10.0, 10.0, 1.0, 1.0, 1.0, 1.0],
            input_weight: [0.1, 0.1],
            terminal_weight: [100.0, 100.0, 10.0, 10.0, 10.0, 10.0],
            max_iters: 150,
            tol: 1e-8,
            reg_init: 1.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.horizon == 0 {
            return Err("mpc_horizon must be >= 1".to_string());
        }
        if self.state_weight.iter().any(|w| *w < 0.0)
            || self.input_weight.iter().any(|w| *w < 0.0)
            || self.terminal_weight.iter().any(|w| *w < 0.0)
        {
            return Err("mpc weights must be non-negative".to_string());
        }
        if !(self.tol > 0.0) {
            return Err("mpc_tol must be positive".to_string());
        }
        Ok(())
    }
}

/// The optimized control sequence and solve diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPlan {
    pub controls: Vec<Control>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ControlPlan {
    pub fn zeros(horizon: usize) -> Self {
        ControlPlan {
            controls: vec![Control::zero(); horizon],
            cost: f64::INFINITY,
            iterations: 0,
            converged: false,
        }
    }

    /// Receding-horizon warm start: drop the executed first step, repeat the
    /// final one.
    pub fn shifted(&self) -> ControlPlan {
        let mut controls: Vec<Control> = self.controls.iter().skip(1).copied().collect();
        if let Some(last) = self.controls.last() {
            controls.push(*last);
        }
        ControlPlan {
            controls,
            cost: f64::INFINITY,
            iterations: 0,
            converged: false,
        }
    }
}

/// Predicted step: one Euler advance of the closed loop under u_c.
fn predict(s: &State, u_c: &Control, p: &PlantParams) -> State {
    let u_net = stabilizer_control(s, p).add(u_c);
    let f = derivative(s, &u_net, p);
    State::from_vec6(&s.as_vec6().add(&f.scale(CONTROL_DT)))
}

/// Jacobians of the predicted step with respect to state and controller term.
/// The state Jacobian folds in the stabilizer feedback kappa.
fn predict_jacobians(s: &State, u_c: &Control, p: &PlantParams) -> ([[f64; 6]; 6], [[f64; 2]; 6]) {
    let u_net = stabilizer_control(s, p).add(u_c);
    let thrust = u_net.u_r + u_net.u_l;
    let (sin_t, cos_t) = s.theta.sin_cos();

    // Continuous-time df/du.
    let mut fu = [[0.0; 2]; 6];
    fu[3] = [-sin_t / p.m, -sin_t / p.m];
    fu[4] = [cos_t / p.m, cos_t / p.m];
    fu[5] = [p.l_half / p.j, -p.l_half / p.j];

    // Continuous-time df/ds: explicit dependence plus the kappa feedback.
    let mut fs = [[0.0; 6]; 6];
    fs[0][3] = 1.0;
    fs[1][4] = 1.0;
    fs[2][5] = 1.0;
    fs[3][2] = -cos_t * thrust / p.m;
    fs[4][2] = -sin_t * thrust / p.m;
    for i in 0..6 {
        for j in 0..6 {
            fs[i][j] += fu[i][0] * p.kappa[0][j] + fu[i][1] * p.kappa[1][j];
        }
    }

    let mut a = [[0.0; 6]; 6];
    let mut b = [[0.0; 2]; 6];
    for i in 0..6 {
        for j in 0..6 {
            a[i][j] = if i == j { 1.0 } else { 0.0 } + CONTROL_DT * fs[i][j];
        }
        b[i] = [CONTROL_DT * fu[i][0], CONTROL_DT * fu[i][1]];
    }
    (a, b)
}

fn stage_cost(s: &State, u: &Control, cfg: &MpcConfig) -> f64 {
    let sv = s.as_vec6();
    let mut c = 0.0;
    for i in 0..6 {
        c += cfg.state_weight[i] * sv.0[i] * sv.0[i];
    }
    c += cfg.input_weight[0] * u.u_r * u.u_r + cfg.input_weight[1] * u.u_l * u.u_l;
    c
}

fn terminal_cost(s: &State, cfg: &MpcConfig) -> f64 {
    let sv = s.as_vec6();
    (0..6)
        .map(|i| cfg.terminal_weight[i] * sv.0[i] * sv.0[i])
        .sum()
}

/// Rolls the plan out from `s0`, returning the visited states and total cost.
fn rollout(s0: &State, controls: &[Control], cfg: &MpcConfig, p: &PlantParams) -> (Vec<State>, f64) {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut s = *s0;
    let mut cost = 0.0;
    states.push(s);
    for u in controls {
        cost += stage_cost(&s, u, cfg);
        s = predict(&s, u, p);
        states.push(s);
    }
    cost += terminal_cost(&s, cfg);
    (states, cost)
}

struct BackwardPass {
    // Feedforward and feedback gains per stage.
    k: Vec<[f64; 2]>,
    big_k: Vec<[[f64; 6]; 2]>,
    expected_decrease: f64,
}

/// Riccati-style sweep with Levenberg regularization on Q_uu. Returns None if
/// the regularized Q_uu is not positive definite at some stage.
fn backward_pass(
    states: &[State],
    controls: &[Control],
    cfg: &MpcConfig,
    p: &PlantParams,
    reg: f64,
) -> Option<BackwardPass> {
    let h = controls.len();
    let mut k = vec![[0.0; 2]; h];
    let mut big_k = vec![[[0.0; 6]; 2]; h];

    let terminal = states[h].as_vec6();
    let mut vx = [0.0; 6];
    let mut vxx = [[0.0; 6]; 6];
    for i in 0..6 {
        vx[i] = 2.0 * cfg.terminal_weight[i] * terminal.0[i];
        vxx[i][i] = 2.0 * cfg.terminal_weight[i];
    }

    let mut expected_decrease = 0.0;
    for t in (0..h).rev() {
        let (a, b) = predict_jacobians(&states[t], &controls[t], p);
        let sv = states[t].as_vec6();
        let u = &controls[t];

        // Gradient terms.
        let mut qx = [0.0; 6];
        for i in 0..6 {
            qx[i] = 2.0 * cfg.state_weight[i] * sv.0[i];
            for r in 0..6 {
                qx[i] += a[r][i] * vx[r];
            }
        }
        let mut qu = [
            2.0 * cfg.input_weight[0] * u.u_r,
            2.0 * cfg.input_weight[1] * u.u_l,
        ];
        for r in 0..6 {
            qu[0] += b[r][0] * vx[r];
            qu[1] += b[r][1] * vx[r];
        }

        // Hessian blocks. vxx_a = Vxx * A (6x6), vxx_b = Vxx * B (6x2).
        let mut vxx_a = [[0.0; 6]; 6];
        let mut vxx_b = [[0.0; 2]; 6];
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = 0.0;
                for r in 0..6 {
                    acc += vxx[i][r] * a[r][j];
                }
                vxx_a[i][j] = acc;
            }
            for j in 0..2 {
                let mut acc = 0.0;
                for r in 0..6 {
                    acc += vxx[i][r] * b[r][j];
                }
                vxx_b[i][j] = acc;
            }
        }
        let mut qxx = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = if i == j { 2.0 * cfg.state_weight[i] } else { 0.0 };
                for r in 0..6 {
                    acc += a[r][i] * vxx_a[r][j];
                }
                qxx[i][j] = acc;
            }
        }
        let mut quu = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = if i == j { 2.0 * cfg.input_weight[i] } else { 0.0 };
                for r in 0..6 {
                    acc += b[r][i] * vxx_b[r][j];
                }
                quu[i][j] = acc;
            }
        }
        let mut qux = [[0.0; 6]; 2];
        for i in 0..2 {
            for j in 0..6 {
                let mut acc = 0.0;
                for r in 0..6 {
                    acc += b[r][i] * vxx_a[r][j];
                }
                qux[i][j] = acc;
            }
        }

        // Regularized 2x2 inverse.
        let q00 = quu[0][0] + reg;
        let q11 = quu[1][1] + reg;
        let q01 = 0.5 * (quu[0][1] + quu[1][0]);
        let det = q00 * q11 - q01 * q01;
        if !(q00 > 0.0 && det > 0.0 && det.is_finite()) {
            return None;
        }
        let inv = [[q11 / det, -q01 / det], [-q01 / det, q00 / det]];

        let kt = [
            -(inv[0][0] * qu[0] + inv[0][1] * qu[1]),
            -(inv[1][0] * qu[0] + inv[1][1] * qu[1]),
        ];
        let mut bkt = [[0.0; 6]; 2];
        for i in 0..2 {
            for j in 0..6 {
                bkt[i][j] = -(inv[i][0] * qux[0][j] + inv[i][1] * qux[1][j]);
            }
        }
        k[t] = kt;
        big_k[t] = bkt;
        expected_decrease += -(kt[0] * qu[0] + kt[1] * qu[1])
            - 0.5
                * (kt[0] * (quu[0][0] * kt[0] + quu[0][1] * kt[1])
                    + kt[1] * (quu[1][0] * kt[0] + quu[1][1] * kt[1]));

        // Value function recursion, symmetrized to keep vxx clean.
        let mut new_vx = [0.0; 6];
        for j in 0..6 {
            let mut acc = qx[j];
            for i in 0..2 {
                let quu_k = quu[i][0] * kt[0] + quu[i][1] * kt[1];
                acc += bkt[i][j] * (quu_k + qu[i]) + qux[i][j] * kt[i];
            }
            new_vx[j] = acc;
        }
        let mut new_vxx = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = qxx[i][j];
                for r in 0..2 {
                    let quu_krow = quu[r][0] * bkt[0][j] + quu[r][1] * bkt[1][j];
                    acc += bkt[r][i] * quu_krow + bkt[r][i] * qux[r][j] + qux[r][i] * bkt[r][j];
                }
                new_vxx[i][j] = acc;
            }
        }
        for i in 0..6 {
            for j in (i + 1)..6 {
                let m = 0.5 * (new_vxx[i][j] + new_vxx[j][i]);
                new_vxx[i][j] = m;
                new_vxx[j][i] = m;
            }
        }
        vx = new_vx;
        vxx = new_vxx;
    }
    Some(BackwardPass {
        k,
        big_k,
        expected_decrease,
    })
}

/// Solves the receding-horizon problem from `s`, optionally warm-started.
/// The returned plan never costs more than the warm start (or the zero plan
/// when no warm start is given).
pub fn mpc_solve(
    s: &State,
    warm: Option<&ControlPlan>,
    cfg: &MpcConfig,
    p: &PlantParams,
) -> Result<ControlPlan, MpcError> {
    let mut controls: Vec<Control> = match warm {
        Some(plan) if plan.controls.len() == cfg.horizon => plan.controls.clone(),
        _ => vec![Control::zero(); cfg.horizon],
    };
    let (mut states, mut cost) = rollout(s, &controls, cfg, p);
    if !cost.is_finite() {
        return Err(MpcError::Diverged {
            iteration: 0,
            last_plan: ControlPlan {
                controls,
                cost: f64::INFINITY,
                iterations: 0,
                converged: false,
            },
        });
    }

    let mut reg = cfg.reg_init.max(1e-9);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..cfg.max_iters {
        iterations = iter + 1;
        let pass = match backward_pass(&states, &controls, cfg, p, reg) {
            Some(pass) => pass,
            None => {
                reg *= 10.0;
                if reg > 1e10 {
                    break;
                }
                continue;
            }
        };

        // Backtracking line search on the feedforward step.
        let mut improved = false;
        let mut alpha = 1.0;
        for _ in 0..11 {
            let mut trial = Vec::with_capacity(cfg.horizon);
            let mut s_trial = *s;
            for t in 0..cfg.horizon {
                let ds = s_trial.as_vec6().sub(&states[t].as_vec6());
                let fb = [
                    pass.big_k[t][0]
                        .iter()
                        .zip(ds.0.iter())
                        .map(|(k, d)| k * d)
                        .sum::<f64>(),
                    pass.big_k[t][1]
                        .iter()
                        .zip(ds.0.iter())
                        .map(|(k, d)| k * d)
                        .sum::<f64>(),
                ];
                let u = Control::new(
                    controls[t].u_r + alpha * pass.k[t][0] + fb[0],
                    controls[t].u_l + alpha * pass.k[t][1] + fb[1],
                );
                trial.push(u);
                s_trial = predict(&s_trial, &u, p);
                if !s_trial.is_finite() {
                    break;
                }
            }
            if trial.len() == cfg.horizon && s_trial.is_finite() {
                let (trial_states, trial_cost) = rollout(s, &trial, cfg, p);
                if trial_cost.is_finite() && trial_cost < cost {
                    let decrease = cost - trial_cost;
                    controls = trial;
                    states = trial_states;
                    cost = trial_cost;
                    improved = true;
                    if decrease <= cfg.tol * (1.0 + cost.abs()) {
                        converged = true;
                    }
                    break;
                }
            }
            alpha *= 0.5;
        }

        if improved {
            reg = (reg * 0.5).max(1e-9);
            if converged {
                break;
            }
            if pass.expected_decrease.abs() <= cfg.tol * (1.0 + cost.abs()) {
                converged = true;
                break;
            }
        } else {
            if pass.expected_decrease.abs() <= cfg.tol * (1.0 + cost.abs()) {
                // Nothing left to gain; the plan is stationary.
                converged = true;
                break;
            }
            reg *= 10.0;
            if reg > 1e10 {
                break;
            }
        }
    }

    Ok(ControlPlan {
        controls,
        cost,
        iterations,
        converged,
    })
}

/// Receding-horizon policy: resolves the plan each tick, warm-started by
/// shifting the previous solution one step, and applies its first control.
///
/// Holds per-trajectory warm-start state, so use one instance per simulation.
pub struct MpcPolicy<'a> {
    cfg: &'a MpcConfig,
    plant: &'a PlantParams,
    warm: Option<ControlPlan>,
    /// Iterations used by each tick's solve, for instrumentation.
    pub iteration_log: Vec<usize>,
}

impl<'a> MpcPolicy<'a> {
    pub fn new(cfg: &'a MpcConfig, plant: &'a PlantParams) -> Self {
        MpcPolicy {
            cfg,
            plant,
            warm: None,
            iteration_log: Vec::new(),
        }
    }
}

impl Policy for MpcPolicy<'_> {
    fn control(&mut self, state: &State) -> Result<Control, String> {
        let warm = self.warm.take().map(|plan| plan.shifted());
        let plan =
            mpc_solve(state, warm.as_ref(), self.cfg, self.plant).map_err(|e| e.to_string())?;
        self.iteration_log.push(plan.iterations);
        let first = plan.controls[0];
        self.warm = Some(plan);
        Ok(first)
    }
}

/// Builds a fresh warm-starting policy for one simulation.
pub fn mpc_controller<'a>(cfg: &'a MpcConfig, plant: &'a PlantParams) -> MpcPolicy<'a> {
    MpcPolicy::new(cfg, plant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::simulate;

    fn setup() -> (MpcConfig, PlantParams) {
        (MpcConfig::default(), PlantParams::default())
    }

    #[test]
    fn origin_is_a_fixed_point() {
        let (cfg, p) = setup();
        let plan = mpc_solve(&State::origin(), None, &cfg, &p).unwrap();
        assert!(plan.cost.abs() <= 1e-9, "cost {} at equilibrium", plan.cost);
        for u in &plan.controls {
            assert!(u.u_r.abs() <= 1e-6 && u.u_l.abs() <= 1e-6);
        }
    }

    #[test]
    fn first_control_tilts_toward_target() {
        let (cfg, p) = setup();
        let s = State::new(2.0, 6.0, 0.0, 0.0, 0.0, 0.0);
        let plan = mpc_solve(&s, None, &cfg, &p).unwrap();
        // Sign oracle: x must shrink, which needs xdd < 0, hence theta > 0,
        // hence positive torque, hence u_r > u_l.
        let first = plan.controls[0];
        assert!(
            first.u_r > first.u_l,
            "expected rightward tilt, got {first:?}"
        );
        // And the plan's predicted x must actually move toward the origin.
        let (states, _) = rollout(&s, &plan.controls, &cfg, &p);
        assert!(states.last().unwrap().x < s.x);
    }

    #[test]
    fn never_worse_than_zero_plan() {
        let (cfg, p) = setup();
        for s in [
            State::new(2.0, 6.0, 0.0, 0.0, 0.0, 0.0),
            State::new(-1.5, 4.0, 0.1, 0.3, -0.4, 0.0),
            State::new(0.3, 0.4, -0.2, -0.5, 0.2, 0.4),
        ] {
            let zero_cost = rollout(&s, &vec![Control::zero(); cfg.horizon], &cfg, &p).1;
            let plan = mpc_solve(&s, None, &cfg, &p).unwrap();
            assert!(
                plan.cost <= zero_cost,
                "plan {} worse than zero plan {}",
                plan.cost,
                zero_cost
            );
        }
    }

    #[test]
    fn never_worse_than_warm_start() {
        let (cfg, p) = setup();
        let s = State::new(1.0, 5.0, 0.0, 0.0, 0.0, 0.0);
        let cold = mpc_solve(&s, None, &cfg, &p).unwrap();
        let shifted = cold.shifted();
        let warm_cost = rollout(&s, &shifted.controls, &cfg, &p).1;
        let plan = mpc_solve(&s, Some(&shifted), &cfg, &p).unwrap();
        assert!(plan.cost <= warm_cost);
    }

    #[test]
    fn deterministic_solves() {
        let (cfg, p) = setup();
        let s = State::new(-2.0, 5.5, 0.05, 0.2, -0.1, 0.0);
        let a = mpc_solve(&s, None, &cfg, &p).unwrap();
        let b = mpc_solve(&s, None, &cfg, &p).unwrap();
        assert_eq!(a.controls, b.controls);
        assert_eq!(a.cost.to_bits(), b.cost.to_bits());
    }

    #[test]
    fn landing_run_reaches_success_region() {
        let (cfg, p) = setup();
        let mut policy = mpc_controller(&cfg, &p);
        let traj = simulate(
            &State::new(2.0, 6.0, 0.0, 0.0, 0.0, 0.0),
            &mut policy,
            15.0,
            CONTROL_DT,
            5,
            &p,
        )
        .unwrap();
        let end = traj.steps.last().unwrap().next_state;
        assert!(
            end.x.abs() <= 0.5 && end.y >= 0.0 && end.y <= 0.5,
            "did not land: final state {end}"
        );
    }

    #[test]
    fn warm_start_cuts_iterations_on_most_ticks() {
        let (cfg, p) = setup();
        let s0 = State::new(2.0, 6.0, 0.0, 0.0, 0.0, 0.0);
        let mut policy = mpc_controller(&cfg, &p);
        let traj = simulate(&s0, &mut policy, 5.0, CONTROL_DT, 5, &p).unwrap();

        // Cold solves replayed from the same observed states.
        let mut fewer = 0usize;
        let mut total = 0usize;
        for (step, warm_iters) in traj.steps.iter().zip(policy.iteration_log.iter()) {
            let cold = mpc_solve(&step.state, None, &cfg, &p).unwrap();
            total += 1;
            if *warm_iters <= cold.iterations {
                fewer += 1;
            }
        }
        assert!(
            fewer * 10 >= total * 8,
            "warm start helped on only {fewer}/{total} ticks"
        );
    }

    #[test]
    fn astronomically_bad_state_reports_divergence() {
        let (cfg, p) = setup();
        let s = State::new(1e200, 1e200, 0.0, 1e200, 1e200, 0.0);
        match mpc_solve(&s, None, &cfg, &p) {
            Err(MpcError::Diverged { last_plan, .. }) => {
                assert_eq!(last_plan.controls.len(), cfg.horizon);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn corners_of_initial_box_all_land() {
        let (cfg, p) = setup();
        for &(x, y) in &[(-2.5, 3.5), (-2.5, 6.5), (2.5, 3.5), (2.5, 6.5)] {
            let mut policy = mpc_controller(&cfg, &p);
            let traj = simulate(
                &State::new(x, y, 0.0, 0.0, 0.0, 0.0),
                &mut policy,
                15.0,
                CONTROL_DT,
                5,
                &p,
            )
            .unwrap();
            let end = traj.steps.last().unwrap().next_state;
            assert!(
                end.x.abs() <= 0.5 && end.y >= 0.0 && end.y <= 0.5,
                "corner ({x}, {y}) missed the pad: final {end}"
            );
        }
    }
}
