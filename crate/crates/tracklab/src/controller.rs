//! Reference-tracking controllers. The default is a linear-time-varying MPC
//! whose prediction model is the nominal bicycle model plus the learned
//! residual mean, held constant over the horizon and linearized about the
//! reference by finite differences. The condensed input-space QP is solved
//! by the ADMM box-QP solver with warm starting.

use crate::dynamics::{
    step_time, ConstantResidual, ControlInput, InputBox, ResidualModel, VehicleParams,
    VehicleState,
};
use crate::planner::{path_geometry, reference_heading_error};
use crate::solver::AdmmBoxQp;
use crate::track::Track;
use crate::wavelet::TrajectoryProfiles;
use nalgebra::{DMatrix, DVector};

/// Weights and shape of the LTV-MPC problem.
#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub dt_control: f64,
    /// diagonal state cost on (s, e_y, e_psi, v_x, v_y, w) deviations
    pub state_weights: [f64; 6],
    /// diagonal cost on (a, delta) deviations from the reference input
    pub input_weights: [f64; 2],
    /// diagonal cost on input increments between consecutive steps
    pub input_rate_weights: [f64; 2],
    pub input_box: InputBox,
    pub qp_tol: f64,
    pub qp_max_iters: usize,
    pub admm_rho: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            horizon: 20,
            dt_control: 0.05,
            state_weights: [0.0, 60.0, 8.0, 12.0, 0.5, 0.3],
            input_weights: [0.3, 1.5],
            input_rate_weights: [0.6, 8.0],
            input_box: InputBox::default(),
            qp_tol: 1e-6,
            qp_max_iters: 2000,
            admm_rho: 1.0,
        }
    }
}

impl ControllerConfig {
    /// The deliberately poorly tuned variant used by the controller
    /// robustness experiment: state weights scaled down by 20x.
    pub fn poorly_tuned(&self) -> ControllerConfig {
        let mut c = self.clone();
        for w in c.state_weights.iter_mut() {
            *w *= 0.05;
        }
        c
    }
}

/// Solver diagnostics of the most recent control step.
#[derive(Debug, Clone, Default)]
pub struct ControllerDiagnostics {
    pub qp_iterations: usize,
    pub qp_residual: f64,
    pub qp_converged: bool,
    pub fallback_brake: bool,
    pub cost: f64,
}

/// Anything that can track a reference trajectory in closed loop.
pub trait TrackingController {
    fn control(
        &mut self,
        state: &VehicleState,
        residual: Option<&dyn ResidualModel>,
    ) -> ControlInput;

    fn reset(&mut self);

    fn diagnostics(&self) -> ControllerDiagnostics {
        ControllerDiagnostics::default()
    }
}

fn wrap_diff(a: f64, b: f64, period: f64) -> f64 {
    let mut d = a - b;
    while d > 0.5 * period {
        d -= period;
    }
    while d < -0.5 * period {
        d += period;
    }
    d
}

/// Linear interpolation on a periodic per-sample profile.
fn interp_profile(values: &[f64], track: &Track, s: f64) -> f64 {
    let n = values.len();
    let sw = track.wrap_s(s);
    let ds = track.delta_s();
    let idx = ((sw / ds).floor() as usize).min(n - 1);
    let frac = (sw - idx as f64 * ds) / ds;
    values[idx] * (1.0 - frac) + values[(idx + 1) % n] * frac
}

/// Linear-time-varying MPC over the augmented dynamics.
pub struct LtvMpc {
    track: Track,
    params: VehicleParams,
    config: ControllerConfig,
    ref_e_y: Vec<f64>,
    ref_v_x: Vec<f64>,
    ref_e_psi: Vec<f64>,
    ref_w: Vec<f64>,
    ref_kappa_path: Vec<f64>,
    prev_input: ControlInput,
    warm_nu: DVector<f64>,
    warm_dual: DVector<f64>,
    diag: ControllerDiagnostics,
}

impl LtvMpc {
    pub fn new(
        track: &Track,
        reference: &TrajectoryProfiles,
        params: &VehicleParams,
        config: ControllerConfig,
    ) -> Self {
        assert!(config.horizon >= 2, "horizon must be at least 2");
        assert!(config.dt_control > 0.0);
        assert_eq!(reference.len(), track.n_samples(), "reference must cover the track grid");
        let e_psi = reference_heading_error(track, &reference.e_y);
        let geom = path_geometry(track, &reference.e_y);
        let w_ref: Vec<f64> = (0..track.n_samples())
            .map(|k| geom.curvature[k] * reference.v_x[k])
            .collect();
        let n_vars = 2 * config.horizon;
        LtvMpc {
            track: track.clone(),
            params: *params,
            config,
            ref_e_y: reference.e_y.clone(),
            ref_v_x: reference.v_x.clone(),
            ref_e_psi: e_psi,
            ref_w: w_ref,
            ref_kappa_path: geom.curvature,
            prev_input: ControlInput::zeros(),
            warm_nu: DVector::zeros(n_vars),
            warm_dual: DVector::zeros(n_vars),
            diag: ControllerDiagnostics::default(),
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// One step of the internal prediction model (RK4 on the augmented
    /// dynamics at the controller rate).
    pub fn predict_one_step(
        &self,
        state: &VehicleState,
        input: &ControlInput,
        residual: Option<&dyn ResidualModel>,
    ) -> Result<VehicleState, crate::dynamics::DynamicsError> {
        step_time(state, input, &self.params, &self.track, self.config.dt_control, residual)
    }

    /// Reference states and inputs over the horizon, starting at the
    /// vehicle's current s and advancing at the reference speed.
    fn build_reference(&self, s0: f64) -> (Vec<VehicleState>, Vec<ControlInput>) {
        let n = self.config.horizon;
        let dt = self.config.dt_control;
        let wheelbase = self.params.l_f + self.params.l_r;
        let mut states = Vec::with_capacity(n + 1);
        let mut inputs = Vec::with_capacity(n);
        let mut s = self.track.wrap_s(s0);
        for i in 0..=n {
            let e_y = interp_profile(&self.ref_e_y, &self.track, s);
            let v_x = interp_profile(&self.ref_v_x, &self.track, s);
            let e_psi = interp_profile(&self.ref_e_psi, &self.track, s);
            let w = interp_profile(&self.ref_w, &self.track, s);
            states.push(VehicleState { s, e_y, e_psi, v_x, v_y: 0.0, w });
            if i < n {
                let kap_path = interp_profile(&self.ref_kappa_path, &self.track, s);
                let kappa = self.track.curvature_at(s);
                let s_dot = v_x * e_psi.cos() / (1.0 - kappa * e_y);
                let s_next = self.track.wrap_s(s + s_dot.max(0.05) * dt);
                let v_next = interp_profile(&self.ref_v_x, &self.track, s_next);
                inputs.push(ControlInput {
                    a: ((v_next - v_x) / dt).clamp(-self.config.input_box.a_max, self.config.input_box.a_max),
                    delta: (wheelbase * kap_path)
                        .atan()
                        .clamp(-self.config.input_box.delta_max, self.config.input_box.delta_max),
                });
                s = s_next;
            }
        }
        (states, inputs)
    }

    fn brake_fallback(&mut self) -> ControlInput {
        self.diag.fallback_brake = true;
        ControlInput { a: -self.config.input_box.a_max, delta: 0.0 }
    }
}

impl TrackingController for LtvMpc {
    fn control(
        &mut self,
        state: &VehicleState,
        residual: Option<&dyn ResidualModel>,
    ) -> ControlInput {
        let n = self.config.horizon;
        let dt = self.config.dt_control;
        let length = self.track.total_length();
        self.diag = ControllerDiagnostics::default();

        // residual mean frozen at the current state over the horizon
        let frozen_residual = residual.map(|r| {
            ConstantResidual(r.residual(&crate::dynamics::residual_features(state, &self.prev_input)))
        });
        let frozen_ref: Option<&dyn ResidualModel> =
            frozen_residual.as_ref().map(|r| r as &dyn ResidualModel);

        let (x_ref, u_ref) = self.build_reference(state.s);

        // discrete model along the reference: one RK4 step per horizon stage
        let f_d = |x: &VehicleState, u: &ControlInput| -> Option<[f64; 6]> {
            step_time(x, u, &self.params, &self.track, dt, frozen_ref)
                .ok()
                .map(|s| s.to_array())
        };

        // finite-difference linearization about (x_ref, u_ref)
        let mut a_mats = Vec::with_capacity(n);
        let mut b_mats = Vec::with_capacity(n);
        let mut resid = Vec::with_capacity(n); // r_i = f_d(ref_i) - ref_{i+1}
        let eps_x = [1e-5, 1e-5, 1e-5, 1e-5, 1e-5, 1e-5];
        let eps_u = [1e-5, 1e-5];
        for i in 0..n {
            let xr = &x_ref[i];
            let ur = &u_ref[i];
            let nominal = match f_d(xr, ur) {
                Some(v) => v,
                None => return self.brake_fallback(),
            };
            let mut a = DMatrix::<f64>::zeros(6, 6);
            let mut xr_arr = xr.to_array();
            for j in 0..6 {
                let h = eps_x[j];
                let orig = xr_arr[j];
                xr_arr[j] = orig + h;
                let plus = match f_d(&VehicleState::from_array(xr_arr), ur) {
                    Some(v) => v,
                    None => return self.brake_fallback(),
                };
                xr_arr[j] = orig - h;
                let minus = match f_d(&VehicleState::from_array(xr_arr), ur) {
                    Some(v) => v,
                    None => return self.brake_fallback(),
                };
                xr_arr[j] = orig;
                for r in 0..6 {
                    let diff = if r == 0 {
                        wrap_diff(plus[0], minus[0], length)
                    } else {
                        plus[r] - minus[r]
                    };
                    a[(r, j)] = diff / (2.0 * h);
                }
            }
            let mut b = DMatrix::<f64>::zeros(6, 2);
            for j in 0..2 {
                let h = eps_u[j];
                let mut up = *ur;
                let mut um = *ur;
                if j == 0 {
                    up.a += h;
                    um.a -= h;
                } else {
                    up.delta += h;
                    um.delta -= h;
                }
                let plus = match f_d(xr, &up) {
                    Some(v) => v,
                    None => return self.brake_fallback(),
                };
                let minus = match f_d(xr, &um) {
                    Some(v) => v,
                    None => return self.brake_fallback(),
                };
                for r in 0..6 {
                    let diff = if r == 0 {
                        wrap_diff(plus[0], minus[0], length)
                    } else {
                        plus[r] - minus[r]
                    };
                    b[(r, j)] = diff / (2.0 * h);
                }
            }
            let next = x_ref[i + 1].to_array();
            let mut r = [0.0; 6];
            for k in 0..6 {
                r[k] = if k == 0 {
                    wrap_diff(nominal[0], next[0], length)
                } else {
                    nominal[k] - next[k]
                };
            }
            if !r.iter().all(|v| v.is_finite()) {
                return self.brake_fallback();
            }
            a_mats.push(a);
            b_mats.push(b);
            resid.push(DVector::from_row_slice(&r));
        }

        // initial deviation (s-component wrapped; zero by construction)
        let mut xi0 = DVector::<f64>::zeros(6);
        xi0[0] = wrap_diff(state.s, x_ref[0].s, length);
        xi0[1] = state.e_y - x_ref[0].e_y;
        xi0[2] = state.e_psi - x_ref[0].e_psi;
        xi0[3] = state.v_x - x_ref[0].v_x;
        xi0[4] = state.v_y - x_ref[0].v_y;
        xi0[5] = state.w - x_ref[0].w;

        // condense: xi_i = phi_i + G_i nu, free response phi accumulated
        // alongside the input-to-state blocks
        let n_vars = 2 * n;
        let q_diag = &self.config.state_weights;
        let r_diag = &self.config.input_weights;
        let rd_diag = &self.config.input_rate_weights;

        let mut p = DMatrix::<f64>::zeros(n_vars, n_vars);
        let mut q_lin = DVector::<f64>::zeros(n_vars);

        // g_blocks[j] = d xi_current / d nu_j (6 x 2), updated stage by stage
        let mut g_blocks: Vec<DMatrix<f64>> = vec![DMatrix::zeros(6, 2); n];
        let mut phi = xi0.clone();
        for i in 0..n {
            // advance one stage: xi_{i+1} = A_i xi_i + B_i nu_i + r_i
            for block in g_blocks.iter_mut().take(i) {
                *block = &a_mats[i] * &*block;
            }
            g_blocks[i] = b_mats[i].clone();
            phi = &a_mats[i] * &phi + &resid[i];

            // accumulate state cost of xi_{i+1}
            for (j, gj) in g_blocks.iter().enumerate().take(i + 1) {
                for (k, gk) in g_blocks.iter().enumerate().take(i + 1) {
                    // P += G_j' Q G_k
                    for r in 0..2 {
                        for c in 0..2 {
                            let mut acc = 0.0;
                            for d in 0..6 {
                                acc += gj[(d, r)] * q_diag[d] * gk[(d, c)];
                            }
                            p[(2 * j + r, 2 * k + c)] += acc;
                        }
                    }
                }
                for r in 0..2 {
                    let mut acc = 0.0;
                    for d in 0..6 {
                        acc += gj[(d, r)] * q_diag[d] * phi[d];
                    }
                    q_lin[2 * j + r] += acc;
                }
            }
        }

        // input cost and rate cost (u = u_ref + nu, rate in nu-space with
        // constant shift from the reference inputs and the previous input)
        for i in 0..n {
            for r in 0..2 {
                p[(2 * i + r, 2 * i + r)] += r_diag[r];
            }
            let (prev_a, prev_delta) = if i == 0 {
                (self.prev_input.a, self.prev_input.delta)
            } else {
                (u_ref[i - 1].a, u_ref[i - 1].delta)
            };
            let shift = [u_ref[i].a - prev_a, u_ref[i].delta - prev_delta];
            for r in 0..2 {
                p[(2 * i + r, 2 * i + r)] += rd_diag[r];
                q_lin[2 * i + r] += rd_diag[r] * shift[r];
                if i > 0 {
                    p[(2 * (i - 1) + r, 2 * (i - 1) + r)] += rd_diag[r];
                    p[(2 * i + r, 2 * (i - 1) + r)] -= rd_diag[r];
                    p[(2 * (i - 1) + r, 2 * i + r)] -= rd_diag[r];
                    q_lin[2 * (i - 1) + r] -= rd_diag[r] * shift[r];
                }
            }
        }

        // symmetric box on u mapped into nu-space
        let mut lo = DVector::<f64>::zeros(n_vars);
        let mut hi = DVector::<f64>::zeros(n_vars);
        for i in 0..n {
            lo[2 * i] = -self.config.input_box.a_max - u_ref[i].a;
            hi[2 * i] = self.config.input_box.a_max - u_ref[i].a;
            lo[2 * i + 1] = -self.config.input_box.delta_max - u_ref[i].delta;
            hi[2 * i + 1] = self.config.input_box.delta_max - u_ref[i].delta;
        }

        // warm start: shift the previous solution forward one control period
        let mut z0 = DVector::<f64>::zeros(n_vars);
        z0.rows_mut(0, n_vars - 2).copy_from(&self.warm_nu.rows(2, n_vars - 2));
        let admm = AdmmBoxQp::new(&p, self.config.admm_rho);
        let (sol, dual) = admm.solve(
            &q_lin,
            &lo,
            &hi,
            &z0,
            &self.warm_dual,
            self.config.qp_tol,
            self.config.qp_max_iters,
        );
        self.diag.qp_iterations = sol.iterations;
        self.diag.qp_residual = sol.residual;
        self.diag.qp_converged = sol.converged;
        self.diag.cost = (0.5 * sol.x.dot(&(&p * &sol.x)) + q_lin.dot(&sol.x)).max(0.0);
        self.warm_nu = sol.x.clone();
        self.warm_dual = dual;

        let u = ControlInput { a: u_ref[0].a + sol.x[0], delta: u_ref[0].delta + sol.x[1] }
            .clamped(&self.config.input_box);
        self.prev_input = u;
        u
    }

    fn reset(&mut self) {
        self.prev_input = ControlInput::zeros();
        self.warm_nu = DVector::zeros(2 * self.config.horizon);
        self.warm_dual = DVector::zeros(2 * self.config.horizon);
        self.diag = ControllerDiagnostics::default();
    }

    fn diagnostics(&self) -> ControllerDiagnostics {
        self.diag.clone()
    }
}

/// Geometric pure-pursuit tracker with proportional speed control; the
/// simplest useful implementation of the controller contract.
pub struct PurePursuit {
    track: Track,
    params: VehicleParams,
    input_box: InputBox,
    ref_e_y: Vec<f64>,
    ref_v_x: Vec<f64>,
    ref_e_psi: Vec<f64>,
    pub lookahead_gain: f64,
    pub lookahead_min: f64,
    pub speed_gain: f64,
}

impl PurePursuit {
    pub fn new(track: &Track, reference: &TrajectoryProfiles, params: &VehicleParams) -> Self {
        let e_psi = reference_heading_error(track, &reference.e_y);
        PurePursuit {
            track: track.clone(),
            params: *params,
            input_box: InputBox::default(),
            ref_e_y: reference.e_y.clone(),
            ref_v_x: reference.v_x.clone(),
            ref_e_psi: e_psi,
            lookahead_gain: 0.35,
            lookahead_min: 0.3,
            speed_gain: 3.0,
        }
    }
}

impl TrackingController for PurePursuit {
    fn control(
        &mut self,
        state: &VehicleState,
        _residual: Option<&dyn ResidualModel>,
    ) -> ControlInput {
        let lookahead = (self.lookahead_gain * state.v_x).max(self.lookahead_min);
        let s_target = state.s + lookahead;
        let e_target = interp_profile(&self.ref_e_y, &self.track, s_target);
        let psi_target = interp_profile(&self.ref_e_psi, &self.track, s_target);
        // lateral offset of the target point in the body frame
        let y_local = (e_target - state.e_y) * state.e_psi.cos()
            - lookahead * (state.e_psi - psi_target).sin();
        let kappa_cmd = 2.0 * y_local / (lookahead * lookahead);
        let kappa_track = self.track.curvature_at(s_target);
        let wheelbase = self.params.l_f + self.params.l_r;
        let delta = (wheelbase * (kappa_cmd + kappa_track)).atan();
        let v_ref = interp_profile(&self.ref_v_x, &self.track, state.s);
        let a = self.speed_gain * (v_ref - state.v_x);
        ControlInput { a, delta }.clamped(&self.input_box)
    }

    fn reset(&mut self) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::Track;

    fn constant_reference(track: &Track, e_y: f64, v: f64) -> TrajectoryProfiles {
        let n = track.n_samples();
        TrajectoryProfiles { e_y: vec![e_y; n], v_x: vec![v; n] }
    }

    #[test]
    fn equilibrium_returns_near_zero_inputs() {
        // straight segment, on the reference at reference speed
        let track = Track::stadium(8.0, 2.0, 512, 0.6);
        let reference = constant_reference(&track, 0.0, 2.0);
        let params = VehicleParams::default();
        let mut mpc = LtvMpc::new(&track, &reference, &params, ControllerConfig::default());
        mpc.prev_input = ControlInput::zeros();
        let state = VehicleState { s: 2.0, v_x: 2.0, ..VehicleState::zeros() };
        let u = mpc.control(&state, None);
        assert!(u.a.abs() < 1e-3, "a = {}", u.a);
        assert!(u.delta.abs() < 1e-3, "delta = {}", u.delta);
    }

    #[test]
    fn positive_offset_steers_negative() {
        let track = Track::stadium(8.0, 2.0, 512, 0.6);
        let reference = constant_reference(&track, 0.0, 2.0);
        let params = VehicleParams::default();
        let mut mpc = LtvMpc::new(&track, &reference, &params, ControllerConfig::default());
        let state = VehicleState { s: 2.0, e_y: 0.1, v_x: 2.0, ..VehicleState::zeros() };
        let u = mpc.control(&state, None);
        assert!(u.delta < 0.0, "delta = {}", u.delta);
    }

    #[test]
    fn inputs_always_inside_box() {
        let track = Track::stadium(8.0, 2.0, 512, 0.6);
        let reference = constant_reference(&track, 0.0, 3.5);
        let params = VehicleParams::default();
        let cfg = ControllerConfig::default();
        let bx = cfg.input_box;
        let mut mpc = LtvMpc::new(&track, &reference, &params, cfg);
        // absurd states still produce admissible inputs
        for (ey, vx, w) in [(0.5, 0.0, 0.0), (-0.5, 3.0, 4.0), (0.3, 6.0, -5.0)] {
            let state = VehicleState { s: 1.0, e_y: ey, e_psi: 0.4, v_x: vx, v_y: 0.2, w };
            let u = mpc.control(&state, None);
            assert!(u.a.abs() <= bx.a_max + 1e-12);
            assert!(u.delta.abs() <= bx.delta_max + 1e-12);
        }
    }

    #[test]
    fn deterministic_given_same_state() {
        let track = Track::stadium(8.0, 2.0, 512, 0.6);
        let reference = constant_reference(&track, 0.05, 2.0);
        let params = VehicleParams::default();
        let state = VehicleState { s: 3.0, e_y: -0.1, v_x: 1.8, ..VehicleState::zeros() };
        let mut m1 = LtvMpc::new(&track, &reference, &params, ControllerConfig::default());
        let mut m2 = LtvMpc::new(&track, &reference, &params, ControllerConfig::default());
        let u1 = m1.control(&state, None);
        let u2 = m2.control(&state, None);
        assert_eq!(u1.a.to_bits(), u2.a.to_bits());
        assert_eq!(u1.delta.to_bits(), u2.delta.to_bits());
    }

    #[test]
    fn one_step_prediction_matches_world_on_matched_integrators() {
        let track = Track::stadium(8.0, 2.0, 512, 0.6);
        let reference = constant_reference(&track, 0.0, 2.0);
        let params = VehicleParams::default();
        let mpc = LtvMpc::new(&track, &reference, &params, ControllerConfig::default());
        let res = ConstantResidual([0.3, -0.1, 0.2]);
        let state = VehicleState { s: 2.0, e_y: 0.02, v_x: 2.0, v_y: 0.01, w: 0.05, ..VehicleState::zeros() };
        let input = ControlInput { a: 0.5, delta: 0.03 };
        let predicted = mpc.predict_one_step(&state, &input, Some(&res)).unwrap();
        // the "true world" integrates the same augmented dynamics at the
        // same step size
        let truth = step_time(&state, &input, &params, &track, 0.05, Some(&res)).unwrap();
        let err: f64 = predicted
            .to_array()
            .iter()
            .zip(truth.to_array().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "prediction error {err}");
    }

    #[test]
    fn zero_horizon_rejected() {
        let track = Track::stadium(8.0, 2.0, 256, 0.6);
        let reference = constant_reference(&track, 0.0, 2.0);
        let params = VehicleParams::default();
        let cfg = ControllerConfig { horizon: 0, ..ControllerConfig::default() };
        let result = std::panic::catch_unwind(|| LtvMpc::new(&track, &reference, &params, cfg));
        assert!(result.is_err());
    }
}
