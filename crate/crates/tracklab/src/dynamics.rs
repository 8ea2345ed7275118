//! Frenet-frame bicycle model with a simplified Pacejka tire model, residual
//! augmentation, and fixed-step RK4 integrators in the time and arc-length
//! domains.
//!
//! State x = [s, e_y, e_psi, v_x, v_y, w], input u = [a, delta]:
//!
//! ```text
//! s_dot     = (v_x cos(e_psi) - v_y sin(e_psi)) / (1 - kappa(s) e_y)
//! e_y_dot   = v_x sin(e_psi) + v_y cos(e_psi)
//! e_psi_dot = w - kappa(s) * s_dot
//! v_x_dot   = a - (F_yf sin(delta) - m w v_y) / m
//! v_y_dot   = (F_yf cos(delta) + F_yr - m w v_x) / m
//! w_dot     = (L_f F_yf cos(delta) - L_r F_yr) / I_z
//! ```
//!
//! An optional residual model adds corrections to the three velocity-state
//! rows; the injection keeps `extract_velocity_rows(inject(y)) == y`.

use crate::track::{Track, TrackError};

/// Low-speed regularization for slip angles: below this |v_x| the slip-angle
/// denominators use v_eps instead.
pub const V_EPS: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("simulation diverged: non-finite state after step (t index ~{step})")]
    Diverged { step: usize },
    #[error("vehicle not progressing: s_dot = {s_dot:.4} <= 0 in arc-length stepping")]
    NotProgressing { s_dot: f64 },
}

/// Vehicle state in Frenet coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub s: f64,
    pub e_y: f64,
    pub e_psi: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub w: f64,
}

impl VehicleState {
    pub fn zeros() -> Self {
        VehicleState { s: 0.0, e_y: 0.0, e_psi: 0.0, v_x: 0.0, v_y: 0.0, w: 0.0 }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.s, self.e_y, self.e_psi, self.v_x, self.v_y, self.w]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        VehicleState { s: a[0], e_y: a[1], e_psi: a[2], v_x: a[3], v_y: a[4], w: a[5] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Longitudinal acceleration and steering angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub a: f64,
    pub delta: f64,
}

impl ControlInput {
    pub fn zeros() -> Self {
        ControlInput { a: 0.0, delta: 0.0 }
    }

    pub fn clamped(&self, box_limits: &InputBox) -> ControlInput {
        ControlInput {
            a: self.a.clamp(-box_limits.a_max, box_limits.a_max),
            delta: self.delta.clamp(-box_limits.delta_max, box_limits.delta_max),
        }
    }
}

/// Symmetric input box |a| <= a_max, |delta| <= delta_max.
#[derive(Debug, Clone, Copy)]
pub struct InputBox {
    pub a_max: f64,
    pub delta_max: f64,
}

impl Default for InputBox {
    fn default() -> Self {
        InputBox { a_max: 4.0, delta_max: 0.4 }
    }
}

/// Bicycle model parameters (1/10-scale defaults).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleParams {
    pub tire_b: f64,
    pub tire_c: f64,
    pub mu: f64,
    pub i_z: f64,
    pub mass: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub gravity: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            tire_b: 1.3,
            tire_c: 1.5,
            mu: 1.2,
            i_z: 0.024,
            mass: 3.0,
            l_f: 0.14,
            l_r: 0.14,
            gravity: 9.81,
        }
    }
}

/// Residual correction of the velocity-state derivatives as a function of
/// the feature vector z = (v_x, v_y, w, a, delta).
pub trait ResidualModel: Sync {
    fn residual(&self, z: &[f64; 5]) -> [f64; 3];
}

/// Residual that returns a fixed vector; used in tests and synthetic worlds.
pub struct ConstantResidual(pub [f64; 3]);

impl ResidualModel for ConstantResidual {
    fn residual(&self, _z: &[f64; 5]) -> [f64; 3] {
        self.0
    }
}

/// Feature vector of the residual model.
pub fn residual_features(state: &VehicleState, input: &ControlInput) -> [f64; 5] {
    [state.v_x, state.v_y, state.w, input.a, input.delta]
}

/// Extract the velocity-related components (v_x, v_y, w) of a state array.
pub fn extract_velocity_rows(xdot: &[f64; 6]) -> [f64; 3] {
    [xdot[3], xdot[4], xdot[5]]
}

/// Inject a velocity-rows correction into a full state-derivative array.
pub fn inject_velocity_rows(y: &[f64; 3]) -> [f64; 6] {
    [0.0, 0.0, 0.0, y[0], y[1], y[2]]
}

/// Lateral tire forces (front, rear) of the simplified Pacejka model:
/// `F = D sin(C atan(B alpha))` with a static load split across the axles.
pub fn lateral_tire_forces(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
) -> (f64, f64) {
    let vx = state.v_x.max(V_EPS);
    let alpha_f = input.delta - ((state.v_y + params.l_f * state.w) / vx).atan();
    let alpha_r = -((state.v_y - params.l_r * state.w) / vx).atan();
    let wheelbase = params.l_f + params.l_r;
    let d_f = params.mu * params.mass * params.gravity * params.l_r / wheelbase;
    let d_r = params.mu * params.mass * params.gravity * params.l_f / wheelbase;
    let f_yf = d_f * (params.tire_c * (params.tire_b * alpha_f).atan()).sin();
    let f_yr = d_r * (params.tire_c * (params.tire_b * alpha_r).atan()).sin();
    (f_yf, f_yr)
}

/// Continuous-time state derivative. Residual corrections, when present, are
/// added to the velocity rows. Returns a Frenet singularity error when
/// `1 - kappa(s) e_y <= 0`.
pub fn continuous_derivative(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
    track: &Track,
    residual: Option<&dyn ResidualModel>,
) -> Result<[f64; 6], DynamicsError> {
    let kappa = track.curvature_at(state.s);
    let denom = 1.0 - kappa * state.e_y;
    if denom <= 0.0 {
        return Err(DynamicsError::Track(TrackError::FrenetSingularity {
            s: track.wrap_s(state.s),
            e_y: state.e_y,
        }));
    }
    let (f_yf, f_yr) = lateral_tire_forces(state, input, params);
    let cos_epsi = state.e_psi.cos();
    let sin_epsi = state.e_psi.sin();
    let s_dot = (state.v_x * cos_epsi - state.v_y * sin_epsi) / denom;

    let mut xdot = [
        s_dot,
        state.v_x * sin_epsi + state.v_y * cos_epsi,
        state.w - kappa * s_dot,
        input.a - (f_yf * input.delta.sin() - params.mass * state.w * state.v_y) / params.mass,
        (f_yf * input.delta.cos() + f_yr - params.mass * state.w * state.v_x) / params.mass,
        (params.l_f * f_yf * input.delta.cos() - params.l_r * f_yr) / params.i_z,
    ];
    if let Some(r) = residual {
        let y = r.residual(&residual_features(state, input));
        xdot[3] += y[0];
        xdot[4] += y[1];
        xdot[5] += y[2];
    }
    Ok(xdot)
}

fn add_scaled(x: &[f64; 6], k: &[f64; 6], h: f64) -> VehicleState {
    VehicleState::from_array([
        x[0] + h * k[0],
        x[1] + h * k[1],
        x[2] + h * k[2],
        x[3] + h * k[3],
        x[4] + h * k[4],
        x[5] + h * k[5],
    ])
}

/// One fixed-step RK4 update over dt. Wraps s modulo the track length and
/// floors v_x at zero (stall clamp).
pub fn step_time(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
    track: &Track,
    dt: f64,
    residual: Option<&dyn ResidualModel>,
) -> Result<VehicleState, DynamicsError> {
    assert!(dt > 0.0);
    let x = state.to_array();
    let k1 = continuous_derivative(state, input, params, track, residual)?;
    let s2 = add_scaled(&x, &k1, 0.5 * dt);
    let k2 = continuous_derivative(&s2, input, params, track, residual)?;
    let s3 = add_scaled(&x, &k2, 0.5 * dt);
    let k3 = continuous_derivative(&s3, input, params, track, residual)?;
    let s4 = add_scaled(&x, &k3, dt);
    let k4 = continuous_derivative(&s4, input, params, track, residual)?;

    let mut next = [0.0; 6];
    for i in 0..6 {
        next[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    let mut out = VehicleState::from_array(next);
    out.s = track.wrap_s(out.s);
    out.v_x = out.v_x.max(0.0);
    if !out.is_finite() {
        return Err(DynamicsError::Diverged { step: 0 });
    }
    Ok(out)
}

/// One RK4 update of dx/ds = x_dot / s_dot over an arc-length step, also
/// returning the elapsed time (integral of 1/s_dot). Errors when the vehicle
/// is not progressing (s_dot <= 0) at any stage.
pub fn step_space(
    state: &VehicleState,
    input: &ControlInput,
    params: &VehicleParams,
    track: &Track,
    delta_s: f64,
    residual: Option<&dyn ResidualModel>,
) -> Result<(VehicleState, f64), DynamicsError> {
    assert!(delta_s > 0.0);
    // augmented state [x; t], derivative [x_dot / s_dot; 1 / s_dot]
    let deriv = |st: &VehicleState| -> Result<([f64; 6], f64), DynamicsError> {
        let xdot = continuous_derivative(st, input, params, track, residual)?;
        let s_dot = xdot[0];
        if s_dot <= 0.0 {
            return Err(DynamicsError::NotProgressing { s_dot });
        }
        let mut dxds = [0.0; 6];
        for i in 0..6 {
            dxds[i] = xdot[i] / s_dot;
        }
        Ok((dxds, 1.0 / s_dot))
    };

    let x = state.to_array();
    let (k1, t1) = deriv(state)?;
    let (k2, t2) = deriv(&add_scaled(&x, &k1, 0.5 * delta_s))?;
    let (k3, t3) = deriv(&add_scaled(&x, &k2, 0.5 * delta_s))?;
    let (k4, t4) = deriv(&add_scaled(&x, &k3, delta_s))?;

    let mut next = [0.0; 6];
    for i in 0..6 {
        next[i] = x[i] + delta_s / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    let elapsed = delta_s / 6.0 * (t1 + 2.0 * t2 + 2.0 * t3 + t4);
    let mut out = VehicleState::from_array(next);
    out.s = track.wrap_s(out.s);
    out.v_x = out.v_x.max(0.0);
    if !out.is_finite() {
        return Err(DynamicsError::Diverged { step: 0 });
    }
    Ok((out, elapsed))
}
