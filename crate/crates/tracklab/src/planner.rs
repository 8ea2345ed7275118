//! Nominal raceline planning: linearized minimum-curvature path QP followed
//! by a forward/backward velocity profile under a friction-circle limit, plus
//! the cubic-spline ablation codec.

use crate::dynamics::VehicleParams;
use crate::solver::nesterov_box_qp;
use crate::track::Track;
use crate::wavelet::TrajectoryProfiles;
use nalgebra::DVector;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("path QP infeasible: track narrower than the vehicle (margin {margin:.4} m at sample {index})")]
    Infeasible { index: usize, margin: f64 },
    #[error("velocity profile did not converge after {laps} laps")]
    VelocityNotConverged { laps: usize },
    #[error("path QP did not reach KKT tolerance: residual {residual:.2e}")]
    QpNotConverged { residual: f64 },
    #[error("plan file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Planner settings (1/10-scale defaults).
#[derive(Debug, Clone)]
pub struct PlannerConfig {
    pub vehicle_half_width: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub kkt_tol: f64,
    pub max_qp_iters: usize,
    /// Weight of the path-length term (first-order `-kappa e` plus
    /// `||e'||^2/2`) added to the squared-path-curvature objective. Zero
    /// recovers plain minimum curvature.
    pub length_weight: f64,
    /// Extra lateral clearance reserved when planning so that tracking
    /// overshoot around the raceline does not immediately leave the track.
    pub planning_margin: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            vehicle_half_width: 0.095,
            v_max: 4.0,
            a_max: 4.0,
            kkt_tol: 1e-6,
            max_qp_iters: 400_000,
            length_weight: 10.0,
            planning_margin: 0.04,
        }
    }
}

/// Nominal plan: reference profiles, predicted lap time, per-sample margins.
#[derive(Debug, Clone)]
pub struct NominalPlan {
    pub profiles: TrajectoryProfiles,
    pub planned_lap_time: f64,
    pub feasibility: FeasibilityReport,
}

/// Per-sample margins of the plan against its own constraints. Positive
/// margins mean satisfied.
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub track_margin: Vec<f64>,
    pub friction_margin: Vec<f64>,
}

impl FeasibilityReport {
    pub fn violations(&self) -> usize {
        self.track_margin
            .iter()
            .chain(self.friction_margin.iter())
            .filter(|m| **m < -1e-9)
            .count()
    }
}

// Periodic operator A e = diag(kappa^2) e + D2 e; symmetric, so A' = A.
fn apply_curvature_operator(e: &DVector<f64>, kappa: &[f64], ds: f64) -> DVector<f64> {
    let n = e.len();
    let mut out = DVector::zeros(n);
    for k in 0..n {
        let prev = e[(k + n - 1) % n];
        let next = e[(k + 1) % n];
        out[k] = kappa[k] * kappa[k] * e[k] + (next - 2.0 * e[k] + prev) / (ds * ds);
    }
    out
}

// Periodic central first difference (path-length term).
fn apply_first_difference(e: &DVector<f64>, ds: f64) -> DVector<f64> {
    let n = e.len();
    let mut out = DVector::zeros(n);
    for k in 0..n {
        out[k] = (e[(k + 1) % n] - e[(k + n - 1) % n]) / (2.0 * ds);
    }
    out
}

/// Linearized minimum-curvature path with a path-length regularization:
/// minimize `||kappa + kappa^2 e + e''||^2 + length_weight * dL(e)` where
/// `dL(e) = sum(-kappa e + e'^2/2) ds` is the linearized length change, over
/// lateral offsets with box constraints `|e| <= w_half - veh_half_width` and
/// periodic continuity.
pub fn plan_min_curvature_path(track: &Track, vehicle_half_width: f64) -> Result<Vec<f64>, PlanError> {
    let cfg = PlannerConfig { vehicle_half_width, ..PlannerConfig::default() };
    plan_min_curvature_path_cfg(track, &cfg)
}

pub fn plan_min_curvature_path_cfg(track: &Track, cfg: &PlannerConfig) -> Result<Vec<f64>, PlanError> {
    let n = track.n_samples();
    let ds = track.delta_s();
    let kappa: Vec<f64> = track.curvature_samples()[..n].to_vec();
    let lambda = cfg.length_weight;

    let mut bound = Vec::with_capacity(n);
    for k in 0..n {
        let b = track.half_width_samples()[k] - cfg.vehicle_half_width;
        if b < 0.0 {
            return Err(PlanError::Infeasible { index: k, margin: b });
        }
        bound.push((b - cfg.planning_margin).max(0.0));
    }

    let kap = kappa.clone();
    let mul_p = move |v: &DVector<f64>| -> DVector<f64> {
        let av = apply_curvature_operator(v, &kap, ds);
        let mut out = 2.0 * apply_curvature_operator(&av, &kap, ds);
        if lambda > 0.0 {
            // D1' D1 = -D1 D1 for the antisymmetric central difference
            let dv = apply_first_difference(v, ds);
            out -= lambda * ds * apply_first_difference(&dv, ds);
        }
        out
    };
    let kvec = DVector::from_vec(kappa.clone());
    let mut q = 2.0 * apply_curvature_operator(&kvec, &kappa, ds);
    if lambda > 0.0 {
        // linear length term: d(length)/d(e_k) = -kappa_k ds
        for k in 0..n {
            q[k] -= lambda * ds * kappa[k];
        }
    }
    let lo = DVector::from_fn(n, |i, _| -bound[i]);
    let hi = DVector::from_fn(n, |i, _| bound[i]);

    let sol = nesterov_box_qp(&mul_p, &q, &lo, &hi, &DVector::zeros(n), cfg.kkt_tol, cfg.max_qp_iters);
    if !sol.converged {
        return Err(PlanError::QpNotConverged { residual: sol.residual });
    }
    Ok(sol.x.iter().copied().collect())
}

/// Geometry of the path induced by a lateral-offset profile: Cartesian
/// points, chord step lengths, and discrete (Menger) curvature per sample.
pub struct PathGeometry {
    pub points: Vec<[f64; 2]>,
    pub step_lengths: Vec<f64>, // chord from sample k to k+1
    pub curvature: Vec<f64>,
    pub total_length: f64,
}

pub fn path_geometry(track: &Track, e_y: &[f64]) -> PathGeometry {
    let n = track.n_samples();
    let points: Vec<[f64; 2]> = (0..n)
        .map(|k| {
            let s = track.arc_lengths()[k];
            track
                .frenet_to_cartesian(s, e_y[k])
                .expect("path within track stays clear of the Frenet singularity")
        })
        .collect();
    let mut step_lengths = Vec::with_capacity(n);
    for k in 0..n {
        let a = points[k];
        let b = points[(k + 1) % n];
        step_lengths.push(((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt());
    }
    let total_length = step_lengths.iter().sum();
    let mut curvature = Vec::with_capacity(n);
    for k in 0..n {
        let a = points[(k + n - 1) % n];
        let b = points[k];
        let c = points[(k + 1) % n];
        let ab = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let bc = ((c[0] - b[0]).powi(2) + (c[1] - b[1]).powi(2)).sqrt();
        let ca = ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)).sqrt();
        let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        let denom = ab * bc * ca;
        curvature.push(if denom > 1e-12 { 2.0 * cross / denom } else { 0.0 });
    }
    PathGeometry { points, step_lengths, curvature, total_length }
}

/// Forward/backward velocity profile along the path under the friction
/// circle `a_long^2 + (kappa v^2)^2 <= (mu g)^2` and `|a_long| <= a_max`.
/// Iterates periodic passes until two consecutive laps agree within 1e-6.
pub fn plan_velocity_profile(
    track: &Track,
    e_y: &[f64],
    params: &VehicleParams,
    cfg: &PlannerConfig,
) -> Result<Vec<f64>, PlanError> {
    let geom = path_geometry(track, e_y);
    plan_velocity_for_geometry(&geom, params, cfg)
}

/// Highest speed reachable at the far end of a segment of length `d` with
/// per-segment curvature `kap`, entering at any speed up to `v_entry`:
/// maximizes `v^2 + 2 d a(v)` with `a(v) = min(a_max, sqrt(mu_g^2 -
/// (kap v^2)^2))`. The map is not monotone near the lateral limit (slower
/// entry leaves more longitudinal grip), so the interior critical point is
/// taken analytically.
fn max_exit_speed(kap: f64, v_entry: f64, d: f64, mu_g: f64, a_max: f64) -> f64 {
    let kap = kap.abs();
    if kap < 1e-12 {
        return (v_entry * v_entry + 2.0 * a_max * d).sqrt();
    }
    let v_lat = (mu_g / kap).sqrt();
    let v_entry = v_entry.min(v_lat);
    let f = |vi: f64| -> f64 {
        let lat = kap * vi * vi;
        let rem = (mu_g * mu_g - lat * lat).max(0.0).sqrt().min(a_max);
        (vi * vi + 2.0 * rem * d).sqrt()
    };
    let mut best = f(v_entry);
    // below v_c the friction circle still allows full a_max; above it the
    // objective has a single interior maximum at kap*v^2 = mu_g/sqrt(1+4d^2kap^2)
    let v_c = if mu_g > a_max {
        ((mu_g * mu_g - a_max * a_max).sqrt() / kap).sqrt()
    } else {
        0.0
    };
    if v_entry > v_c {
        let u = mu_g / (1.0 + 4.0 * d * d * kap * kap).sqrt();
        let vi_star = (u / kap).sqrt().clamp(v_c, v_entry);
        best = best.max(f(vi_star));
    }
    best
}

pub fn plan_velocity_for_geometry(
    geom: &PathGeometry,
    params: &VehicleParams,
    cfg: &PlannerConfig,
) -> Result<Vec<f64>, PlanError> {
    let n = geom.curvature.len();
    let mu_g = params.mu * params.gravity;
    let mut v: Vec<f64> = (0..n)
        .map(|k| {
            let kap = geom.curvature[k].abs();
            if kap > 1e-9 { (mu_g / kap).sqrt().min(cfg.v_max) } else { cfg.v_max }
        })
        .collect();

    for lap in 0..50 {
        let before = v.clone();
        // forward: acceleration limit
        for k in 0..n {
            let k1 = (k + 1) % n;
            let reachable = max_exit_speed(geom.curvature[k], v[k], geom.step_lengths[k], mu_g, cfg.a_max);
            if v[k1] > reachable {
                v[k1] = reachable;
            }
        }
        // backward: braking limit (symmetric, availability at the slow end)
        for k in (0..n).rev() {
            let k1 = (k + 1) % n;
            let allowed = max_exit_speed(geom.curvature[k1], v[k1], geom.step_lengths[k], mu_g, cfg.a_max);
            if v[k] > allowed {
                v[k] = allowed;
            }
        }
        let delta = v
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if delta < 1e-6 && lap > 0 {
            return Ok(v);
        }
    }
    Err(PlanError::VelocityNotConverged { laps: 50 })
}

/// Reference heading error of a path given by lateral offsets: the angle of
/// the path tangent relative to the centerline tangent.
pub fn reference_heading_error(track: &Track, e_y: &[f64]) -> Vec<f64> {
    let n = track.n_samples();
    let ds = track.delta_s();
    (0..n)
        .map(|k| {
            let de = (e_y[(k + 1) % n] - e_y[(k + n - 1) % n]) / (2.0 * ds);
            let kap = track.curvature_samples()[k];
            de.atan2(1.0 - kap * e_y[k])
        })
        .collect()
}

/// Lap time of a profile pair via the spatial sum `T = sum ds / s_dot` with
/// `s_dot = v_x cos(e_psi) / (1 - kappa e_y)` (planned v_y = 0).
pub fn profile_lap_time(track: &Track, profiles: &TrajectoryProfiles) -> f64 {
    let n = track.n_samples();
    let ds = track.delta_s();
    let e_psi = reference_heading_error(track, &profiles.e_y);
    let mut t = 0.0;
    for k in 0..n {
        let kap = track.curvature_samples()[k];
        let denom = 1.0 - kap * profiles.e_y[k];
        let s_dot = profiles.v_x[k] * e_psi[k].cos() / denom;
        t += ds / s_dot.max(1e-6);
    }
    t
}

/// Full two-stage nominal plan with its feasibility report.
pub fn assemble_nominal_plan(
    track: &Track,
    params: &VehicleParams,
    cfg: &PlannerConfig,
) -> Result<NominalPlan, PlanError> {
    let e_y = plan_min_curvature_path_cfg(track, cfg)?;
    let v_x = plan_velocity_profile(track, &e_y, params, cfg)?;
    let profiles = TrajectoryProfiles { e_y: e_y.clone(), v_x: v_x.clone() };
    let planned_lap_time = profile_lap_time(track, &profiles);

    let n = track.n_samples();
    let geom = path_geometry(track, &e_y);
    let mu_g = params.mu * params.gravity;
    let mut track_margin = Vec::with_capacity(n);
    let mut friction_margin = Vec::with_capacity(n);
    for k in 0..n {
        track_margin.push(track.half_width_samples()[k] - cfg.vehicle_half_width - e_y[k].abs());
        let k1 = (k + 1) % n;
        let a_long = (v_x[k1] * v_x[k1] - v_x[k] * v_x[k]) / (2.0 * geom.step_lengths[k]);
        let a_lat = geom.curvature[k].abs() * v_x[k] * v_x[k];
        friction_margin.push(mu_g * mu_g - (a_long * a_long + a_lat * a_lat));
    }
    Ok(NominalPlan {
        profiles,
        planned_lap_time,
        feasibility: FeasibilityReport { track_margin, friction_margin },
    })
}

// ---------------------------------------------------------------------------
// Cubic-spline ablation codec
// ---------------------------------------------------------------------------

/// Spline parameter vector: each profile sampled (periodic linear
/// interpolation) at `n_control` exactly uniform arc-length abscissae,
/// concatenated (e_y block then v_x block).
pub fn spline_ablation_encode(profiles: &TrajectoryProfiles, n_control: usize) -> Vec<f64> {
    let n = profiles.len();
    let mut params = Vec::with_capacity(2 * n_control);
    for profile in [&profiles.e_y, &profiles.v_x] {
        for c in 0..n_control {
            let pos = c as f64 * n as f64 / n_control as f64;
            let idx = pos.floor() as usize % n;
            let frac = pos - pos.floor();
            params.push(profile[idx] * (1.0 - frac) + profile[(idx + 1) % n] * frac);
        }
    }
    params
}

/// Evaluate periodic cubic splines through the control values at all
/// `n_samples` arc-length samples.
pub fn spline_ablation_decode(
    params: &[f64],
    n_control: usize,
    n_samples: usize,
    total_length: f64,
) -> TrajectoryProfiles {
    assert_eq!(params.len(), 2 * n_control);
    let knots: Vec<f64> = (0..n_control)
        .map(|c| total_length * c as f64 / n_control as f64)
        .collect();
    let decode_one = |vals: &[f64]| -> Vec<f64> {
        let spline = crate::track::PeriodicCubicSpline::new(&knots, vals, total_length);
        (0..n_samples)
            .map(|k| spline.eval(total_length * k as f64 / n_samples as f64))
            .collect()
    };
    TrajectoryProfiles {
        e_y: decode_one(&params[..n_control]),
        v_x: decode_one(&params[n_control..]),
    }
}

/// Plan file: header then rows of `s e_y v_x`.
pub fn save_plan(
    path: &std::path::Path,
    track: &Track,
    profiles: &TrajectoryProfiles,
    lap_time: f64,
) -> Result<(), PlanError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# tracklab plan v1")?;
    writeln!(f, "# planned_lap_time={lap_time:.17e}")?;
    writeln!(f, "# columns: s e_y v_x")?;
    for k in 0..track.n_samples() {
        writeln!(
            f,
            "{:.17e} {:.17e} {:.17e}",
            track.arc_lengths()[k],
            profiles.e_y[k],
            profiles.v_x[k]
        )?;
    }
    Ok(())
}

pub fn load_plan(path: &std::path::Path) -> Result<TrajectoryProfiles, PlanError> {
    use std::io::BufRead;
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut e_y = Vec::new();
    let mut v_x = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let cols: Vec<f64> = t
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| PlanError::Parse { line: lineno + 1, msg: e.to_string() })?;
        if cols.len() != 3 {
            return Err(PlanError::Parse {
                line: lineno + 1,
                msg: format!("expected 3 columns, got {}", cols.len()),
            });
        }
        e_y.push(cols[1]);
        v_x.push(cols[2]);
    }
    Ok(TrajectoryProfiles { e_y, v_x })
}
