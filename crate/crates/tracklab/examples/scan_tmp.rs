use tracklab::dynamics::VehicleParams;
use tracklab::planner::{
    plan_min_curvature_path_cfg, plan_velocity_profile, profile_lap_time, PlannerConfig,
};
use tracklab::track::generate_random_track_cfg;
use tracklab::wavelet::TrajectoryProfiles;

fn main() {
    let params = VehicleParams::default();
    for lambda in [0.0, 1.0, 3.0, 10.0, 30.0, 100.0] {
        for scale in [3.2, 4.0, 5.0] {
            let cfg = PlannerConfig { length_weight: lambda, ..PlannerConfig::default() };
            let mut beats = 0;
            let mut total = 0;
            let mut worst: f64 = 1.0;
            let mut gains = Vec::new();
            for seed in 1..=12u64 {
                let t = match generate_random_track_cfg(seed, 12, scale, 256, 0.4) {
                    Ok(t) => t,
                    Err(_) => continue,
                };
                let e = match plan_min_curvature_path_cfg(&t, &cfg) {
                    Ok(e) => e,
                    Err(err) => {
                        println!("  lambda {lambda} scale {scale} seed {seed}: QP {err}");
                        continue;
                    }
                };
                let v = plan_velocity_profile(&t, &e, &params, &cfg).unwrap();
                let t_plan = profile_lap_time(&t, &TrajectoryProfiles { e_y: e, v_x: v });
                let e0 = vec![0.0; t.n_samples()];
                let v0 = plan_velocity_profile(&t, &e0, &params, &cfg).unwrap();
                let t_center = profile_lap_time(&t, &TrajectoryProfiles { e_y: e0, v_x: v0 });
                total += 1;
                if t_plan < t_center {
                    beats += 1;
                }
                let ratio = t_plan / t_center;
                worst = worst.max(ratio);
                gains.push(1.0 - ratio);
            }
            gains.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if gains.is_empty() { 0.0 } else { gains[gains.len() / 2] };
            println!(
                "lambda {lambda:>4} scale {scale}: beats {beats}/{total} median gain {:.2}% worst ratio {:.3}",
                med * 100.0, worst
            );
        }
    }
}
