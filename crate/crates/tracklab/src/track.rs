//! Closed race tracks: centerline geometry, curvature, track width, random
//! generation and the plain-text track file format.
//!
//! A [`Track`] stores `n_samples + 1` uniformly spaced arc-length samples of a
//! closed curve (the last sample repeats the first), the analytic curvature
//! `kappa(s)` at each sample, and the lateral half-width. Everything is
//! immutable after construction and safe to share across threads.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TrackError {
    #[error("track generation failed after {attempts} attempts (seed {seed})")]
    GenerationFailed { seed: u64, attempts: usize },
    #[error("Frenet singularity: 1 - kappa(s)*e_y <= 0 at s={s:.4}, e_y={e_y:.4}")]
    FrenetSingularity { s: f64, e_y: f64 },
    #[error("invalid track data: {0}")]
    InvalidData(String),
    #[error("track file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Periodic cubic splines
// ---------------------------------------------------------------------------

/// Periodic natural cubic spline through `(t_i, y_i)` with period `T`.
///
/// Knots must be strictly increasing with `t_0 = 0` and `t_last < T`; the
/// spline closes smoothly (continuous value, first and second derivative)
/// across the wrap.
#[derive(Debug, Clone)]
pub struct PeriodicCubicSpline {
    knots: Vec<f64>,   // length m+1, last = period
    values: Vec<f64>,  // length m+1, last = first
    second: Vec<f64>,  // second derivatives at knots, length m+1
    period: f64,
}

impl PeriodicCubicSpline {
    pub fn new(knots: &[f64], values: &[f64], period: f64) -> Self {
        let m = knots.len();
        assert!(m >= 3, "need at least 3 knots for a periodic spline");
        assert_eq!(knots.len(), values.len());
        assert!(knots[0] == 0.0 && *knots.last().unwrap() < period);

        // h_i = t_{i+1} - t_i with the wrap segment closing the period
        let h: Vec<f64> = (0..m)
            .map(|i| if i + 1 < m { knots[i + 1] - knots[i] } else { period - knots[i] })
            .collect();

        // cyclic tridiagonal system for the second derivatives
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for i in 0..m {
            let im1 = (i + m - 1) % m;
            let ip1 = (i + 1) % m;
            a[(i, im1)] += h[im1] / 6.0;
            a[(i, i)] += (h[im1] + h[i]) / 3.0;
            a[(i, ip1)] += h[i] / 6.0;
            let di = (values[ip1] - values[i]) / h[i] - (values[i] - values[im1]) / h[im1];
            rhs[i] = di;
        }
        let m_vec = a.lu().solve(&rhs).expect("periodic spline system is nonsingular");

        let mut knots_ext = knots.to_vec();
        knots_ext.push(period);
        let mut values_ext = values.to_vec();
        values_ext.push(values[0]);
        let mut second: Vec<f64> = m_vec.iter().copied().collect();
        second.push(second[0]);

        PeriodicCubicSpline { knots: knots_ext, values: values_ext, second, period }
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    fn segment(&self, t: f64) -> (usize, f64) {
        let tw = t.rem_euclid(self.period);
        // binary search for the segment containing tw
        let mut lo = 0usize;
        let mut hi = self.knots.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= tw {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo, tw)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let (i, tw) = self.segment(t);
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let a = (t1 - tw) / h;
        let b = (tw - t0) / h;
        a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0
    }

    pub fn deriv1(&self, t: f64) -> f64 {
        let (i, tw) = self.segment(t);
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let a = (t1 - tw) / h;
        let b = (tw - t0) / h;
        (y1 - y0) / h + ((3.0 * b * b - 1.0) * m1 - (3.0 * a * a - 1.0) * m0) * h / 6.0
    }

    pub fn deriv2(&self, t: f64) -> f64 {
        let (i, tw) = self.segment(t);
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let a = (t1 - tw) / h;
        let b = (tw - t0) / h;
        a * self.second[i] + b * self.second[i + 1]
    }
}

/// Closed planar curve given by two periodic cubic splines sharing knots.
#[derive(Debug, Clone)]
pub struct ParametricSpline2 {
    pub x: PeriodicCubicSpline,
    pub y: PeriodicCubicSpline,
}

// Gauss-Legendre nodes/weights on [-1, 1], 16 points.
const GL16_NODES: [f64; 16] = [
    -0.9894009349916499,
    -0.9445750230732326,
    -0.8656312023878318,
    -0.7554044083550030,
    -0.6178762444026438,
    -0.4580167776572274,
    -0.2816035507792589,
    -0.0950125098376374,
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.7554044083550030,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL16_WEIGHTS: [f64; 16] = [
    0.0271524594117541,
    0.0622535239386479,
    0.0951585116824928,
    0.1246289712555339,
    0.1495959888165767,
    0.1691565193950025,
    0.1826034150449236,
    0.1894506104550685,
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

impl ParametricSpline2 {
    pub fn new(knots: &[f64], xs: &[f64], ys: &[f64], period: f64) -> Self {
        ParametricSpline2 {
            x: PeriodicCubicSpline::new(knots, xs, period),
            y: PeriodicCubicSpline::new(knots, ys, period),
        }
    }

    pub fn from_points(points: &[[f64; 2]]) -> Self {
        // chord-length parameterization with a closing chord
        let m = points.len();
        let mut knots = Vec::with_capacity(m);
        knots.push(0.0);
        for i in 1..m {
            let d = ((points[i][0] - points[i - 1][0]).powi(2)
                + (points[i][1] - points[i - 1][1]).powi(2))
            .sqrt();
            knots.push(knots[i - 1] + d);
        }
        let closing = ((points[0][0] - points[m - 1][0]).powi(2)
            + (points[0][1] - points[m - 1][1]).powi(2))
        .sqrt();
        let period = knots[m - 1] + closing;
        let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
        Self::new(&knots, &xs, &ys, period)
    }

    pub fn period(&self) -> f64 {
        self.x.period()
    }

    pub fn point(&self, t: f64) -> [f64; 2] {
        [self.x.eval(t), self.y.eval(t)]
    }

    pub fn velocity(&self, t: f64) -> [f64; 2] {
        [self.x.deriv1(t), self.y.deriv1(t)]
    }

    pub fn speed(&self, t: f64) -> f64 {
        let v = self.velocity(t);
        (v[0] * v[0] + v[1] * v[1]).sqrt()
    }

    /// Signed curvature of the parametric curve at t.
    pub fn curvature(&self, t: f64) -> f64 {
        let (dx, dy) = (self.x.deriv1(t), self.y.deriv1(t));
        let (ddx, ddy) = (self.x.deriv2(t), self.y.deriv2(t));
        let sp2 = dx * dx + dy * dy;
        (dx * ddy - dy * ddx) / sp2.powf(1.5)
    }

    /// Arc length over `[a, b]` (b >= a, may span the wrap) by composite
    /// 16-point Gauss-Legendre quadrature split at knot boundaries.
    pub fn arc_length_between(&self, a: f64, b: f64) -> f64 {
        assert!(b >= a);
        let mut total = 0.0;
        let knots = &self.x.knots;
        let period = self.period();
        let mut lo = a;
        while lo < b - 1e-15 {
            // next knot boundary strictly above lo (in unwrapped coordinates)
            let lw = lo.rem_euclid(period);
            let cycle = lo - lw;
            let mut hi_seg = b;
            for &k in knots.iter() {
                let cand = cycle + k;
                if cand > lo + 1e-13 {
                    hi_seg = hi_seg.min(cand);
                    break;
                }
            }
            if hi_seg <= lo + 1e-15 {
                hi_seg = (lo + (b - lo).min(period / knots.len() as f64)).min(b);
            }
            let half = 0.5 * (hi_seg - lo);
            let mid = 0.5 * (hi_seg + lo);
            let mut seg = 0.0;
            for j in 0..16 {
                seg += GL16_WEIGHTS[j] * self.speed(mid + half * GL16_NODES[j]);
            }
            total += seg * half;
            lo = hi_seg;
        }
        total
    }

    pub fn total_arc_length(&self) -> f64 {
        self.arc_length_between(0.0, self.period())
    }

    /// Parameter values `t_k` such that the arc length from 0 to `t_k` equals
    /// `k * L / n`, plus the total length `L`. Newton iteration with a
    /// bisection fallback, accurate to ~1e-12 relative.
    pub fn uniform_arc_length_params(&self, n: usize) -> (Vec<f64>, f64) {
        let period = self.period();
        let total = self.total_arc_length();
        let mut ts = Vec::with_capacity(n + 1);
        ts.push(0.0);
        let mut t_lo = 0.0f64;
        let mut s_lo = 0.0f64;
        for k in 1..n {
            let target = total * (k as f64) / (n as f64);
            // bracket: advance t_hi until arc length exceeds target
            let mut t_hi = t_lo;
            let mut s_hi = s_lo;
            let step = period / (n as f64);
            while s_hi < target {
                let t_next = t_hi + step;
                s_hi += self.arc_length_between(t_hi, t_next);
                t_hi = t_next;
            }
            let mut a = t_lo;
            let mut fa = s_lo - target;
            let mut b = t_hi;
            let mut t = 0.5 * (a + b);
            for _ in 0..80 {
                let s_t = s_lo + self.arc_length_between(t_lo, t);
                let f = s_t - target;
                if f.abs() < 1e-12 * total {
                    break;
                }
                if f < 0.0 {
                    a = t;
                    fa = f;
                } else {
                    b = t;
                }
                let sp = self.speed(t);
                let newton = t - f / sp;
                t = if newton > a && newton < b { newton } else { 0.5 * (a + b) };
            }
            let _ = fa;
            s_lo = s_lo + self.arc_length_between(t_lo, t);
            t_lo = t;
            ts.push(t);
        }
        (ts, total)
    }
}

// ---------------------------------------------------------------------------
// Track
// ---------------------------------------------------------------------------

/// Closed track sampled at `n_samples` uniform arc-length steps.
#[derive(Debug, Clone)]
pub struct Track {
    centerline: Vec<[f64; 2]>, // n_samples + 1 points, last == first
    arc_lengths: Vec<f64>,     // k * ds
    curvature: Vec<f64>,
    half_width: Vec<f64>,
    heading: Vec<f64>, // unwrapped tangent angle; heading[n] = heading[0] + 2*pi
    total_length: f64,
    n_samples: usize,
}

impl Track {
    /// Assemble a track from one period of samples (no duplicate endpoint).
    /// Heading is taken as given (unwrapped); closure is validated.
    fn from_raw(
        mut centerline: Vec<[f64; 2]>,
        mut curvature: Vec<f64>,
        mut half_width: Vec<f64>,
        mut heading: Vec<f64>,
        total_length: f64,
    ) -> Result<Self, TrackError> {
        let n = centerline.len();
        if n < 8 {
            return Err(TrackError::InvalidData(format!("too few samples: {n}")));
        }
        if half_width.iter().any(|w| *w <= 0.0) {
            return Err(TrackError::InvalidData("non-positive half width".into()));
        }
        centerline.push(centerline[0]);
        curvature.push(curvature[0]);
        half_width.push(half_width[0]);
        heading.push(heading[0] + 2.0 * std::f64::consts::PI);
        let ds = total_length / n as f64;
        let arc_lengths = (0..=n).map(|k| k as f64 * ds).collect();
        Ok(Track {
            centerline,
            arc_lengths,
            curvature,
            half_width,
            heading,
            total_length,
            n_samples: n,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn delta_s(&self) -> f64 {
        self.total_length / self.n_samples as f64
    }

    /// Sampled arc lengths including the duplicate endpoint.
    pub fn arc_lengths(&self) -> &[f64] {
        &self.arc_lengths
    }

    pub fn centerline(&self) -> &[[f64; 2]] {
        &self.centerline
    }

    pub fn curvature_samples(&self) -> &[f64] {
        &self.curvature
    }

    pub fn half_width_samples(&self) -> &[f64] {
        &self.half_width
    }

    pub fn wrap_s(&self, s: f64) -> f64 {
        s.rem_euclid(self.total_length)
    }

    fn interp(&self, values: &[f64], s: f64) -> f64 {
        let sw = self.wrap_s(s);
        let ds = self.delta_s();
        let idx = (sw / ds).floor() as usize;
        let idx = idx.min(self.n_samples - 1);
        let frac = (sw - self.arc_lengths[idx]) / ds;
        values[idx] * (1.0 - frac) + values[idx + 1] * frac
    }

    /// Periodic linear interpolation of the stored curvature.
    pub fn curvature_at(&self, s: f64) -> f64 {
        self.interp(&self.curvature, s)
    }

    pub fn half_width_at(&self, s: f64) -> f64 {
        self.interp(&self.half_width, s)
    }

    /// Tangent angle (radians, unwrapped within one lap).
    pub fn heading_at(&self, s: f64) -> f64 {
        self.interp(&self.heading, s)
    }

    /// Centerline position at arc length s (linear between samples).
    pub fn position_at(&self, s: f64) -> [f64; 2] {
        let sw = self.wrap_s(s);
        let ds = self.delta_s();
        let idx = ((sw / ds).floor() as usize).min(self.n_samples - 1);
        let frac = (sw - self.arc_lengths[idx]) / ds;
        let a = self.centerline[idx];
        let b = self.centerline[idx + 1];
        [a[0] * (1.0 - frac) + b[0] * frac, a[1] * (1.0 - frac) + b[1] * frac]
    }

    /// Unit normal (left of travel direction) at arc length s.
    pub fn normal_at(&self, s: f64) -> [f64; 2] {
        let psi = self.heading_at(s);
        [-psi.sin(), psi.cos()]
    }

    /// Map Frenet coordinates `(s, e_y)` to Cartesian. `e_y > 0` is to the
    /// left of the travel direction (the inside of a left-hand corner).
    pub fn frenet_to_cartesian(&self, s: f64, e_y: f64) -> Result<[f64; 2], TrackError> {
        let kappa = self.curvature_at(s);
        if 1.0 - kappa * e_y <= 0.0 {
            return Err(TrackError::FrenetSingularity { s: self.wrap_s(s), e_y });
        }
        let p = self.position_at(s);
        let n = self.normal_at(s);
        Ok([p[0] + e_y * n[0], p[1] + e_y * n[1]])
    }

    /// Total turning: periodic Riemann sum of the stored curvature.
    pub fn turning_integral(&self) -> f64 {
        let ds = self.delta_s();
        self.curvature[..self.n_samples].iter().sum::<f64>() * ds
    }

    /// Resample to a different number of uniform arc-length samples via a
    /// periodic cubic spline through the current centerline.
    pub fn resample(&self, n_samples: usize) -> Result<Track, TrackError> {
        let pts = &self.centerline[..self.n_samples];
        let spline = ParametricSpline2::from_points(pts);
        let widths: Vec<f64> = (0..n_samples)
            .map(|k| self.half_width_at(k as f64 * self.total_length / n_samples as f64))
            .collect();
        track_from_spline(&spline, n_samples, &widths)
    }

    // -- analytic constructors used by tests and examples ------------------

    /// Counterclockwise circle of the given radius centered at the origin.
    pub fn circle(radius: f64, n_samples: usize, half_width: f64) -> Track {
        let length = 2.0 * std::f64::consts::PI * radius;
        let mut pts = Vec::with_capacity(n_samples);
        let mut heading = Vec::with_capacity(n_samples);
        for k in 0..n_samples {
            let s = length * k as f64 / n_samples as f64;
            let phi = s / radius;
            pts.push([radius * phi.cos(), radius * phi.sin()]);
            heading.push(phi + std::f64::consts::FRAC_PI_2);
        }
        let curv = vec![1.0 / radius; n_samples];
        let widths = vec![half_width; n_samples];
        Track::from_raw(pts, curv, widths, heading, length).expect("valid circle")
    }

    /// Stadium: two straights of length `straight` joined by semicircles of
    /// radius `radius`. Sample-aligned piece boundaries keep the stored
    /// curvature exact when `n_samples` divides evenly into the pieces.
    pub fn stadium(straight: f64, radius: f64, n_samples: usize, half_width: f64) -> Track {
        use std::f64::consts::PI;
        let arc = PI * radius;
        let length = 2.0 * straight + 2.0 * arc;
        let mut pts = Vec::with_capacity(n_samples);
        let mut curv = Vec::with_capacity(n_samples);
        let mut heading = Vec::with_capacity(n_samples);
        let b1 = straight; // end of bottom straight
        let b2 = straight + arc; // end of right arc
        let b3 = 2.0 * straight + arc; // end of top straight
        let eps = 1e-12 * length;
        for k in 0..n_samples {
            let s = length * k as f64 / n_samples as f64;
            // piece boundaries carry the midpoint curvature so the periodic
            // Riemann turning sum stays exact when boundaries sit on samples
            let (p, psi, kap) = if s <= eps {
                ([-0.5 * straight, -radius], 0.0, 0.5 / radius)
            } else if s < b1 - eps {
                ([-0.5 * straight + s, -radius], 0.0, 0.0)
            } else if (s - b1).abs() <= eps {
                ([0.5 * straight, -radius], 0.0, 0.5 / radius)
            } else if s < b2 - eps {
                let phi = (s - b1) / radius - std::f64::consts::FRAC_PI_2;
                (
                    [0.5 * straight + radius * phi.cos(), radius * phi.sin()],
                    phi + std::f64::consts::FRAC_PI_2,
                    1.0 / radius,
                )
            } else if (s - b2).abs() <= eps {
                ([0.5 * straight, radius], PI, 0.5 / radius)
            } else if s < b3 - eps {
                ([0.5 * straight - (s - b2), radius], PI, 0.0)
            } else if (s - b3).abs() <= eps {
                ([-0.5 * straight, radius], PI, 0.5 / radius)
            } else {
                let phi = (s - b3) / radius + std::f64::consts::FRAC_PI_2;
                (
                    [-0.5 * straight + radius * phi.cos(), radius * phi.sin()],
                    phi + std::f64::consts::FRAC_PI_2,
                    1.0 / radius,
                )
            };
            pts.push(p);
            curv.push(kap);
            heading.push(psi);
        }
        let widths = vec![half_width; n_samples];
        Track::from_raw(pts, curv, widths, heading, length).expect("valid stadium")
    }

    /// The reference track shipped with the crate (fixed generator seed).
    pub fn reference() -> Track {
        generate_random_track(11, 12, 9.0).expect("reference track generates")
    }

    // -- file format --------------------------------------------------------

    /// Write the track table: a header describing the columns followed by
    /// `n_samples + 1` rows of `s x y kappa w_half`.
    pub fn save(&self, path: &Path) -> Result<(), TrackError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# tracklab track v1")?;
        writeln!(
            f,
            "# total_length={:.17e} n_samples={}",
            self.total_length, self.n_samples
        )?;
        writeln!(f, "# columns: s x y kappa w_half")?;
        for k in 0..=self.n_samples {
            writeln!(
                f,
                "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
                self.arc_lengths[k],
                self.centerline[k][0],
                self.centerline[k][1],
                self.curvature[k],
                self.half_width[k]
            )?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Track, TrackError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut total_length = None;
        let mut rows: Vec<[f64; 5]> = Vec::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('#') {
                if let Some(pos) = rest.find("total_length=") {
                    let tail = &rest[pos + "total_length=".len()..];
                    let val: String = tail.chars().take_while(|c| !c.is_whitespace()).collect();
                    total_length = Some(val.parse::<f64>().map_err(|e| TrackError::Parse {
                        line: lineno + 1,
                        msg: format!("bad total_length: {e}"),
                    })?);
                }
                continue;
            }
            let cols: Vec<f64> = trimmed
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| TrackError::Parse { line: lineno + 1, msg: e.to_string() })?;
            if cols.len() != 5 {
                return Err(TrackError::Parse {
                    line: lineno + 1,
                    msg: format!("expected 5 columns, got {}", cols.len()),
                });
            }
            rows.push([cols[0], cols[1], cols[2], cols[3], cols[4]]);
        }
        let total_length = total_length
            .ok_or_else(|| TrackError::InvalidData("missing total_length header".into()))?;
        if rows.len() < 9 {
            return Err(TrackError::InvalidData("too few rows".into()));
        }
        let n = rows.len() - 1;
        let first = rows[0];
        let last = rows[n];
        let close = ((first[1] - last[1]).powi(2) + (first[2] - last[2]).powi(2)).sqrt();
        if close > 1e-6 {
            return Err(TrackError::InvalidData(format!(
                "track not closed: endpoint gap {close:.2e} m"
            )));
        }
        let pts: Vec<[f64; 2]> = rows[..n].iter().map(|r| [r[1], r[2]]).collect();
        let curv: Vec<f64> = rows[..n].iter().map(|r| r[3]).collect();
        let widths: Vec<f64> = rows[..n].iter().map(|r| r[4]).collect();
        // headings recomputed from the points (periodic central differences)
        let mut heading = Vec::with_capacity(n);
        let mut prev = 0.0f64;
        for k in 0..n {
            let a = pts[(k + n - 1) % n];
            let b = pts[(k + 1) % n];
            let raw = (b[1] - a[1]).atan2(b[0] - a[0]);
            let unwrapped = if k == 0 {
                raw
            } else {
                let mut v = raw;
                while v < prev - std::f64::consts::PI {
                    v += 2.0 * std::f64::consts::PI;
                }
                while v > prev + std::f64::consts::PI {
                    v -= 2.0 * std::f64::consts::PI;
                }
                v
            };
            prev = unwrapped;
            heading.push(unwrapped);
        }
        Track::from_raw(pts, curv, widths, heading, total_length)
    }
}

// ---------------------------------------------------------------------------
// Random generation
// ---------------------------------------------------------------------------

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull (Andrew monotone chain), returned counterclockwise.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let n = pts.len();
    if n < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * n);
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// True if the closed polyline (implicitly closing last -> first) is simple.
pub fn polyline_is_simple(pts: &[[f64; 2]]) -> bool {
    let n = pts.len();
    let seg = |i: usize| (pts[i], pts[(i + 1) % n]);
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue; // adjacent through the wrap
            }
            let (a1, a2) = seg(i);
            let (b1, b2) = seg(j);
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

/// Build a [`Track`] by uniform arc-length resampling of a closed spline,
/// with per-sample half widths.
pub fn track_from_spline(
    spline: &ParametricSpline2,
    n_samples: usize,
    half_widths: &[f64],
) -> Result<Track, TrackError> {
    let (ts, total) = spline.uniform_arc_length_params(n_samples);
    let mut pts = Vec::with_capacity(n_samples);
    let mut curv = Vec::with_capacity(n_samples);
    let mut heading = Vec::with_capacity(n_samples);
    let mut prev = 0.0f64;
    for (k, &t) in ts.iter().enumerate() {
        pts.push(spline.point(t));
        curv.push(spline.curvature(t));
        let v = spline.velocity(t);
        let raw = v[1].atan2(v[0]);
        let unwrapped = if k == 0 {
            raw
        } else {
            let mut val = raw;
            while val < prev - std::f64::consts::PI {
                val += 2.0 * std::f64::consts::PI;
            }
            while val > prev + std::f64::consts::PI {
                val -= 2.0 * std::f64::consts::PI;
            }
            val
        };
        prev = unwrapped;
        heading.push(unwrapped);
    }
    Track::from_raw(pts, curv, half_widths.to_vec(), heading, total)
}

/// Minimum Euclidean clearance between samples at least `window` indices
/// apart along the lap (both directions).
fn min_far_clearance(pts: &[[f64; 2]], window: usize) -> f64 {
    let n = pts.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + window)..n {
            if n - (j - i) < window {
                continue;
            }
            let d = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Generate a random closed track: random control points, convex hull,
/// radial perturbation about the centroid with inward-pulled edge midpoints
/// (giving racing-like alternating curvature), periodic cubic spline,
/// uniform arc-length resampling. Deterministic per seed.
pub fn generate_random_track(seed: u64, n_control: usize, scale: f64) -> Result<Track, TrackError> {
    generate_random_track_cfg(seed, n_control, scale, 256, 0.4)
}

pub fn generate_random_track_cfg(
    seed: u64,
    n_control: usize,
    scale: f64,
    n_samples: usize,
    half_width: f64,
) -> Result<Track, TrackError> {
    assert!(n_control >= 6, "need at least 6 control points");
    assert!(scale > 0.0, "scale must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_attempts = 100;
    let kappa_cap = 0.9 / half_width;

    for attempt in 0..max_attempts {
        let raw: Vec<[f64; 2]> = (0..n_control)
            .map(|_| [rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)])
            .collect();
        let hull = convex_hull(&raw);
        if hull.len() < 5 {
            continue;
        }
        let cx = hull.iter().map(|p| p[0]).sum::<f64>() / hull.len() as f64;
        let cy = hull.iter().map(|p| p[1]).sum::<f64>() / hull.len() as f64;
        // merge hull vertices that sit too close to keep the spline tame
        let d_merge = 0.45 * scale;
        let mut verts: Vec<[f64; 2]> = Vec::new();
        for &p in &hull {
            if let Some(last) = verts.last() {
                let d = ((p[0] - last[0]).powi(2) + (p[1] - last[1]).powi(2)).sqrt();
                if d < d_merge {
                    continue;
                }
            }
            verts.push(p);
        }
        if verts.len() >= 2 {
            let first = verts[0];
            let last = *verts.last().unwrap();
            let d = ((first[0] - last[0]).powi(2) + (first[1] - last[1]).powi(2)).sqrt();
            if d < d_merge {
                verts.pop();
            }
        }
        if verts.len() < 5 {
            continue;
        }
        // hull vertices become corner apexes; midpoints of long edges are
        // pulled toward the centroid to carve concave sections between them
        let m = verts.len();
        let mut control: Vec<[f64; 2]> = Vec::with_capacity(2 * m);
        for i in 0..m {
            let p = verts[i];
            let q = verts[(i + 1) % m];
            let fp = rng.gen_range(0.94..1.12);
            control.push([cx + (p[0] - cx) * fp, cy + (p[1] - cy) * fp]);
            let edge = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
            if edge > 0.9 * scale {
                let mid = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
                let fm = rng.gen_range(0.55..0.9);
                control.push([cx + (mid[0] - cx) * fm, cy + (mid[1] - cy) * fm]);
            }
        }

        let spline = ParametricSpline2::from_points(&control);
        let widths = vec![half_width; n_samples];
        let track = match track_from_spline(&spline, n_samples, &widths) {
            Ok(t) => t,
            Err(_) => continue,
        };

        let max_kappa = track.curvature[..n_samples]
            .iter()
            .fold(0.0f64, |m, k| m.max(k.abs()));
        if max_kappa > kappa_cap {
            continue;
        }
        if !polyline_is_simple(&track.centerline[..n_samples]) {
            continue;
        }
        let window = (n_samples / 16).max(4);
        if min_far_clearance(&track.centerline[..n_samples], window) < 2.5 * half_width {
            continue;
        }
        let turning = track.turning_integral();
        if (turning - 2.0 * std::f64::consts::PI).abs() > 1e-3 {
            continue;
        }
        let _ = attempt;
        return Ok(track);
    }
    Err(TrackError::GenerationFailed { seed, attempts: max_attempts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn circle_track_basics() {
        let t = Track::circle(2.0, 128, 0.4);
        assert_relative_eq!(t.curvature_at(0.7), 0.5, epsilon = 1e-12);
        assert_relative_eq!(t.curvature_at(t.total_length() + 0.1), t.curvature_at(0.1), epsilon = 1e-12);
        assert_relative_eq!(t.turning_integral(), 2.0 * PI, epsilon = 1e-9);
        // concentric circle: e_y = 0.5 inward lands on the radius-1.5 circle
        let p = t.frenet_to_cartesian(0.0, 0.5).unwrap();
        assert_relative_eq!(p[0], 1.5, epsilon = 1e-12);
        assert_relative_eq!(p[1], 0.0, epsilon = 1e-12);
        // exact at samples, within the chord-interpolation error between them
        let q = t.frenet_to_cartesian(t.arc_lengths()[13], 0.5).unwrap();
        assert_relative_eq!((q[0] * q[0] + q[1] * q[1]).sqrt(), 1.5, epsilon = 1e-9);
        let m = t.frenet_to_cartesian(1.3, 0.5).unwrap();
        assert_relative_eq!((m[0] * m[0] + m[1] * m[1]).sqrt(), 1.5, epsilon = 1e-3);
    }

    #[test]
    fn frenet_singularity_detected() {
        let t = Track::circle(2.0, 128, 0.4);
        // kappa = 0.5: offset of 2.0 hits the curvature center
        let err = t.frenet_to_cartesian(0.0, 2.0).unwrap_err();
        match err {
            TrackError::FrenetSingularity { .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn stadium_straight_has_zero_curvature() {
        // commensurate pieces: straight = pi, radius = 1, so every boundary
        // is exactly on a sample and the Riemann turning sum is exact
        let t = Track::stadium(PI, 1.0, 256, 0.4);
        assert_relative_eq!(t.turning_integral(), 2.0 * PI, epsilon = 1e-9);
        // interior of the bottom straight
        assert_eq!(t.curvature_at(1.0), 0.0);
        assert_eq!(t.curvature_at(0.5), 0.0);
        // interior of the right arc
        assert_relative_eq!(t.curvature_at(PI + 1.5), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn generated_track_is_deterministic_and_closed() {
        let a = generate_random_track(7, 10, 8.0).unwrap();
        let b = generate_random_track(7, 10, 8.0).unwrap();
        assert_eq!(a.n_samples(), b.n_samples());
        assert_eq!(a.total_length().to_bits(), b.total_length().to_bits());
        for k in 0..=a.n_samples() {
            assert_eq!(a.centerline[k][0].to_bits(), b.centerline[k][0].to_bits());
            assert_eq!(a.centerline[k][1].to_bits(), b.centerline[k][1].to_bits());
            assert_eq!(a.curvature[k].to_bits(), b.curvature[k].to_bits());
        }
        // closure of the duplicate endpoint
        let n = a.n_samples();
        let gap = ((a.centerline[0][0] - a.centerline[n][0]).powi(2)
            + (a.centerline[0][1] - a.centerline[n][1]).powi(2))
        .sqrt();
        assert!(gap < 1e-6);
        // turning number of a simple CCW closed curve
        assert_relative_eq!(a.turning_integral(), 2.0 * PI, epsilon = 1e-3);
    }

    #[test]
    fn uniform_spacing_against_chord_oracle() {
        // independent oracle: Richardson-extrapolated chord sums between the
        // resampled parameter values must give L/N per interval
        let seed = 7u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<[f64; 2]> = (0..10)
            .map(|_| [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)])
            .collect();
        let hull = convex_hull(&raw);
        assert!(hull.len() >= 5);
        let cx = hull.iter().map(|p| p[0]).sum::<f64>() / hull.len() as f64;
        let cy = hull.iter().map(|p| p[1]).sum::<f64>() / hull.len() as f64;
        let control: Vec<[f64; 2]> = hull
            .iter()
            .map(|p| {
                let f = rng.gen_range(0.72..1.28);
                [cx + (p[0] - cx) * f, cy + (p[1] - cy) * f]
            })
            .collect();
        let spline = ParametricSpline2::from_points(&control);
        let n = 256;
        let (ts, total) = spline.uniform_arc_length_params(n);
        let target = total / n as f64;

        let chord_sum = |a: f64, b: f64, m: usize| -> f64 {
            let mut sum = 0.0;
            let mut prev = spline.point(a);
            for j in 1..=m {
                let t = a + (b - a) * j as f64 / m as f64;
                let p = spline.point(t);
                sum += ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
                prev = p;
            }
            sum
        };
        for k in 0..n {
            let a = ts[k];
            let b = if k + 1 < n { ts[k + 1] } else { spline.period() };
            let s1 = chord_sum(a, b, 64);
            let s2 = chord_sum(a, b, 128);
            let richardson = (4.0 * s2 - s1) / 3.0;
            assert!(
                (richardson - target).abs() <= 1e-9 * total,
                "interval {k}: {richardson} vs {target}"
            );
        }
    }

    #[test]
    fn cartesian_frenet_roundtrip_with_projection_oracle() {
        let t = generate_random_track(7, 10, 8.0).unwrap();
        // oracle: solve tangent . (p - c(s)) = 0 by scan + bisection, then
        // e = normal . (p - c(s)); the roundtrip must reproduce p
        let project = |p: [f64; 2], s_hint: f64| -> (f64, f64) {
            let g = |s: f64| {
                let c = t.position_at(s);
                let psi = t.heading_at(s);
                (p[0] - c[0]) * psi.cos() + (p[1] - c[1]) * psi.sin()
            };
            let mut lo = s_hint - t.delta_s();
            let mut hi = s_hint + t.delta_s();
            // expand until sign change
            while g(lo).signum() == g(hi).signum() {
                lo -= t.delta_s();
                hi += t.delta_s();
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(lo).signum() == g(mid).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let s = 0.5 * (lo + hi);
            let c = t.position_at(s);
            let n = t.normal_at(s);
            let e = (p[0] - c[0]) * n[0] + (p[1] - c[1]) * n[1];
            (s, e)
        };
        for k in (0..t.n_samples()).step_by(17) {
            let s = t.arc_lengths()[k] + 0.3 * t.delta_s();
            let e_y = 0.25;
            let p = t.frenet_to_cartesian(s, e_y).unwrap();
            let (s2, e2) = project(p, s);
            let p2 = t.frenet_to_cartesian(s2, e2).unwrap();
            assert!(
                ((p[0] - p2[0]).powi(2) + (p[1] - p2[1]).powi(2)).sqrt() < 1e-6,
                "roundtrip failed at k={k}"
            );
        }
    }

    #[test]
    fn boundaries_do_not_intersect() {
        for seed in [7u64, 21, 99] {
            let t = generate_random_track(seed, 10, 8.0).unwrap();
            let n = t.n_samples();
            let inner: Vec<[f64; 2]> = (0..n)
                .map(|k| t.frenet_to_cartesian(t.arc_lengths()[k], t.half_width_samples()[k]).unwrap())
                .collect();
            let outer: Vec<[f64; 2]> = (0..n)
                .map(|k| t.frenet_to_cartesian(t.arc_lengths()[k], -t.half_width_samples()[k]).unwrap())
                .collect();
            assert!(polyline_is_simple(&inner), "inner boundary self-intersects (seed {seed})");
            assert!(polyline_is_simple(&outer), "outer boundary self-intersects (seed {seed})");
        }
    }

    #[test]
    fn resample_roundtrip_keeps_curvature() {
        let t = generate_random_track(7, 10, 8.0).unwrap();
        let up = t.resample(512).unwrap();
        let back = up.resample(256).unwrap();
        let n = t.n_samples();
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..n {
            num += (t.curvature[k] - back.curvature[k]).powi(2);
            den += t.curvature[k].powi(2);
        }
        let rel_rms = (num / den).sqrt();
        assert!(rel_rms < 0.01, "curvature changed by {:.3}% RMS", rel_rms * 100.0);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.txt");
        let t = generate_random_track(7, 10, 8.0).unwrap();
        t.save(&path).unwrap();
        let loaded = Track::load(&path).unwrap();
        assert_eq!(loaded.n_samples(), t.n_samples());
        assert_relative_eq!(loaded.total_length(), t.total_length(), epsilon = 1e-12);
        for k in 0..=t.n_samples() {
            assert_relative_eq!(loaded.centerline[k][0], t.centerline[k][0], epsilon = 1e-12);
            assert_relative_eq!(loaded.curvature[k], t.curvature[k], epsilon = 1e-12);
        }
    }
}
