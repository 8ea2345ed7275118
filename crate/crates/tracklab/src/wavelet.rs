//! Daubechies-4 discrete wavelet transform of sampled raceline profiles and
//! the low-dimensional parameter vector built from coarsest-level
//! approximation coefficients.
//!
//! The default boundary handling is periodic, which is the natural choice for
//! profiles defined on a closed track and makes the transform orthonormal at
//! every level (the wrapped filter rows stay orthonormal for any even
//! length). A zero-padding mode with expanded coefficient ranges is also
//! available; both reconstruct exactly.

#[derive(Debug, thiserror::Error)]
pub enum WaveletError {
    #[error("decomposition level {level} too deep for signal length {len}")]
    LevelTooDeep { len: usize, level: usize },
    #[error("cannot retain {requested} coefficients: only {available} available")]
    RetentionExceedsAvailable { requested: usize, available: usize },
    #[error("theta layout mismatch: expected ({expected_ey}, {expected_vx}), got ({got_ey}, {got_vx})")]
    LayoutMismatch { expected_ey: usize, expected_vx: usize, got_ey: usize, got_vx: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

// Daubechies-4 (8-tap, four vanishing moments) scaling filter in the
// classical tabulation order (Daubechies, "Ten Lectures on Wavelets",
// Table 6.1), recomputed by exact spectral factorization and rounded to f64;
// taps sum to sqrt(2).
pub const DB4_LO: [f64; 8] = [
    0.2303778133088965,
    0.7148465705529157,
    0.6308807679298589,
    -0.027983769416859854,
    -0.18703481171909309,
    0.030841381835560764,
    0.0328830116668852,
    -0.010597401785069032,
];

/// Matching highpass filter, g[i] = (-1)^i h[7-i].
pub const DB4_HI: [f64; 8] = [
    -0.010597401785069032,
    -0.0328830116668852,
    0.030841381835560764,
    0.18703481171909309,
    -0.027983769416859854,
    -0.6308807679298589,
    0.7148465705529157,
    -0.2303778133088965,
];

const FILTER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BoundaryMode {
    /// Circular wrap; orthonormal, coefficient count halves per level.
    Periodic,
    /// Zero extension with expanded coefficient ranges per level.
    ZeroPad,
}

/// Multi-level wavelet decomposition. `details[0]` is the finest level.
#[derive(Debug, Clone)]
pub struct WaveletDecomposition {
    pub approximation: Vec<f64>,
    pub details: Vec<Vec<f64>>,
    pub level: usize,
    pub boundary_mode: BoundaryMode,
    pub original_length: usize,
}

fn analysis_periodic(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    debug_assert!(n % 2 == 0);
    let half = n / 2;
    let mut approx = vec![0.0; half];
    let mut detail = vec![0.0; half];
    for k in 0..half {
        let mut a = 0.0;
        let mut d = 0.0;
        for m in 0..FILTER_LEN {
            let idx = (2 * k + m) % n;
            a += DB4_LO[m] * x[idx];
            d += DB4_HI[m] * x[idx];
        }
        approx[k] = a;
        detail[k] = d;
    }
    (approx, detail)
}

fn synthesis_periodic(approx: &[f64], detail: &[f64]) -> Vec<f64> {
    let half = approx.len();
    let n = 2 * half;
    let mut x = vec![0.0; n];
    for k in 0..half {
        for m in 0..FILTER_LEN {
            let idx = (2 * k + m) % n;
            x[idx] += DB4_LO[m] * approx[k] + DB4_HI[m] * detail[k];
        }
    }
    x
}

// Zero-padding analysis keeps every coefficient whose filter support overlaps
// the signal: indices k in [-(F/2 - 1), floor((n-1)/2)], stored shifted.
fn analysis_zeropad(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as isize;
    let k_min: isize = -(FILTER_LEN as isize / 2 - 1);
    let k_max: isize = (n - 1).div_euclid(2);
    let len = (k_max - k_min + 1) as usize;
    let mut approx = vec![0.0; len];
    let mut detail = vec![0.0; len];
    for (out, k) in (k_min..=k_max).enumerate() {
        let mut a = 0.0;
        let mut d = 0.0;
        for m in 0..FILTER_LEN {
            let idx = 2 * k + m as isize;
            if idx >= 0 && idx < n {
                a += DB4_LO[m] * x[idx as usize];
                d += DB4_HI[m] * x[idx as usize];
            }
        }
        approx[out] = a;
        detail[out] = d;
    }
    (approx, detail)
}

fn synthesis_zeropad(approx: &[f64], detail: &[f64], n: usize) -> Vec<f64> {
    let k_min: isize = -(FILTER_LEN as isize / 2 - 1);
    let mut x = vec![0.0; n];
    for (idx, (&a, &d)) in approx.iter().zip(detail.iter()).enumerate() {
        let k = k_min + idx as isize;
        for m in 0..FILTER_LEN {
            let i = 2 * k + m as isize;
            if i >= 0 && (i as usize) < n {
                x[i as usize] += DB4_LO[m] * a + DB4_HI[m] * d;
            }
        }
    }
    x
}

/// Multi-level analysis: cascade of filter + dyadic downsampling on the
/// approximation branch.
pub fn dwt(
    signal: &[f64],
    level: usize,
    boundary_mode: BoundaryMode,
) -> Result<WaveletDecomposition, WaveletError> {
    if level == 0 {
        return Err(WaveletError::LevelTooDeep { len: signal.len(), level });
    }
    let mut details: Vec<Vec<f64>> = Vec::with_capacity(level);
    let mut current = signal.to_vec();
    for _ in 0..level {
        match boundary_mode {
            BoundaryMode::Periodic => {
                if current.len() < 2 || current.len() % 2 != 0 {
                    return Err(WaveletError::LevelTooDeep { len: signal.len(), level });
                }
                let (a, d) = analysis_periodic(&current);
                details.push(d);
                current = a;
            }
            BoundaryMode::ZeroPad => {
                if current.len() < 2 {
                    return Err(WaveletError::LevelTooDeep { len: signal.len(), level });
                }
                let (a, d) = analysis_zeropad(&current);
                details.push(d);
                current = a;
            }
        }
    }
    Ok(WaveletDecomposition {
        approximation: current,
        details,
        level,
        boundary_mode,
        original_length: signal.len(),
    })
}

/// Exact inverse of [`dwt`] under the same boundary mode.
pub fn idwt(decomp: &WaveletDecomposition) -> Result<Vec<f64>, WaveletError> {
    let mut lengths = Vec::with_capacity(decomp.level + 1);
    lengths.push(decomp.original_length);
    for l in 0..decomp.level {
        let prev = lengths[l];
        let next = match decomp.boundary_mode {
            BoundaryMode::Periodic => {
                if prev % 2 != 0 {
                    return Err(WaveletError::ShapeMismatch(format!(
                        "odd length {prev} at level {l} in periodic mode"
                    )));
                }
                prev / 2
            }
            BoundaryMode::ZeroPad => (prev - 1) / 2 + FILTER_LEN / 2,
        };
        lengths.push(next);
    }
    if decomp.approximation.len() != lengths[decomp.level] {
        return Err(WaveletError::ShapeMismatch(format!(
            "approximation length {} != expected {}",
            decomp.approximation.len(),
            lengths[decomp.level]
        )));
    }
    let mut current = decomp.approximation.clone();
    for l in (0..decomp.level).rev() {
        let d = &decomp.details[l];
        if d.len() != lengths[l + 1] {
            return Err(WaveletError::ShapeMismatch(format!(
                "detail length {} at level {} != expected {}",
                d.len(),
                l,
                lengths[l + 1]
            )));
        }
        current = match decomp.boundary_mode {
            BoundaryMode::Periodic => synthesis_periodic(&current, d),
            BoundaryMode::ZeroPad => synthesis_zeropad(&current, d, lengths[l]),
        };
    }
    Ok(current)
}

// ---------------------------------------------------------------------------
// Trajectory parameter vector
// ---------------------------------------------------------------------------

/// Lateral-offset and speed profiles sampled at the track's arc-length grid
/// (one period, no duplicate endpoint).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryProfiles {
    pub e_y: Vec<f64>,
    pub v_x: Vec<f64>,
}

impl TrajectoryProfiles {
    pub fn len(&self) -> usize {
        self.e_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_y.is_empty()
    }
}

/// Retained coarsest-level approximation coefficients of both profiles,
/// concatenated: the optimization variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub values: Vec<f64>,
    pub n_ey: usize,
    pub n_vx: usize,
}

impl ThetaVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ey_part(&self) -> &[f64] {
        &self.values[..self.n_ey]
    }

    pub fn vx_part(&self) -> &[f64] {
        &self.values[self.n_ey..]
    }
}

/// Everything held fixed while theta varies: the full decompositions of the
/// profiles the encoding started from (details and non-retained approximation
/// coefficients), plus the retention layout.
#[derive(Debug, Clone)]
pub struct FrozenContext {
    pub decomposition_ey: WaveletDecomposition,
    pub decomposition_vx: WaveletDecomposition,
    pub n_ey: usize,
    pub n_vx: usize,
}

impl FrozenContext {
    pub fn n_samples(&self) -> usize {
        self.decomposition_ey.original_length
    }
}

/// Decompose both profiles and select the first `n_retain_*` coarsest-level
/// approximation coefficients as the parameter vector.
pub fn encode_theta(
    profiles: &TrajectoryProfiles,
    level: usize,
    n_retain_ey: usize,
    n_retain_vx: usize,
    boundary_mode: BoundaryMode,
) -> Result<(ThetaVector, FrozenContext), WaveletError> {
    if profiles.e_y.len() != profiles.v_x.len() {
        return Err(WaveletError::ShapeMismatch("profile lengths differ".into()));
    }
    let dec_ey = dwt(&profiles.e_y, level, boundary_mode)?;
    let dec_vx = dwt(&profiles.v_x, level, boundary_mode)?;
    let avail = dec_ey.approximation.len();
    if n_retain_ey > avail {
        return Err(WaveletError::RetentionExceedsAvailable { requested: n_retain_ey, available: avail });
    }
    if n_retain_vx > dec_vx.approximation.len() {
        return Err(WaveletError::RetentionExceedsAvailable {
            requested: n_retain_vx,
            available: dec_vx.approximation.len(),
        });
    }
    let mut values = Vec::with_capacity(n_retain_ey + n_retain_vx);
    values.extend_from_slice(&dec_ey.approximation[..n_retain_ey]);
    values.extend_from_slice(&dec_vx.approximation[..n_retain_vx]);
    let theta = ThetaVector { values, n_ey: n_retain_ey, n_vx: n_retain_vx };
    let frozen = FrozenContext {
        decomposition_ey: dec_ey,
        decomposition_vx: dec_vx,
        n_ey: n_retain_ey,
        n_vx: n_retain_vx,
    };
    Ok((theta, frozen))
}

/// Reconstruct profiles from theta: overwrite the retained coefficients in a
/// copy of the frozen decompositions and invert.
pub fn decode_theta(
    theta: &ThetaVector,
    frozen: &FrozenContext,
) -> Result<TrajectoryProfiles, WaveletError> {
    if theta.n_ey != frozen.n_ey || theta.n_vx != frozen.n_vx {
        return Err(WaveletError::LayoutMismatch {
            expected_ey: frozen.n_ey,
            expected_vx: frozen.n_vx,
            got_ey: theta.n_ey,
            got_vx: theta.n_vx,
        });
    }
    if theta.values.len() != theta.n_ey + theta.n_vx {
        return Err(WaveletError::ShapeMismatch(format!(
            "theta length {} != n_ey + n_vx = {}",
            theta.values.len(),
            theta.n_ey + theta.n_vx
        )));
    }
    let mut dec_ey = frozen.decomposition_ey.clone();
    let mut dec_vx = frozen.decomposition_vx.clone();
    dec_ey.approximation[..theta.n_ey].copy_from_slice(theta.ey_part());
    dec_vx.approximation[..theta.n_vx].copy_from_slice(theta.vx_part());
    let e_y = idwt(&dec_ey)?;
    let v_x = idwt(&dec_vx)?;
    Ok(TrajectoryProfiles { e_y, v_x })
}
