//! Gaussian-process regression with an ARD RBF kernel.
//!
//! One [`GpModel`] holds independent per-output GPs over a shared input
//! matrix. Exact inference caches a Cholesky factor of `K + sigma_n^2 I`;
//! the sparse path uses subset-of-regressors equations for the mean (with
//! the deterministic-training-conditional variance correction, so a sparse
//! model whose inducing set equals the training set reproduces the exact
//! posterior) and k-means selected inducing points.
//!
//! Hyperparameters are optimized by multi-start L-BFGS ascent of the log
//! marginal likelihood with analytic gradients, in log-space, under bounds
//! derived from the data scales.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};

#[derive(Debug, thiserror::Error)]
pub enum GpError {
    #[error("empty training set")]
    EmptyDataset,
    #[error("dataset shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("covariance factorization failed even with jitter {max_jitter:.1e}")]
    NotPositiveDefinite { max_jitter: f64 },
    #[error("model file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// ARD RBF kernel: `sigma_f^2 exp(-1/2 sum_d (x_d - y_d)^2 / l_d^2)` plus
/// observation noise `sigma_n^2` on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl Kernel {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> Self {
        assert!(signal_variance > 0.0 && noise_variance > 0.0);
        assert!(lengthscales.iter().all(|l| *l > 0.0));
        Kernel { signal_variance, lengthscales, noise_variance }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut q = 0.0;
        for d in 0..self.lengthscales.len() {
            let diff = (a[d] - b[d]) / self.lengthscales[d];
            q += diff * diff;
        }
        self.signal_variance * (-0.5 * q).exp()
    }

    /// Gram matrix between row sets (no noise term).
    pub fn gram(&self, xa: &DMatrix<f64>, xb: &DMatrix<f64>) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(xa.nrows(), xb.nrows());
        for i in 0..xa.nrows() {
            for j in 0..xb.nrows() {
                let mut q = 0.0;
                for d in 0..self.lengthscales.len() {
                    let diff = (xa[(i, d)] - xb[(j, d)]) / self.lengthscales[d];
                    q += diff * diff;
                }
                k[(i, j)] = self.signal_variance * (-0.5 * q).exp();
            }
        }
        k
    }
}

/// Residual-learning dataset: feature rows and multi-output targets.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn push(&mut self, z: Vec<f64>, y: Vec<f64>) {
        self.features.push(z);
        self.targets.push(y);
    }

    pub fn extend(&mut self, other: &Dataset) {
        self.features.extend(other.features.iter().cloned());
        self.targets.extend(other.targets.iter().cloned());
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map(|f| f.len()).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.targets.first().map(|t| t.len()).unwrap_or(0)
    }

    fn feature_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let d = self.input_dim();
        DMatrix::from_fn(n, d, |i, j| self.features[i][j])
    }

    fn target_column(&self, m: usize) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| self.targets[i][m])
    }
}

const MAX_JITTER: f64 = 1e-4;

fn cholesky_with_jitter(mut k: DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>, GpError> {
    let n = k.nrows();
    let mut jitter = 0.0;
    loop {
        if let Some(chol) = Cholesky::new(k.clone()) {
            return Ok(chol);
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > MAX_JITTER {
            return Err(GpError::NotPositiveDefinite { max_jitter: MAX_JITTER });
        }
        for i in 0..n {
            k[(i, i)] += jitter;
        }
    }
}

/// One fitted output dimension.
#[derive(Debug, Clone)]
struct OutputGp {
    kernel: Kernel,
    /// exact: alpha = (K + sn I)^-1 y; sparse: SoR weight vector
    alpha: DVector<f64>,
    /// exact: Cholesky of K + sn I over training inputs;
    /// sparse: Cholesky of Sigma = K_uu + K_uf K_fu / sn
    factor: Cholesky<f64, nalgebra::Dyn>,
    /// sparse only: Cholesky of K_uu (for the DTC variance correction)
    kuu_factor: Option<Cholesky<f64, nalgebra::Dyn>>,
}

/// Gaussian-process model over a shared input matrix with independent
/// per-output kernels. Immutable once fitted.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
    outputs: Vec<OutputGp>,
    inducing: Option<DMatrix<f64>>,
}

/// Hyperparameter optimization settings.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub optimize_hypers: bool,
    pub restarts: usize,
    pub max_lbfgs_iters: usize,
    pub grad_tol: f64,
    /// Cap on the number of points used for likelihood optimization; the
    /// posterior is always conditioned on the full set.
    pub hyperopt_subsample: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            optimize_hypers: false,
            restarts: 2,
            max_lbfgs_iters: 80,
            grad_tol: 1e-5,
            hyperopt_subsample: 400,
            seed: 0,
        }
    }
}

impl GpModel {
    /// Fit an exact GP. With `optimize_hypers` the kernel of every output is
    /// optimized independently by multi-start L-BFGS on the log marginal
    /// likelihood; `kernel_init` seeds the search.
    pub fn fit(dataset: &Dataset, kernel_init: &Kernel, opts: &FitOptions) -> Result<GpModel, GpError> {
        if dataset.is_empty() {
            return Err(GpError::EmptyDataset);
        }
        let d = dataset.input_dim();
        if kernel_init.dim() != d {
            return Err(GpError::ShapeMismatch(format!(
                "kernel dim {} != input dim {d}",
                kernel_init.dim()
            )));
        }
        if dataset.targets.iter().any(|t| t.len() != dataset.output_dim())
            || dataset.features.iter().any(|f| f.len() != d)
        {
            return Err(GpError::ShapeMismatch("ragged rows".into()));
        }
        let x = dataset.feature_matrix();
        let n_out = dataset.output_dim();
        let mut outputs = Vec::with_capacity(n_out);
        for m in 0..n_out {
            let y = dataset.target_column(m);
            let kernel = if opts.optimize_hypers {
                optimize_hypers(&x, &y, kernel_init, opts)
            } else {
                kernel_init.clone()
            };
            let mut k = kernel.gram(&x, &x);
            for i in 0..x.nrows() {
                k[(i, i)] += kernel.noise_variance;
            }
            let factor = cholesky_with_jitter(k)?;
            let alpha = factor.solve(&y);
            outputs.push(OutputGp { kernel, alpha, factor, kuu_factor: None });
        }
        let targets = DMatrix::from_fn(dataset.len(), n_out, |i, j| dataset.targets[i][j]);
        Ok(GpModel { inputs: x, targets, outputs, inducing: None })
    }

    pub fn n_train(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_sparse(&self) -> bool {
        self.inducing.is_some()
    }

    pub fn kernels(&self) -> Vec<&Kernel> {
        self.outputs.iter().map(|o| &o.kernel).collect()
    }

    /// Posterior mean and (latent) variance per output at a query point.
    /// Variances are clamped at zero after roundoff.
    pub fn predict(&self, query: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut means = Vec::with_capacity(self.outputs.len());
        let mut vars = Vec::with_capacity(self.outputs.len());
        match &self.inducing {
            None => {
                for out in &self.outputs {
                    let kstar = DVector::from_fn(self.inputs.nrows(), |i, _| {
                        out.kernel.eval(self.inputs.row(i).transpose().as_slice(), query)
                    });
                    let mean = kstar.dot(&out.alpha);
                    let v = out.factor.solve(&kstar);
                    let var = out.kernel.signal_variance - kstar.dot(&v);
                    means.push(mean);
                    vars.push(var.max(0.0));
                }
            }
            Some(xu) => {
                for out in &self.outputs {
                    let ku = DVector::from_fn(xu.nrows(), |i, _| {
                        out.kernel.eval(xu.row(i).transpose().as_slice(), query)
                    });
                    let mean = ku.dot(&out.alpha);
                    // DTC variance: k** - k_u' Kuu^-1 k_u + k_u' Sigma^-1 k_u
                    let sigma_term = out.factor.solve(&ku);
                    let kuu_term = out
                        .kuu_factor
                        .as_ref()
                        .expect("sparse model has Kuu factor")
                        .solve(&ku);
                    let var =
                        out.kernel.signal_variance - ku.dot(&kuu_term) + ku.dot(&sigma_term);
                    means.push(mean);
                    vars.push(var.max(0.0));
                }
            }
        }
        (means, vars)
    }

    /// Compress to an inducing-point model. Inducing inputs are k-means
    /// centroids of the training inputs (deterministic per seed). Returns the
    /// model unchanged when it is already at most `n_inducing` points.
    pub fn make_sparse(&self, n_inducing: usize, selection_seed: u64) -> Result<GpModel, GpError> {
        assert!(n_inducing >= 1);
        let n = self.inputs.nrows();
        if n <= n_inducing {
            return Ok(self.clone());
        }
        let centers = kmeans(&self.inputs, n_inducing, selection_seed, 25);
        self.sparsify_with(centers)
    }

    /// Inducing-point posterior with an explicit inducing set.
    pub fn sparsify_with(&self, inducing: DMatrix<f64>) -> Result<GpModel, GpError> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for (m, out) in self.outputs.iter().enumerate() {
            let kern = out.kernel.clone();
            let kuf = kern.gram(&inducing, &self.inputs);
            let kuu = kern.gram(&inducing, &inducing);
            let sn = kern.noise_variance;
            // Sigma = Kuu + Kuf Kfu / sn
            let sigma = &kuu + &kuf * kuf.transpose() / sn;
            let factor = cholesky_with_jitter(sigma)?;
            let kuu_factor = cholesky_with_jitter(kuu)?;
            let y = DVector::from_fn(self.targets.nrows(), |i, _| self.targets[(i, m)]);
            // SoR mean weights: Sigma^-1 Kuf y / sn
            let alpha = factor.solve(&(&kuf * &y)) / sn;
            outputs.push(OutputGp { kernel: kern, alpha, factor, kuu_factor: Some(kuu_factor) });
        }
        Ok(GpModel {
            inputs: self.inputs.clone(),
            targets: self.targets.clone(),
            outputs,
            inducing: Some(inducing),
        })
    }

    // -- plain-text serialization ------------------------------------------

    /// Write the model as a plain-text table (kernels, training data,
    /// inducing points) so loops can be checkpointed without a binary format.
    pub fn save(&self, path: &std::path::Path) -> Result<(), GpError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# tracklab gp v1")?;
        writeln!(
            f,
            "dims {} {} {}",
            self.inputs.nrows(),
            self.inputs.ncols(),
            self.outputs.len()
        )?;
        for out in &self.outputs {
            write!(f, "kernel {:.17e} {:.17e}", out.kernel.signal_variance, out.kernel.noise_variance)?;
            for l in &out.kernel.lengthscales {
                write!(f, " {l:.17e}")?;
            }
            writeln!(f)?;
        }
        for i in 0..self.inputs.nrows() {
            write!(f, "x")?;
            for j in 0..self.inputs.ncols() {
                write!(f, " {:.17e}", self.inputs[(i, j)])?;
            }
            for m in 0..self.targets.ncols() {
                write!(f, " {:.17e}", self.targets[(i, m)])?;
            }
            writeln!(f)?;
        }
        if let Some(xu) = &self.inducing {
            for i in 0..xu.nrows() {
                write!(f, "u")?;
                for j in 0..xu.ncols() {
                    write!(f, " {:.17e}", xu[(i, j)])?;
                }
                writeln!(f)?;
            }
        }
        Ok(())
    }

    /// Load a model saved by [`GpModel::save`], re-deriving the cached
    /// factorizations.
    pub fn load(path: &std::path::Path) -> Result<GpModel, GpError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut dims: Option<(usize, usize, usize)> = None;
        let mut kernels: Vec<Kernel> = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut inducing_rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let mut it = t.split_whitespace();
            let tag = it.next().unwrap();
            let nums: Vec<f64> = it
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| GpError::Parse { line: lineno + 1, msg: e.to_string() })?;
            match tag {
                "dims" => {
                    if nums.len() != 3 {
                        return Err(GpError::Parse { line: lineno + 1, msg: "dims needs 3 fields".into() });
                    }
                    dims = Some((nums[0] as usize, nums[1] as usize, nums[2] as usize));
                }
                "kernel" => {
                    if nums.len() < 3 {
                        return Err(GpError::Parse { line: lineno + 1, msg: "short kernel line".into() });
                    }
                    kernels.push(Kernel::new(nums[0], nums[2..].to_vec(), nums[1]));
                }
                "x" => rows.push(nums),
                "u" => inducing_rows.push(nums),
                other => {
                    return Err(GpError::Parse { line: lineno + 1, msg: format!("unknown tag {other}") })
                }
            }
        }
        let (n, d, m) = dims.ok_or(GpError::Parse { line: 0, msg: "missing dims".into() })?;
        if rows.len() != n || kernels.len() != m {
            return Err(GpError::Parse { line: 0, msg: "row/kernel count mismatch".into() });
        }
        let mut dataset = Dataset::default();
        for r in &rows {
            if r.len() != d + m {
                return Err(GpError::Parse { line: 0, msg: "bad data row width".into() });
            }
            dataset.push(r[..d].to_vec(), r[d..].to_vec());
        }
        // refit per-output with the stored kernels
        let x = dataset.feature_matrix();
        let mut outputs = Vec::with_capacity(m);
        for (mi, kern) in kernels.iter().enumerate() {
            let y = dataset.target_column(mi);
            let mut k = kern.gram(&x, &x);
            for i in 0..n {
                k[(i, i)] += kern.noise_variance;
            }
            let factor = cholesky_with_jitter(k)?;
            let alpha = factor.solve(&y);
            outputs.push(OutputGp { kernel: kern.clone(), alpha, factor, kuu_factor: None });
        }
        let targets = DMatrix::from_fn(n, m, |i, j| dataset.targets[i][j]);
        let model = GpModel { inputs: x, targets, outputs, inducing: None };
        if inducing_rows.is_empty() {
            Ok(model)
        } else {
            let p = inducing_rows.len();
            let xu = DMatrix::from_fn(p, d, |i, j| inducing_rows[i][j]);
            model.sparsify_with(xu)
        }
    }
}

// ---------------------------------------------------------------------------
// k-means inducing selection
// ---------------------------------------------------------------------------

fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64, iters: usize) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ style init: first uniform, then distance-weighted
    let mut centers: Vec<usize> = vec![rng.gen_range(0..n)];
    let mut dist2 = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = *centers.last().unwrap();
        for i in 0..n {
            let mut dd = 0.0;
            for j in 0..d {
                let diff = x[(i, j)] - x[(last, j)];
                dd += diff * diff;
            }
            dist2[i] = dist2[i].min(dd);
        }
        let total: f64 = dist2.iter().sum();
        if total <= 0.0 {
            centers.push(rng.gen_range(0..n));
            continue;
        }
        let mut target = rng.gen_range(0.0..total);
        let mut chosen = n - 1;
        for (i, &w) in dist2.iter().enumerate() {
            if target < w {
                chosen = i;
                break;
            }
            target -= w;
        }
        centers.push(chosen);
    }
    let mut c = DMatrix::from_fn(k, d, |i, j| x[(centers[i], j)]);
    let mut assignment = vec![0usize; n];
    for _ in 0..iters {
        // assign
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for ci in 0..k {
                let mut dd = 0.0;
                for j in 0..d {
                    let diff = x[(i, j)] - c[(ci, j)];
                    dd += diff * diff;
                }
                if dd < best_d {
                    best_d = dd;
                    best = ci;
                }
            }
            assignment[i] = best;
        }
        // update
        let mut counts = vec![0usize; k];
        let mut sums = DMatrix::<f64>::zeros(k, d);
        for i in 0..n {
            counts[assignment[i]] += 1;
            for j in 0..d {
                sums[(assignment[i], j)] += x[(i, j)];
            }
        }
        for ci in 0..k {
            if counts[ci] > 0 {
                for j in 0..d {
                    c[(ci, j)] = sums[(ci, j)] / counts[ci] as f64;
                }
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Log marginal likelihood optimization
// ---------------------------------------------------------------------------

struct HyperProblem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    lo: Vec<f64>, // bounds on log-parameters: [log sf2, log l_1..l_D, log sn2]
    hi: Vec<f64>,
}

impl<'a> HyperProblem<'a> {
    fn n_params(&self) -> usize {
        self.x.ncols() + 2
    }

    fn kernel_from(&self, p: &[f64]) -> Kernel {
        let d = self.x.ncols();
        Kernel::new(p[0].exp(), p[1..=d].iter().map(|v| v.exp()).collect(), p[d + 1].exp())
    }

    /// Log marginal likelihood and its gradient w.r.t. the log-parameters.
    fn lml_and_grad(&self, p: &[f64]) -> Option<(f64, Vec<f64>)> {
        let n = self.x.nrows();
        let d = self.x.ncols();
        let kern = self.kernel_from(p);
        let mut kf = kern.gram(self.x, self.x);
        let mut ky = kf.clone();
        for i in 0..n {
            ky[(i, i)] += kern.noise_variance;
        }
        let chol = Cholesky::new(ky)?;
        let alpha = chol.solve(self.y);
        let mut logdet = 0.0;
        for i in 0..n {
            logdet += chol.l_dirty()[(i, i)].ln();
        }
        let lml = -0.5 * self.y.dot(&alpha)
            - logdet
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

        // gradient: 1/2 tr((alpha alpha' - K^-1) dK/dtheta)
        let kinv = chol.inverse();
        let mut grad = vec![0.0; self.n_params()];
        // dK/dlog sf2 = Kf
        {
            let mut tr = 0.0;
            for i in 0..n {
                for j in 0..n {
                    tr += (alpha[i] * alpha[j] - kinv[(i, j)]) * kf[(i, j)];
                }
            }
            grad[0] = 0.5 * tr;
        }
        // dK/dlog l_d = Kf .* sqdist_d / l_d^2
        for dd in 0..d {
            let ld2 = kern.lengthscales[dd] * kern.lengthscales[dd];
            let mut tr = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let diff = self.x[(i, dd)] - self.x[(j, dd)];
                    let dk = kf[(i, j)] * diff * diff / ld2;
                    tr += (alpha[i] * alpha[j] - kinv[(i, j)]) * dk;
                }
            }
            grad[1 + dd] = 0.5 * tr;
        }
        // dK/dlog sn2 = sn2 I
        {
            let mut tr = 0.0;
            for i in 0..n {
                tr += (alpha[i] * alpha[i] - kinv[(i, i)]) * kern.noise_variance;
            }
            grad[d + 1] = 0.5 * tr;
        }
        let _ = std::mem::take(&mut kf);
        Some((lml, grad))
    }

    fn project(&self, p: &mut [f64]) {
        for i in 0..p.len() {
            p[i] = p[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    /// Projected-gradient norm used as the ascent stopping criterion.
    fn projected_grad_norm(&self, p: &[f64], grad: &[f64]) -> f64 {
        let mut norm: f64 = 0.0;
        for i in 0..p.len() {
            let stepped = (p[i] + grad[i]).clamp(self.lo[i], self.hi[i]);
            norm = norm.max((stepped - p[i]).abs());
        }
        norm
    }
}

/// L-BFGS ascent (two-loop recursion, Armijo backtracking, projection onto
/// the bound box) of the log marginal likelihood.
fn lbfgs_ascend(prob: &HyperProblem, start: Vec<f64>, max_iters: usize, grad_tol: f64) -> (f64, Vec<f64>) {
    let n = start.len();
    let mem = 8usize;
    let mut p = start;
    prob.project(&mut p);
    let (mut f, mut g) = match prob.lml_and_grad(&p) {
        Some(v) => v,
        None => return (f64::NEG_INFINITY, p),
    };
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();

    for _ in 0..max_iters {
        if prob.projected_grad_norm(&p, &g) < grad_tol {
            break;
        }
        // two-loop recursion on the ascent direction
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            if sy.abs() < 1e-14 {
                alphas.push(0.0);
                continue;
            }
            let a: f64 = s.iter().zip(&q).map(|(si, qi)| si * qi).sum::<f64>() / sy;
            for i in 0..n {
                q[i] -= a * y_hist[y_hist.len() - 1 - alphas.len()][i];
            }
            alphas.push(a);
        }
        let gamma = if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            let yy: f64 = y.iter().map(|v| v * v).sum();
            if yy > 1e-14 { (sy / yy).abs().max(1e-6) } else { 1.0 }
        } else {
            1.0
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for (idx, (s, y)) in s_hist.iter().zip(&y_hist).enumerate() {
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            if sy.abs() < 1e-14 {
                continue;
            }
            let b: f64 = y.iter().zip(&q).map(|(yi, qi)| yi * qi).sum::<f64>() / sy;
            let a = alphas[alphas.len() - 1 - idx];
            for i in 0..n {
                q[i] += (a - b) * s[i];
            }
        }
        // backtracking line search on the ascent direction
        let mut step = 1.0;
        let g_dot_q: f64 = g.iter().zip(&q).map(|(a, b)| a * b).sum();
        let dir = if g_dot_q > 0.0 { q } else { g.clone() };
        let g_dot_dir: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = p.clone();
            for i in 0..n {
                trial[i] += step * dir[i];
            }
            prob.project(&mut trial);
            if let Some((ft, gt)) = prob.lml_and_grad(&trial) {
                let actual_step: f64 = trial
                    .iter()
                    .zip(&p)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if ft > f + 1e-4 * step * g_dot_dir.max(0.0) && actual_step > 0.0 {
                    let s_vec: Vec<f64> = trial.iter().zip(&p).map(|(a, b)| a - b).collect();
                    let y_vec: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
                    s_hist.push(s_vec);
                    y_hist.push(y_vec);
                    if s_hist.len() > mem {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                    p = trial;
                    f = ft;
                    g = gt;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (f, p)
}

fn optimize_hypers(x: &DMatrix<f64>, y: &DVector<f64>, init: &Kernel, opts: &FitOptions) -> Kernel {
    let n = x.nrows();
    let d = x.ncols();
    // optional subsampling for tractability on large sets
    let (xs, ys) = if n > opts.hyperopt_subsample {
        let stride = n as f64 / opts.hyperopt_subsample as f64;
        let idx: Vec<usize> = (0..opts.hyperopt_subsample)
            .map(|i| ((i as f64 * stride) as usize).min(n - 1))
            .collect();
        let xs = DMatrix::from_fn(idx.len(), d, |i, j| x[(idx[i], j)]);
        let ys = DVector::from_fn(idx.len(), |i, _| y[idx[i]]);
        (xs, ys)
    } else {
        (x.clone(), y.clone())
    };

    // bounds from the data scales
    let mut input_std = vec![0.0; d];
    for j in 0..d {
        let col = xs.column(j);
        let mean = col.sum() / xs.nrows() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xs.nrows() as f64;
        input_std[j] = var.sqrt().max(1e-6);
    }
    let y_mean = ys.sum() / ys.len() as f64;
    let y_var = (ys.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / ys.len() as f64).max(1e-12);

    let mut lo = vec![(y_var * 1e-4).ln()];
    let mut hi = vec![(y_var * 1e4).ln()];
    for j in 0..d {
        lo.push((input_std[j] * 1e-2).ln());
        hi.push((input_std[j] * 1e2).ln());
    }
    lo.push((y_var * 1e-8).ln());
    hi.push(y_var.ln());

    let prob = HyperProblem { x: &xs, y: &ys, lo, hi };
    let mut start = vec![init.signal_variance.ln()];
    start.extend(init.lengthscales.iter().map(|l| l.ln()));
    start.push(init.noise_variance.ln());

    let mut best = lbfgs_ascend(&prob, start.clone(), opts.max_lbfgs_iters, opts.grad_tol);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e3779b97f4a7c15);
    for _ in 1..opts.restarts.max(1) {
        let mut s = vec![y_var.ln()];
        for j in 0..d {
            s.push((input_std[j] * rng.gen_range(0.3..3.0)).ln());
        }
        s.push((y_var * rng.gen_range(1e-4..1e-2)).ln());
        let cand = lbfgs_ascend(&prob, s, opts.max_lbfgs_iters, opts.grad_tol);
        if cand.0 > best.0 {
            best = cand;
        }
    }
    prob.kernel_from(&best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_kernel(d: usize) -> Kernel {
        Kernel::new(1.0, vec![1.0; d], 1e-10)
    }

    #[test]
    fn single_point_interpolates() {
        let mut ds = Dataset::default();
        ds.push(vec![0.4, -0.2], vec![1.7]);
        let model = GpModel::fit(&ds, &unit_kernel(2), &FitOptions::default()).unwrap();
        let (mean, var) = model.predict(&[0.4, -0.2]);
        assert_relative_eq!(mean[0], 1.7, epsilon = 1e-6);
        assert!(var[0] < 1e-6);
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let mut ds = Dataset::default();
        ds.push(vec![0.0], vec![3.0]);
        ds.push(vec![1.0], vec![-1.0]);
        let kern = Kernel::new(2.5, vec![1.0], 1e-10);
        let model = GpModel::fit(&ds, &kern, &FitOptions::default()).unwrap();
        let (mean, var) = model.predict(&[25.0]);
        assert!(mean[0].abs() < 1e-6);
        assert_relative_eq!(var[0], 2.5, epsilon = 1e-6);
    }

    #[test]
    fn two_point_posterior_matches_hand_solved_system() {
        // unit RBF, points x=0,1 with targets 1, 2; noise 0.1
        // K = [[1, r], [r, 1]] with r = exp(-1/2); solve (K + 0.1 I) a = y by hand
        let r = (-0.5f64).exp();
        let mut ds = Dataset::default();
        ds.push(vec![0.0], vec![1.0]);
        ds.push(vec![1.0], vec![2.0]);
        let kern = Kernel::new(1.0, vec![1.0], 0.1);
        let model = GpModel::fit(&ds, &kern, &FitOptions::default()).unwrap();

        let a11 = 1.1;
        let det = a11 * a11 - r * r;
        let alpha0 = (a11 * 1.0 - r * 2.0) / det;
        let alpha1 = (-r * 1.0 + a11 * 2.0) / det;
        let q = 0.3f64;
        let k0 = (-0.5 * q * q).exp();
        let k1 = (-0.5 * (q - 1.0) * (q - 1.0)).exp();
        let expect_mean = k0 * alpha0 + k1 * alpha1;
        // variance: 1 - k' (K + 0.1 I)^-1 k
        let s0 = (a11 * k0 - r * k1) / det;
        let s1 = (-r * k0 + a11 * k1) / det;
        let expect_var = 1.0 - (k0 * s0 + k1 * s1);

        let (mean, var) = model.predict(&[q]);
        assert_relative_eq!(mean[0], expect_mean, epsilon = 1e-12);
        assert_relative_eq!(var[0], expect_var, epsilon = 1e-12);
    }

    // independent dense oracle: Gaussian elimination written out by hand
    fn solve_dense(a: &Vec<Vec<f64>>, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.iter().map(|r| r.clone()).collect();
        let mut rhs = b.to_vec();
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if m[r][col].abs() > m[piv][col].abs() {
                    piv = r;
                }
            }
            m.swap(col, piv);
            rhs.swap(col, piv);
            let diag = m[col][col];
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = m[r][col] / diag;
                for c in col..n {
                    m[r][c] -= f * m[col][c];
                }
                rhs[r] -= f * rhs[col];
            }
        }
        (0..n).map(|i| rhs[i] / m[i][i]).collect()
    }

    #[test]
    fn posterior_matches_direct_solve_oracle() {
        let xs = [0.11, 0.42, 0.57, 0.73, 0.95];
        let ys = [1.0, -0.3, 0.8, 0.2, -1.1];
        let sf2 = 1.5;
        let l = 0.3;
        let sn2 = 0.01;
        let mut ds = Dataset::default();
        for (x, y) in xs.iter().zip(&ys) {
            ds.push(vec![*x], vec![*y]);
        }
        let model = GpModel::fit(&ds, &Kernel::new(sf2, vec![l], sn2), &FitOptions::default()).unwrap();

        let k = |a: f64, b: f64| sf2 * (-0.5 * ((a - b) / l).powi(2)).exp();
        let gram: Vec<Vec<f64>> = xs
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                xs.iter()
                    .enumerate()
                    .map(|(j, &b)| k(a, b) + if i == j { sn2 } else { 0.0 })
                    .collect()
            })
            .collect();
        let alpha = solve_dense(&gram, &ys);
        for q in [0.05, 0.3, 0.66, 0.88] {
            let kstar: Vec<f64> = xs.iter().map(|&x| k(q, x)).collect();
            let mean: f64 = kstar.iter().zip(&alpha).map(|(a, b)| a * b).sum();
            let v = solve_dense(&gram, &kstar);
            let var = sf2 - kstar.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            let (m, s2) = model.predict(&[q]);
            assert_relative_eq!(m[0], mean, epsilon = 1e-8);
            assert_relative_eq!(s2[0], var.max(0.0), epsilon = 1e-8);
        }
    }

    #[test]
    fn odd_symmetric_data_has_zero_mean_at_origin() {
        let mut ds = Dataset::default();
        for x in [0.5, 1.0, 1.5] {
            ds.push(vec![x], vec![x.sin()]);
            ds.push(vec![-x], vec![-(x.sin())]);
        }
        let model = GpModel::fit(&ds, &Kernel::new(1.0, vec![0.8], 1e-6), &FitOptions::default()).unwrap();
        let (mean, _) = model.predict(&[0.0]);
        assert!(mean[0].abs() < 1e-10);
    }

    #[test]
    fn sparse_with_few_points_is_exact_model() {
        let mut ds = Dataset::default();
        for i in 0..50 {
            let x = i as f64 * 0.1;
            ds.push(vec![x], vec![x.sin()]);
        }
        let model = GpModel::fit(&ds, &Kernel::new(1.0, vec![0.5], 1e-4), &FitOptions::default()).unwrap();
        let sparse = model.make_sparse(200, 0).unwrap();
        assert!(!sparse.is_sparse());
        let (m1, v1) = model.predict(&[2.34]);
        let (m2, v2) = sparse.predict(&[2.34]);
        assert_eq!(m1[0], m2[0]);
        assert_eq!(v1[0], v2[0]);
    }

    #[test]
    fn sor_with_training_inducing_matches_exact() {
        let mut ds = Dataset::default();
        for i in 0..30 {
            let x = i as f64 * 0.21;
            ds.push(vec![x], vec![(0.9 * x).sin() + 0.1 * x]);
        }
        let model = GpModel::fit(&ds, &Kernel::new(1.2, vec![0.7], 1e-3), &FitOptions::default()).unwrap();
        let sparse = model.sparsify_with(model.inputs.clone()).unwrap();
        for q in [0.1, 1.3, 2.9, 4.4, 6.0] {
            let (me, ve) = model.predict(&[q]);
            let (ms, vs) = sparse.predict(&[q]);
            assert_relative_eq!(me[0], ms[0], epsilon = 1e-6);
            assert_relative_eq!(ve[0], vs[0], epsilon = 1e-6);
        }
    }

    #[test]
    fn sparse_rmse_within_twice_exact_on_sine() {
        let mut ds = Dataset::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let x: f64 = rng.gen_range(0.0..6.28);
            let y = x.sin() + 0.05 * rng.gen_range(-1.0..1.0);
            ds.push(vec![x], vec![y]);
        }
        let kern = Kernel::new(1.0, vec![0.6], 3e-3);
        let model = GpModel::fit(&ds, &kern, &FitOptions::default()).unwrap();
        let sparse = model.make_sparse(200, 7).unwrap();
        assert!(sparse.is_sparse());
        let mut err_exact = 0.0;
        let mut err_sparse = 0.0;
        let n_test = 200;
        for i in 0..n_test {
            let q = 6.28 * i as f64 / n_test as f64;
            let truth = q.sin();
            let (me, _) = model.predict(&[q]);
            let (ms, _) = sparse.predict(&[q]);
            err_exact += (me[0] - truth).powi(2);
            err_sparse += (ms[0] - truth).powi(2);
        }
        let rmse_exact = (err_exact / n_test as f64).sqrt();
        let rmse_sparse = (err_sparse / n_test as f64).sqrt();
        assert!(
            rmse_sparse <= 2.0 * rmse_exact.max(1e-3),
            "sparse {rmse_sparse} vs exact {rmse_exact}"
        );
    }

    #[test]
    fn gram_matrix_is_psd() {
        let kern = Kernel::new(1.3, vec![0.5, 2.0], 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-3.0..3.0));
        let k = kern.gram(&x, &x);
        let eig = k.symmetric_eigenvalues();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let trace: f64 = (0..n).map(|i| k[(i, i)]).sum();
        assert!(min >= -1e-8 * trace, "min eig {min}, trace {trace}");
    }

    #[test]
    fn adding_data_never_increases_variance() {
        let kern = Kernel::new(1.0, vec![0.8], 1e-2);
        let mut ds = Dataset::default();
        for x in [0.0, 0.7, 1.9, 2.5] {
            ds.push(vec![x], vec![x.cos()]);
        }
        let base = GpModel::fit(&ds, &kern, &FitOptions::default()).unwrap();
        let mut bigger = ds.clone();
        bigger.push(vec![1.2], vec![1.2f64.cos()]);
        let grown = GpModel::fit(&bigger, &kern, &FitOptions::default()).unwrap();
        for q in [-0.5, 0.3, 1.1, 2.0, 3.3] {
            let (_, v0) = base.predict(&[q]);
            let (_, v1) = grown.predict(&[q]);
            assert!(v1[0] <= v0[0] + 1e-10, "variance grew at {q}: {} -> {}", v0[0], v1[0]);
        }
    }

    #[test]
    fn outputs_are_independent_under_target_permutation() {
        let mut ds1 = Dataset::default();
        let mut ds2 = Dataset::default();
        let xs = [0.0, 0.5, 1.0, 1.5, 2.0];
        let y1 = [1.0, 0.2, -0.4, 0.9, 0.1];
        let y2a = [0.3, -0.8, 0.5, 0.0, 0.7];
        let y2b = [0.7, 0.0, 0.5, -0.8, 0.3]; // permuted second output
        for i in 0..5 {
            ds1.push(vec![xs[i]], vec![y1[i], y2a[i]]);
            ds2.push(vec![xs[i]], vec![y1[i], y2b[i]]);
        }
        let kern = Kernel::new(1.0, vec![0.6], 1e-4);
        let m1 = GpModel::fit(&ds1, &kern, &FitOptions::default()).unwrap();
        let m2 = GpModel::fit(&ds2, &kern, &FitOptions::default()).unwrap();
        let (p1, _) = m1.predict(&[0.77]);
        let (p2, _) = m2.predict(&[0.77]);
        assert_eq!(p1[0], p2[0]);
    }

    #[test]
    fn hyperopt_recovers_reasonable_lengthscale() {
        let mut ds = Dataset::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..60 {
            let x: f64 = rng.gen_range(0.0..4.0);
            ds.push(vec![x], vec![(2.0 * x).sin() + 0.01 * rng.gen_range(-1.0..1.0)]);
        }
        let init = Kernel::new(1.0, vec![1.0], 1e-2);
        let opts = FitOptions { optimize_hypers: true, restarts: 2, ..FitOptions::default() };
        let model = GpModel::fit(&ds, &init, &opts).unwrap();
        // held-out accuracy is the real check
        let mut err = 0.0;
        for i in 0..50 {
            let q = 0.04 + 3.9 * i as f64 / 50.0;
            let (m, _) = model.predict(&[q]);
            err += (m[0] - (2.0 * q).sin()).powi(2);
        }
        let rmse = (err / 50.0).sqrt();
        assert!(rmse < 0.05, "rmse {rmse}");
    }

    #[test]
    fn save_load_roundtrip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gptxt");
        let mut ds = Dataset::default();
        for i in 0..25 {
            let x = i as f64 * 0.2;
            ds.push(vec![x, -x], vec![x.sin(), x.cos(), 0.1 * x]);
        }
        let kern = Kernel::new(0.8, vec![0.5, 0.9], 1e-4);
        let model = GpModel::fit(&ds, &kern, &FitOptions::default()).unwrap();
        let sparse = model.make_sparse(10, 3).unwrap();
        sparse.save(&path).unwrap();
        let loaded = GpModel::load(&path).unwrap();
        for q in [[0.3, -0.3], [1.7, -1.7], [4.0, -4.0]] {
            let (m1, v1) = sparse.predict(&q);
            let (m2, v2) = loaded.predict(&q);
            for k in 0..3 {
                assert_relative_eq!(m1[k], m2[k], epsilon = 1e-12);
                assert_relative_eq!(v1[k], v2[k], epsilon = 1e-12);
            }
        }
    }
}
