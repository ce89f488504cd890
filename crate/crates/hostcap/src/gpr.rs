//! Exact Gaussian-process regression on (penetration, V_max) samples.
//!
//! Squared-exponential kernel `k(x, x') = lambda^2 exp(-(x - x')^2 / tau^2)`
//! with homoskedastic noise. Outputs are centered on their sample mean;
//! hyperparameters are found by maximizing the log marginal likelihood with
//! a multi-start BFGS in log-parameter space. The fitted model caches the
//! Cholesky factor of `K + noise*I` and the weight vector
//! `alpha = (K + noise*I)^-1 y`, so prediction is a dot product plus one
//! triangular solve.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probdist::{new_rng, normal_cdf, normal_inv_cdf, RngSeed, STREAM_GPR_STARTS};
use crate::scenarios::SampleRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GprHyperparams {
    /// Signal variance lambda^2.
    pub lambda_sq: f64,
    /// Squared length scale tau^2.
    pub tau_sq: f64,
    /// Noise variance sigma_eps^2.
    pub noise_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GprPrediction {
    pub mu: f64,
    pub sigma_sq: f64,
}

impl GprPrediction {
    pub fn sigma(&self) -> f64 {
        self.sigma_sq.sqrt()
    }
}

#[derive(Debug, Error)]
pub enum GprError {
    #[error("need at least {min} training samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("training size {got} exceeds the exact-GPR cap of {cap}")]
    TooManySamples { got: usize, cap: usize },
    #[error("degenerate inputs: all training x values are identical")]
    DegenerateInputs,
    #[error("Cholesky factorization failed even at the maximum jitter")]
    CholeskyFailed,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("confidence parameter {0} outside (0,1)")]
    BadAlpha(f64),
}

/// Fitted GP model. Serializes as hyperparameters plus training data; the
/// Cholesky factor and weights are rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GprModelData", into = "GprModelData")]
pub struct GprModel {
    pub hyper: GprHyperparams,
    pub train_x: Vec<f64>,
    /// Centered outputs (v_max minus `center_m`).
    pub train_y: Vec<f64>,
    pub center_m: f64,
    chol_l: DMatrix<f64>,
    alpha: DVector<f64>,
    /// Gradient norm of the log marginal likelihood at the fitted optimum
    /// (log-parameter space); populated by [`fit_gpr`].
    pub fit_grad_norm: Option<f64>,
}

#[derive(Serialize, Deserialize, Clone)]
struct GprModelData {
    hyper: GprHyperparams,
    center_m: f64,
    train_x: Vec<f64>,
    train_y: Vec<f64>,
    fit_grad_norm: Option<f64>,
}

impl From<GprModel> for GprModelData {
    fn from(m: GprModel) -> Self {
        GprModelData {
            hyper: m.hyper,
            center_m: m.center_m,
            train_x: m.train_x,
            train_y: m.train_y,
            fit_grad_norm: m.fit_grad_norm,
        }
    }
}

impl TryFrom<GprModelData> for GprModel {
    type Error = GprError;

    fn try_from(d: GprModelData) -> Result<Self, GprError> {
        let mut m = GprModel::from_centered(d.hyper, d.train_x, d.train_y, d.center_m)?;
        m.fit_grad_norm = d.fit_grad_norm;
        Ok(m)
    }
}

/// Squared-exponential kernel.
pub fn kernel_eval(xi: f64, xj: f64, hyper: &GprHyperparams) -> f64 {
    let d = xi - xj;
    hyper.lambda_sq * (-(d * d) / hyper.tau_sq).exp()
}

impl GprModel {
    /// Build a model at fixed hyperparameters from raw (x, v_max) pairs.
    /// Outputs are centered internally.
    pub fn with_hyperparams(
        hyper: GprHyperparams,
        x: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<Self, GprError> {
        let n = y.len();
        let m = y.iter().sum::<f64>() / n as f64;
        let centered = y.iter().map(|v| v - m).collect();
        Self::from_centered(hyper, x, centered, m)
    }

    fn from_centered(
        hyper: GprHyperparams,
        x: Vec<f64>,
        y_centered: Vec<f64>,
        center_m: f64,
    ) -> Result<Self, GprError> {
        if hyper.lambda_sq <= 0.0 || hyper.tau_sq <= 0.0 || hyper.noise_var <= 0.0 {
            return Err(GprError::InvalidHyperparams(format!("{hyper:?}")));
        }
        if x.len() != y_centered.len() || x.is_empty() {
            return Err(GprError::TooFewSamples {
                min: 1,
                got: x.len().min(y_centered.len()),
            });
        }
        let k = kernel_matrix(&x, &hyper);
        let (chol, _jitter) = cholesky_with_jitter(&k).ok_or(GprError::CholeskyFailed)?;
        let y_vec = DVector::from_column_slice(&y_centered);
        let alpha = chol.solve(&y_vec);
        Ok(GprModel {
            hyper,
            train_x: x,
            train_y: y_centered,
            center_m,
            chol_l: chol.l(),
            alpha,
            fit_grad_norm: None,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train_x.len()
    }

    /// Lower-triangular factor of `K + noise*I` (including any jitter used).
    pub fn chol_factor(&self) -> &DMatrix<f64> {
        &self.chol_l
    }
}

fn kernel_matrix(x: &[f64], hyper: &GprHyperparams) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.lambda_sq + hyper.noise_var;
        for j in 0..i {
            let v = kernel_eval(x[i], x[j], hyper);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky with escalating diagonal jitter: clean attempt first, then
/// 1e-10 growing tenfold up to 1e-6.
fn cholesky_with_jitter(k: &DMatrix<f64>) -> Option<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    if let Some(c) = Cholesky::new(k.clone()) {
        return Some((c, 0.0));
    }
    let mut jitter = 1e-10;
    while jitter <= 1e-6 {
        let mut kj = k.clone();
        for i in 0..k.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Some((c, jitter));
        }
        jitter *= 10.0;
    }
    None
}

/// Predictive mean and variance of V_max at a new penetration level, on
/// the original output scale (noise variance included).
pub fn predict(model: &GprModel, x_star: f64) -> GprPrediction {
    let n = model.n_train();
    let k_star = DVector::from_fn(n, |i, _| kernel_eval(model.train_x[i], x_star, &model.hyper));
    let mu = k_star.dot(&model.alpha) + model.center_m;
    let v = model
        .chol_l
        .solve_lower_triangular(&k_star)
        .expect("cholesky factor is nonsingular");
    let latent = model.hyper.lambda_sq - v.norm_squared();
    debug_assert!(latent > -1e-10, "posterior variance {latent} below tolerance");
    let sigma_sq = latent.max(0.0) + model.hyper.noise_var;
    GprPrediction { mu, sigma_sq }
}

/// Two-sided prediction interval at confidence `1 - alpha`.
pub fn prediction_interval(
    model: &GprModel,
    x_star: f64,
    alpha: f64,
) -> Result<(f64, f64), GprError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GprError::BadAlpha(alpha));
    }
    let p = predict(model, x_star);
    let z = normal_inv_cdf(1.0 - alpha / 2.0).map_err(|_| GprError::BadAlpha(alpha))?;
    let half = z * p.sigma();
    Ok((p.mu - half, p.mu + half))
}

/// Probability that V_max exceeds `v_limit` at the given penetration,
/// under the Gaussian predictive distribution. A zero-variance prediction
/// degenerates to a hard 0/1 indicator on the mean.
pub fn gp_risk_index(model: &GprModel, x_star: f64, v_limit: f64) -> f64 {
    let p = predict(model, x_star);
    let sigma = p.sigma();
    if sigma == 0.0 {
        return if p.mu > v_limit { 1.0 } else { 0.0 };
    }
    1.0 - normal_cdf((v_limit - p.mu) / sigma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub n_starts: usize,
    pub max_iters: usize,
    /// Convergence threshold on the log-marginal-likelihood gradient norm
    /// in log-parameter space.
    pub grad_tol: f64,
    pub seed: RngSeed,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_starts: 8,
            max_iters: 120,
            grad_tol: 1e-5,
            seed: RngSeed(0),
        }
    }
}

/// Exact-GPR training cap; O(n^3) cost beyond this is not worth it here.
pub const MAX_TRAIN: usize = 2000;
const MIN_TRAIN: usize = 10;

/// Fit hyperparameters by multi-start quasi-Newton ascent of the log
/// marginal likelihood (starts drawn by Latin hypercube in log space).
/// Non-converged records are ignored.
pub fn fit_gpr(samples: &[SampleRecord], opts: &FitOptions) -> Result<GprModel, GprError> {
    let pairs: Vec<(f64, f64)> = samples
        .iter()
        .filter(|r| r.converged)
        .map(|r| (r.x, r.v_max))
        .collect();
    let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    fit_gpr_xy(&x, &y, opts)
}

/// Fit on raw (x, y) pairs; the record-based [`fit_gpr`] delegates here.
pub fn fit_gpr_xy(x: &[f64], y: &[f64], opts: &FitOptions) -> Result<GprModel, GprError> {
    let n = x.len();
    if n < MIN_TRAIN {
        return Err(GprError::TooFewSamples {
            min: MIN_TRAIN,
            got: n,
        });
    }
    if n > MAX_TRAIN {
        return Err(GprError::TooManySamples {
            got: n,
            cap: MAX_TRAIN,
        });
    }
    let x_min = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(x_max - x_min > 0.0) {
        return Err(GprError::DegenerateInputs);
    }

    let m = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - m).collect();
    let var_y = (yc.iter().map(|v| v * v).sum::<f64>() / n as f64).max(1e-12);
    let x_range = (x_max - x_min).max(1e-6);

    // pairwise squared distances, shared by every objective evaluation
    let mut d2 = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let d = x[i] - x[j];
            d2[(i, j)] = d * d;
            d2[(j, i)] = d * d;
        }
    }
    let y_vec = DVector::from_column_slice(&yc);
    let objective = LmlObjective { d2: &d2, y: &y_vec };

    // Latin hypercube over log-parameter ranges centered on the data scale
    let lo = [
        (var_y * 1e-2).ln(),
        ((x_range / 30.0) * (x_range / 30.0)).ln(),
        (var_y * 1e-4).ln(),
    ];
    let hi = [
        (var_y * 1e2).ln(),
        ((2.0 * x_range) * (2.0 * x_range)).ln(),
        var_y.ln(),
    ];
    let mut rng = new_rng(opts.seed, STREAM_GPR_STARTS);
    let s = opts.n_starts;
    let mut starts = vec![[0.0f64; 3]; s];
    for dim in 0..3 {
        let mut strata: Vec<usize> = (0..s).collect();
        for i in (1..s).rev() {
            let j = rng.gen_range(0..=i);
            strata.swap(i, j);
        }
        for (k, start) in starts.iter_mut().enumerate() {
            let u: f64 = rng.gen();
            let frac = (strata[k] as f64 + u) / s as f64;
            start[dim] = lo[dim] + frac * (hi[dim] - lo[dim]);
        }
    }

    let runs: Vec<(f64, f64, [f64; 3], usize)> = starts
        .par_iter()
        .enumerate()
        .map(|(idx, start)| {
            let (theta, nll, grad_norm) = bfgs_minimize(&objective, *start, opts);
            (nll, grad_norm, theta, idx)
        })
        .collect();
    let best = runs
        .iter()
        .min_by(|a, b| (a.0, a.3).partial_cmp(&(b.0, b.3)).unwrap())
        .ok_or(GprError::CholeskyFailed)?;
    let theta = best.2;
    let hyper = GprHyperparams {
        lambda_sq: theta[0].exp(),
        tau_sq: theta[1].exp(),
        noise_var: theta[2].exp(),
    };
    let mut model = GprModel::from_centered(hyper, x.to_vec(), yc, m)?;
    model.fit_grad_norm = Some(best.1);
    Ok(model)
}

/// Negative log marginal likelihood and its gradient w.r.t. the log
/// hyperparameters (ln lambda^2, ln tau^2, ln sigma_eps^2).
struct LmlObjective<'a> {
    d2: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
}

/// Log-parameter box; outside it the objective is treated as infeasible.
const THETA_BOUNDS: (f64, f64) = (-40.0, 30.0);

impl LmlObjective<'_> {
    fn in_bounds(theta: &[f64; 3]) -> bool {
        theta
            .iter()
            .all(|t| (THETA_BOUNDS.0..=THETA_BOUNDS.1).contains(t))
    }

    fn chol(&self, theta: &[f64; 3]) -> Option<(Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)> {
        if !Self::in_bounds(theta) {
            return None;
        }
        let (lam2, tau2, sig2) = (theta[0].exp(), theta[1].exp(), theta[2].exp());
        let n = self.y.len();
        let mut e = DMatrix::zeros(n, n);
        for i in 0..n {
            e[(i, i)] = 1.0;
            for j in 0..i {
                let v = (-self.d2[(i, j)] / tau2).exp();
                e[(i, j)] = v;
                e[(j, i)] = v;
            }
        }
        let mut k = &e * lam2;
        for i in 0..n {
            k[(i, i)] += sig2;
        }
        cholesky_with_jitter(&k).map(|(c, _)| (c, e))
    }

    fn nll(&self, theta: &[f64; 3]) -> f64 {
        match self.chol(theta) {
            Some((chol, _)) => {
                let alpha = chol.solve(self.y);
                let n = self.y.len() as f64;
                let log_det: f64 = (0..self.y.len())
                    .map(|i| chol.l_dirty()[(i, i)].ln())
                    .sum();
                0.5 * self.y.dot(&alpha)
                    + log_det
                    + 0.5 * n * (2.0 * std::f64::consts::PI).ln()
            }
            None => f64::INFINITY,
        }
    }

    fn nll_grad(&self, theta: &[f64; 3]) -> (f64, [f64; 3]) {
        let Some((chol, e)) = self.chol(theta) else {
            return (f64::INFINITY, [0.0; 3]);
        };
        let n = self.y.len();
        let (lam2, tau2, sig2) = (theta[0].exp(), theta[1].exp(), theta[2].exp());
        let alpha = chol.solve(self.y);
        let log_det: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
        let nll = 0.5 * self.y.dot(&alpha)
            + log_det
            + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

        let k_inv = chol.inverse();
        // dNLL/dtheta_k = -0.5 tr((alpha alpha^T - K^-1) dK/dtheta_k)
        let mut g = [0.0f64; 3];
        for i in 0..n {
            for j in 0..n {
                let a = alpha[i] * alpha[j] - k_inv[(i, j)];
                let e_ij = e[(i, j)];
                // dK/d ln lam2 = lam2 E
                g[0] += a * lam2 * e_ij;
                // dK/d ln tau2 = lam2 E .* d2 / tau2
                g[1] += a * lam2 * e_ij * self.d2[(i, j)] / tau2;
                // dK/d ln sig2 = sig2 I
                if i == j {
                    g[2] += a * sig2;
                }
            }
        }
        (nll, [-0.5 * g[0], -0.5 * g[1], -0.5 * g[2]])
    }
}

/// Plain BFGS with Armijo backtracking on the 3-dim log-parameter space.
fn bfgs_minimize(obj: &LmlObjective, start: [f64; 3], opts: &FitOptions) -> ([f64; 3], f64, f64) {
    let mut theta = start;
    let (mut f, mut g) = obj.nll_grad(&theta);
    if !f.is_finite() {
        return (theta, f64::INFINITY, f64::INFINITY);
    }
    let mut h = [[0.0f64; 3]; 3];
    for (i, row) in h.iter_mut().enumerate() {
        row[i] = 1.0;
    }

    let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();

    for _ in 0..opts.max_iters {
        if norm(&g) < opts.grad_tol {
            break;
        }
        // d = -H g
        let mut d = [0.0f64; 3];
        for i in 0..3 {
            for j in 0..3 {
                d[i] -= h[i][j] * g[j];
            }
        }
        let mut slope: f64 = (0..3).map(|i| g[i] * d[i]).sum();
        if slope >= 0.0 {
            // reset to steepest descent
            for (i, row) in h.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if i == j { 1.0 } else { 0.0 };
                }
            }
            for i in 0..3 {
                d[i] = -g[i];
            }
            slope = -(norm(&g).powi(2));
        }

        // Armijo backtracking with an absolute noise floor: near the
        // optimum the true decrease falls below the rounding error of the
        // O(n)-sized objective, and the quasi-Newton step must still be
        // allowed through for the gradient to keep shrinking.
        let noise_floor = 1e-9 * (1.0 + f.abs());
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = [
                theta[0] + step * d[0],
                theta[1] + step * d[1],
                theta[2] + step * d[2],
            ];
            let fc = obj.nll(&cand);
            if fc.is_finite() && fc <= f + 1e-4 * step * slope + noise_floor {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, _)) = accepted else { break };
        let (fn_new, gn) = obj.nll_grad(&cand);

        let s = [cand[0] - theta[0], cand[1] - theta[1], cand[2] - theta[2]];
        let yv = [gn[0] - g[0], gn[1] - g[1], gn[2] - g[2]];
        let sy: f64 = (0..3).map(|i| s[i] * yv[i]).sum();
        if sy > 1e-12 {
            // H <- (I - s y^T / sy) H (I - y s^T / sy) + s s^T / sy
            let rho = 1.0 / sy;
            let mut hy = [0.0f64; 3];
            for i in 0..3 {
                for j in 0..3 {
                    hy[i] += h[i][j] * yv[j];
                }
            }
            let yhy: f64 = (0..3).map(|i| yv[i] * hy[i]).sum();
            let mut hn = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    hn[i][j] = h[i][j] - rho * (s[i] * hy[j] + hy[i] * s[j])
                        + rho * rho * yhy * s[i] * s[j]
                        + rho * s[i] * s[j];
                }
            }
            h = hn;
        }

        let step_size = norm(&s);
        theta = cand;
        f = fn_new;
        g = gn;
        if step_size < 1e-12 {
            break;
        }
    }
    (theta, f, norm(&g))
}
