//! Probability primitives: Normal and Beta distributions, their quantile
//! functions, and bivariate Gaussian-copula sampling.
//!
//! Everything is hand-rolled double-precision numerics: the normal CDF goes
//! through an erf Maclaurin series plus a Lentz continued fraction for the
//! tail, the quantile through Acklam's rational approximation polished by a
//! Halley step, and the regularized incomplete beta through the classic
//! continued fraction with the symmetry switch. The PRNG is ChaCha8
//! (`rand_chacha`), seeded from a single `u64`, so sample streams are
//! portable across platforms.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalParams {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta_shape: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopulaSpec {
    /// Pearson correlation of the underlying normals, |rho| < 1.
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

#[derive(Debug, Error, PartialEq)]
pub enum ProbError {
    #[error("probability {0} outside (0,1)")]
    ProbabilityOutOfRange(f64),
    #[error("invalid distribution parameter: {0}")]
    InvalidParameter(String),
}

/// Deterministic generator for one sampling task. `stream` separates
/// independent uses of the same master seed (profiles, scenarios, splits,
/// optimizer starts).
pub fn new_rng(seed: RngSeed, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    rng.set_stream(stream);
    rng
}

const FRAC_2_SQRT_PI: f64 = 1.128379167095512573896;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// erf by Maclaurin series; accurate and fast for |x| <= 2.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x2 / n as f64;
        let contrib = term / (2 * n + 1) as f64;
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    FRAC_2_SQRT_PI * sum
}

/// erfc for x >= 2 via the Laplace continued fraction
/// sqrt(pi) e^{x^2} erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
/// evaluated with the modified Lentz algorithm.
fn erfc_cf(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / x;
    let mut h = d;
    for i in 1..300 {
        let a = i as f64 / 2.0;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        h *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (-x * x).exp() * h / std::f64::consts::PI.sqrt()
}

fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        2.0 - erfc(-x)
    } else if x < 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal quantile: Acklam's rational approximation refined by one
/// Halley step against [`normal_cdf`]. Exact 0 at p = 0.5.
pub fn normal_inv_cdf(p: f64) -> Result<f64, ProbError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ProbError::ProbabilityOutOfRange(p));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    };

    // Halley refinement
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    Ok(x - u / (1.0 + x * u / 2.0))
}

/// ln Gamma via the Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = COEF[0];
        for (i, c) in COEF.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

/// Continued fraction for the incomplete beta (Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..400 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b), with the symmetry switch for
/// fast continued-fraction convergence.
pub fn beta_reg_inc(x: f64, params: &BetaParams) -> Result<f64, ProbError> {
    let (a, b) = (params.alpha, params.beta_shape);
    if a <= 0.0 || b <= 0.0 {
        return Err(ProbError::InvalidParameter(format!(
            "Beta shapes must be positive, got ({a}, {b})"
        )));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x >= 1.0 {
        return Ok(1.0);
    }
    let ln_bt = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(bt * beta_cf(a, b, x) / a)
    } else {
        Ok(1.0 - bt * beta_cf(b, a, 1.0 - x) / b)
    }
}

/// Beta quantile by Newton iteration with a bisection fallback whenever a
/// step would leave the bracket.
pub fn beta_inv_cdf(p: f64, params: &BetaParams) -> Result<f64, ProbError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ProbError::ProbabilityOutOfRange(p));
    }
    let (a, b) = (params.alpha, params.beta_shape);
    if a <= 0.0 || b <= 0.0 {
        return Err(ProbError::InvalidParameter(format!(
            "Beta shapes must be positive, got ({a}, {b})"
        )));
    }
    let ln_norm = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut x = a / (a + b);
    for _ in 0..200 {
        let f = beta_reg_inc(x, params)? - p;
        if f.abs() < 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let ln_pdf = ln_norm + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln();
        let pdf = ln_pdf.exp();
        let newton = x - f / pdf;
        x = if pdf > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-16 {
            break;
        }
    }
    Ok(x)
}

/// Draw `n` dependent uniform pairs from a Gaussian copula: independent
/// standard normals are correlated through the (closed-form) Cholesky
/// factor of the 2x2 correlation matrix, then mapped back through the
/// normal CDF.
pub fn sample_gaussian_copula(
    spec: &CopulaSpec,
    n: usize,
    seed: RngSeed,
) -> Result<Vec<(f64, f64)>, ProbError> {
    if !(spec.rho.abs() < 1.0) {
        return Err(ProbError::InvalidParameter(format!(
            "copula rho must satisfy |rho| < 1, got {}",
            spec.rho
        )));
    }
    let mut rng = new_rng(seed, STREAM_COPULA);
    let root = (1.0 - spec.rho * spec.rho).sqrt();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u1: f64 = rng.sample(Open01);
        let u2: f64 = rng.sample(Open01);
        let z1 = normal_inv_cdf(u1).expect("Open01 sample is interior");
        let z2 = normal_inv_cdf(u2).expect("Open01 sample is interior");
        let w2 = spec.rho * z1 + root * z2;
        out.push((u1, normal_cdf(w2)));
    }
    Ok(out)
}

/// RNG stream ids; one per independent sampling task.
pub const STREAM_COPULA: u64 = 1;
pub const STREAM_SCENARIOS: u64 = 2;
pub const STREAM_SPLIT: u64 = 3;
pub const STREAM_GPR_STARTS: u64 = 4;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn normal_cdf_at_zero_is_half() {
        assert_eq!(normal_cdf(0.0), 0.5);
    }

    #[test]
    fn normal_cdf_known_quantile() {
        assert_relative_eq!(normal_cdf(1.959964), 0.975, epsilon = 1e-6);
        assert_relative_eq!(normal_cdf(1.9599639845400542), 0.975, epsilon = 1e-12);
    }

    #[test]
    fn normal_cdf_symmetry() {
        for z in [-3.7, -1.2, -0.3, 0.4, 1.9, 4.1] {
            assert_relative_eq!(normal_cdf(-z), 1.0 - normal_cdf(z), epsilon = 1e-15);
        }
    }

    #[test]
    fn normal_inv_cdf_known_values() {
        assert_eq!(normal_inv_cdf(0.5).unwrap(), 0.0);
        assert_relative_eq!(normal_inv_cdf(0.975).unwrap(), 1.959964, epsilon = 1e-6);
        assert_relative_eq!(normal_inv_cdf(0.99).unwrap(), 2.326348, epsilon = 1e-6);
    }

    #[test]
    fn normal_inv_cdf_rejects_bounds() {
        assert!(normal_inv_cdf(0.0).is_err());
        assert!(normal_inv_cdf(1.0).is_err());
        assert!(normal_inv_cdf(-0.1).is_err());
    }

    #[test]
    fn normal_round_trip_grid() {
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let z = normal_inv_cdf(p).unwrap();
            assert!((normal_cdf(z) - p).abs() < 1e-10, "p={p}");
        }
    }

    #[test]
    fn beta_uniform_identity() {
        let params = BetaParams {
            alpha: 1.0,
            beta_shape: 1.0,
        };
        for p in [0.01, 0.25, 0.5, 0.9, 0.999] {
            assert_relative_eq!(beta_inv_cdf(p, &params).unwrap(), p, epsilon = 1e-12);
        }
    }

    #[test]
    fn beta_quantile_is_monotone() {
        let params = BetaParams {
            alpha: 15.0,
            beta_shape: 6.0,
        };
        let q50 = beta_inv_cdf(0.5, &params).unwrap();
        let q90 = beta_inv_cdf(0.9, &params).unwrap();
        assert!(q90 > q50);
    }

    #[test]
    fn beta_round_trip_grid() {
        for params in [
            BetaParams {
                alpha: 15.0,
                beta_shape: 6.0,
            },
            BetaParams {
                alpha: 2.0,
                beta_shape: 5.0,
            },
        ] {
            for i in 1..1000 {
                let p = i as f64 / 1000.0;
                let x = beta_inv_cdf(p, &params).unwrap();
                let back = beta_reg_inc(x, &params).unwrap();
                assert!((back - p).abs() < 1e-10, "p={p} params={params:?}");
            }
        }
    }

    #[test]
    fn copula_independent_case() {
        let pairs = sample_gaussian_copula(&CopulaSpec { rho: 0.0 }, 10_000, RngSeed(7)).unwrap();
        let r = normal_score_corr(&pairs);
        assert!(r.abs() < 0.03, "corr {r}");
    }

    #[test]
    fn copula_matches_requested_rho() {
        let pairs = sample_gaussian_copula(&CopulaSpec { rho: 0.15 }, 10_000, RngSeed(7)).unwrap();
        let r = normal_score_corr(&pairs);
        assert!((r - 0.15).abs() < 0.03, "corr {r}");
    }

    #[test]
    fn copula_comonotone_limit() {
        let pairs = sample_gaussian_copula(&CopulaSpec { rho: 0.999 }, 2_000, RngSeed(7)).unwrap();
        let rs = spearman(&pairs);
        assert!(rs > 0.99, "spearman {rs}");
    }

    #[test]
    fn copula_is_deterministic() {
        let a = sample_gaussian_copula(&CopulaSpec { rho: 0.15 }, 64, RngSeed(99)).unwrap();
        let b = sample_gaussian_copula(&CopulaSpec { rho: 0.15 }, 64, RngSeed(99)).unwrap();
        assert_eq!(a, b); // bit-identical
    }

    #[test]
    fn copula_marginals_are_uniform() {
        let pairs = sample_gaussian_copula(&CopulaSpec { rho: 0.15 }, 10_000, RngSeed(3)).unwrap();
        for pick in [0usize, 1] {
            let mut xs: Vec<f64> = pairs
                .iter()
                .map(|&(a, b)| if pick == 0 { a } else { b })
                .collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = xs.len() as f64;
            let ks = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let lo = (x - i as f64 / n).abs();
                    let hi = ((i + 1) as f64 / n - x).abs();
                    lo.max(hi)
                })
                .fold(0.0f64, f64::max);
            assert!(ks < 0.02, "KS statistic {ks} for marginal {pick}");
        }
    }

    #[test]
    fn copula_rejects_degenerate_rho() {
        assert!(sample_gaussian_copula(&CopulaSpec { rho: 1.0 }, 1, RngSeed(0)).is_err());
    }

    fn normal_score_corr(pairs: &[(f64, f64)]) -> f64 {
        let zs: Vec<(f64, f64)> = pairs
            .iter()
            .map(|&(u1, u2)| {
                (
                    normal_inv_cdf(u1).unwrap(),
                    normal_inv_cdf(u2).unwrap(),
                )
            })
            .collect();
        corr(&zs)
    }

    fn corr(pairs: &[(f64, f64)]) -> f64 {
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for &(x, y) in pairs {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        sxy / (sxx * syy).sqrt()
    }

    fn spearman(pairs: &[(f64, f64)]) -> f64 {
        let rank = |get: &dyn Fn(&(f64, f64)) -> f64| -> Vec<f64> {
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            idx.sort_by(|&a, &b| get(&pairs[a]).partial_cmp(&get(&pairs[b])).unwrap());
            let mut r = vec![0.0; pairs.len()];
            for (pos, &i) in idx.iter().enumerate() {
                r[i] = pos as f64;
            }
            r
        };
        let rx = rank(&|p| p.0);
        let ry = rank(&|p| p.1);
        let ranked: Vec<(f64, f64)> = rx.into_iter().zip(ry).collect();
        corr(&ranked)
    }
}
