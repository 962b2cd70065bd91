//! Closed-form expectations of the penalized maximum and their Monte-Carlo
//! checks.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::ensemble::PenaltyMode;
use crate::error::{Error, Result};
use crate::seed::{indexed_seed, rng_from};
use crate::simenv::Estimate;

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
const D: [f64; 4] = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00];
const P_LOW: f64 = 0.02425;

fn tail(q: f64) -> f64 {
    (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
        / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
}

/// Inverse standard normal CDF by Acklam's rational approximation: a central
/// rational function in `(p - 1/2)^2` on `[0.02425, 0.97575]` and a rational
/// function in `sqrt(-2 ln p)` in each tail. Relative error is below 1.2e-9.
pub fn inv_norm_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("inverse normal CDF needs p in (0, 1), got {p}")));
    }
    Ok(if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    })
}

fn check_args(n: usize, sigma: f64) -> Result<()> {
    if n < 1 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    Ok(())
}

/// `C0 = Φ⁻¹((n - 0.375) / (n + 0.25))`.
pub fn blom_constant(n: usize) -> Result<f64> {
    check_args(n, 0.0)?;
    let n = n as f64;
    inv_norm_cdf((n - 0.375) / (n + 0.25))
}

/// Blom approximation of the expected maximum of `n` iid `N(μ, σ²)` draws.
pub fn blom_expected_max(n: usize, mu: f64, sigma: f64) -> Result<f64> {
    check_args(n, sigma)?;
    Ok(mu + sigma * blom_constant(n)?)
}

/// Expected maximum after penalizing by `λσ` (subtractive) or `1/(1+λσ)`
/// (multiplicative).
pub fn expected_penalized(n: usize, mu: f64, sigma: f64, lambda: f64, mode: PenaltyMode) -> Result<f64> {
    check_args(n, sigma)?;
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    let c0 = blom_constant(n)?;
    Ok(match mode {
        PenaltyMode::None => mu + sigma * c0,
        PenaltyMode::PSub => mu + (c0 - lambda) * sigma,
        PenaltyMode::PMul => (mu + sigma * c0) / (1.0 + lambda * sigma),
    })
}

/// Extra discount mass `2γW / (1 - γW)²`.
pub fn absorbed_discount(gamma: f64, w: f64) -> Result<f64> {
    let g = gamma * w;
    if !(0.0..1.0).contains(&g) {
        return Err(Error::Domain(format!("need 0 <= gamma*W < 1, got {g}")));
    }
    Ok(2.0 * g / ((1.0 - g) * (1.0 - g)))
}

/// Mean of the maximum of `n` draws of `N(μ, σ²)` over `trials` trials.
pub fn monte_carlo_max(n: usize, mu: f64, sigma: f64, trials: usize, seed: u64) -> Result<Estimate> {
    check_args(n, sigma)?;
    if trials < 2 {
        return Err(Error::Config("need at least 2 Monte-Carlo trials".into()));
    }
    let mut rng = rng_from(seed);
    let maxima: Vec<f64> = (0..trials)
        .map(|_| {
            let mut m = f64::NEG_INFINITY;
            for _ in 0..n {
                m = m.max(rng.sample::<f64, _>(StandardNormal));
            }
            mu + sigma * m
        })
        .collect();
    Ok(Estimate::from_samples(&maxima))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyAnalysisRow {
    pub n: usize,
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub expected_max_blom: f64,
    pub expected_psub: f64,
    pub expected_pmul: f64,
    pub monte_carlo_max: Estimate,
    /// Monte-Carlo `E[max xᵢ / (1 + λσ)]`, from the same draws.
    pub monte_carlo_pmul: Estimate,
}

pub const PENALTY_ANALYSIS_HEADER: &str =
    "n,mu,sigma,lambda,expected_max_blom,expected_psub,expected_pmul,mc_max,mc_max_se,mc_pmul,mc_pmul_se,mc_trials";

/// Rows for every `(n, λ)`; Monte-Carlo draws are shared across `λ` for a given `n`.
pub fn penalty_analysis(
    n_list: &[usize],
    mu: f64,
    sigma: f64,
    lambdas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<PenaltyAnalysisRow>> {
    let mut rows = Vec::new();
    for &n in n_list {
        let mc = monte_carlo_max(n, mu, sigma, trials, indexed_seed(seed, n as u64))?;
        for &lambda in lambdas {
            let scale = 1.0 / (1.0 + lambda * sigma);
            rows.push(PenaltyAnalysisRow {
                n,
                mu,
                sigma,
                lambda,
                expected_max_blom: blom_expected_max(n, mu, sigma)?,
                expected_psub: expected_penalized(n, mu, sigma, lambda, PenaltyMode::PSub)?,
                expected_pmul: expected_penalized(n, mu, sigma, lambda, PenaltyMode::PMul)?,
                monte_carlo_max: mc,
                monte_carlo_pmul: Estimate { mean: mc.mean * scale, std_err: mc.std_err * scale, n: mc.n },
            });
        }
    }
    Ok(rows)
}

pub fn penalty_analysis_csv(rows: &[PenaltyAnalysisRow]) -> String {
    let mut s = format!("{PENALTY_ANALYSIS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.n,
            r.mu,
            r.sigma,
            r.lambda,
            r.expected_max_blom,
            r.expected_psub,
            r.expected_pmul,
            r.monte_carlo_max.mean,
            r.monte_carlo_max.std_err,
            r.monte_carlo_pmul.mean,
            r.monte_carlo_pmul.std_err,
            r.monte_carlo_max.n
        );
    }
    s
}

pub const ABSORBED_HEADER: &str = "gamma,w,absorbed";

pub fn absorbed_discount_csv(pairs: &[(f64, f64)]) -> Result<String> {
    let mut s = format!("{ABSORBED_HEADER}\n");
    for &(g, w) in pairs {
        let _ = writeln!(s, "{g},{w},{}", absorbed_discount(g, w)?);
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyRow {
    pub index: usize,
    pub x: f64,
    pub uncertainty: f64,
    pub lambda: f64,
    pub p_sub: f64,
    pub p_mul: f64,
}

pub const TOY_HEADER: &str = "index,x,uncertainty,lambda,p_sub,p_mul";

/// Sorted Gaussian draws with per-point uncertainty `|xᵢ - mean|`, penalized
/// both ways for every `λ`.
pub fn penalty_toy(n_points: usize, mu: f64, sigma: f64, lambdas: &[f64], seed: u64) -> Result<Vec<ToyRow>> {
    if n_points < 2 {
        return Err(Error::Config("penalty toy needs at least 2 points".into()));
    }
    check_args(1, sigma)?;
    let mut rng = rng_from(seed);
    let mut xs: Vec<f64> = (0..n_points).map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    xs.sort_by(f64::total_cmp);
    let mean = xs.iter().sum::<f64>() / n_points as f64;
    let mut rows = Vec::with_capacity(n_points * lambdas.len());
    for &lambda in lambdas {
        for (index, &x) in xs.iter().enumerate() {
            let u = (x - mean).abs();
            rows.push(ToyRow { index, x, uncertainty: u, lambda, p_sub: x - lambda * u, p_mul: x / (1.0 + lambda * u) });
        }
    }
    Ok(rows)
}

pub fn penalty_toy_csv(rows: &[ToyRow]) -> String {
    let mut s = format!("{TOY_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.index, r.x, r.uncertainty, r.lambda, r.p_sub, r.p_mul);
    }
    s
}
