//! Weighted hierarchical logistic model: packed parameterization, log
//! pseudo-posterior, per-unit scores, analytic gradients, finite-difference
//! Hessians, and prior curvature.
//!
//! The model is
//!
//! ```text
//! y_ij ~ Bernoulli(p_ij),   logit(p_ij) = X_ij β + α_j
//! β_k  ~ N(0, sd_k²)        α_j ~ N(0, σ_α²)        σ_α ~ half-normal(s)
//! ```
//!
//! and the objective is Σᵢ wᵢ ℓᵢ(θ) + log π(θ), with σ_α carried on the log
//! scale so every coordinate of θ = (β, α, log σ_α) is unconstrained. The
//! Jacobian of that reparameterization (`+ log σ_α`) is part of the prior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SurveyDataset;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Default per-coordinate finite-difference step factor: h = STEP·(1 + |θ_k|).
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Model parameters in unconstrained space, with a fixed packing order
/// (β, α₁..α_G, log σ_α) to and from a flat length-K vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub log_sigma_alpha: f64,
}

impl ParamVector {
    pub fn zeros(p: usize, g: usize) -> Self {
        ParamVector {
            beta: DVector::zeros(p),
            alpha: DVector::zeros(g),
            log_sigma_alpha: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.beta.len() + self.alpha.len() + 1
    }

    pub fn sigma_alpha(&self) -> f64 {
        self.log_sigma_alpha.exp()
    }

    pub fn pack(&self) -> DVector<f64> {
        let mut flat = DVector::zeros(self.dim());
        flat.rows_mut(0, self.beta.len()).copy_from(&self.beta);
        flat.rows_mut(self.beta.len(), self.alpha.len())
            .copy_from(&self.alpha);
        flat[self.dim() - 1] = self.log_sigma_alpha;
        flat
    }

    pub fn unpack(flat: &DVector<f64>, p: usize, g: usize) -> Result<Self> {
        if flat.len() != p + g + 1 {
            return Err(Error::dim("packed parameter vector", p + g + 1, flat.len()));
        }
        Ok(ParamVector {
            beta: flat.rows(0, p).into_owned(),
            alpha: flat.rows(p, g).into_owned(),
            log_sigma_alpha: flat[p + g],
        })
    }

    /// Column labels in packing order.
    pub fn names(covariate_names: &[String], g: usize) -> Vec<String> {
        let mut names: Vec<String> = covariate_names.iter().map(|c| format!("beta[{c}]")).collect();
        names.extend((1..=g).map(|j| format!("alpha[{j}]")));
        names.push("log_sigma_alpha".to_string());
        names
    }
}

/// Prior settings: independent normal priors on β (diagonal Σ) and a
/// half-normal hyperprior on σ_α.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSpec {
    pub beta_prior_sd: Vec<f64>,
    pub sigma_alpha_scale: f64,
}

impl PriorSpec {
    /// Same prior sd for every coefficient.
    pub fn uniform(p: usize, sd: f64) -> Result<Self> {
        let spec = PriorSpec {
            beta_prior_sd: vec![sd; p],
            sigma_alpha_scale: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_sigma_alpha_scale(mut self, scale: f64) -> Self {
        self.sigma_alpha_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &sd) in self.beta_prior_sd.iter().enumerate() {
            if !(sd.is_finite() && sd > 0.0) {
                return Err(Error::Invalid(format!("beta_prior_sd[{k}] = {sd} must be positive")));
            }
        }
        if !(self.sigma_alpha_scale.is_finite() && self.sigma_alpha_scale > 0.0) {
            return Err(Error::Invalid(format!(
                "sigma_alpha_scale = {} must be positive",
                self.sigma_alpha_scale
            )));
        }
        Ok(())
    }
}

fn check_dims(theta: &ParamVector, data: &SurveyDataset) -> Result<()> {
    if theta.beta.len() != data.n_covariates() {
        return Err(Error::dim("beta", data.n_covariates(), theta.beta.len()));
    }
    if theta.alpha.len() != data.n_groups() {
        return Err(Error::dim("alpha", data.n_groups(), theta.alpha.len()));
    }
    Ok(())
}

fn check_prior_dims(theta: &ParamVector, prior: &PriorSpec) -> Result<()> {
    if prior.beta_prior_sd.len() != theta.beta.len() {
        return Err(Error::dim("beta_prior_sd", theta.beta.len(), prior.beta_prior_sd.len()));
    }
    Ok(())
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, stable in both tails.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn linear_predictor(theta: &ParamVector, data: &SurveyDataset, i: usize) -> f64 {
    let mut eta = theta.alpha[data.group()[i]];
    let x = data.x();
    for k in 0..x.ncols() {
        eta += x[(i, k)] * theta.beta[k];
    }
    eta
}

/// Weighted Bernoulli-logit log-likelihood Σᵢ wᵢ ℓᵢ(θ) (no prior).
pub fn log_weighted_likelihood(theta: &ParamVector, data: &SurveyDataset) -> Result<f64> {
    check_dims(theta, data)?;
    let mut acc = 0.0;
    for i in 0..data.n() {
        let eta = linear_predictor(theta, data, i);
        acc += data.weights()[i] * (data.y()[i] * eta - softplus(eta));
    }
    Ok(acc)
}

/// log π(θ): β prior, α | σ_α terms, half-normal hyperprior on σ_α, and the
/// log-scale Jacobian.
pub fn log_prior(theta: &ParamVector, prior: &PriorSpec) -> Result<f64> {
    check_prior_dims(theta, prior)?;
    let t = theta.log_sigma_alpha;
    let sigma = t.exp();
    let mut lp = 0.0;
    for (k, &sd) in prior.beta_prior_sd.iter().enumerate() {
        let z = theta.beta[k] / sd;
        lp += -0.5 * z * z - sd.ln() - 0.5 * LN_2PI;
    }
    for j in 0..theta.alpha.len() {
        let z = theta.alpha[j] / sigma;
        lp += -0.5 * z * z - t - 0.5 * LN_2PI;
    }
    let s = prior.sigma_alpha_scale;
    lp += 0.5 * (2.0 / std::f64::consts::PI).ln() - s.ln() - sigma * sigma / (2.0 * s * s);
    lp += t; // Jacobian of σ_α = exp(t)
    Ok(lp)
}

/// Survey-weighted log pseudo-posterior Σᵢ wᵢ ℓᵢ(θ) + log π(θ).
pub fn log_pseudo_posterior(theta: &ParamVector, data: &SurveyDataset, prior: &PriorSpec) -> Result<f64> {
    let lik = log_weighted_likelihood(theta, data)?;
    if !lik.is_finite() {
        return Err(Error::NonFinite("weighted log-likelihood".into()));
    }
    let pri = log_prior(theta, prior)?;
    if !pri.is_finite() {
        return Err(Error::NonFinite("log prior".into()));
    }
    Ok(lik + pri)
}

/// Per-unit likelihood score matrix (n × K): row i is ∂ℓᵢ/∂θ with no weight
/// and no prior. The β block is (yᵢ − pᵢ)·Xᵢ, the α block has (yᵢ − pᵢ) in the
/// unit's group column, and the log σ_α column is zero (σ_α enters only
/// through the prior).
pub fn unit_scores(theta: &ParamVector, data: &SurveyDataset) -> Result<DMatrix<f64>> {
    check_dims(theta, data)?;
    let n = data.n();
    let p = data.n_covariates();
    let g = data.n_groups();
    let mut scores = DMatrix::zeros(n, p + g + 1);
    let x = data.x();
    for i in 0..n {
        let resid = data.y()[i] - expit(linear_predictor(theta, data, i));
        for k in 0..p {
            scores[(i, k)] = resid * x[(i, k)];
        }
        scores[(i, p + data.group()[i])] = resid;
    }
    Ok(scores)
}

/// Gradient of the weighted log-likelihood (no prior), length K.
pub fn grad_weighted_likelihood(theta: &ParamVector, data: &SurveyDataset) -> Result<DVector<f64>> {
    check_dims(theta, data)?;
    let p = data.n_covariates();
    let g = data.n_groups();
    let mut grad = DVector::zeros(p + g + 1);
    let x = data.x();
    for i in 0..data.n() {
        let r = data.weights()[i] * (data.y()[i] - expit(linear_predictor(theta, data, i)));
        for k in 0..p {
            grad[k] += r * x[(i, k)];
        }
        grad[p + data.group()[i]] += r;
    }
    Ok(grad)
}

/// Gradient of log π(θ), length K.
pub fn grad_log_prior(theta: &ParamVector, prior: &PriorSpec) -> Result<DVector<f64>> {
    check_prior_dims(theta, prior)?;
    let p = theta.beta.len();
    let g = theta.alpha.len();
    let sigma = theta.sigma_alpha();
    let sigma2 = sigma * sigma;
    let mut grad = DVector::zeros(p + g + 1);
    for k in 0..p {
        let sd = prior.beta_prior_sd[k];
        grad[k] = -theta.beta[k] / (sd * sd);
    }
    let mut sum_a2 = 0.0;
    for j in 0..g {
        grad[p + j] = -theta.alpha[j] / sigma2;
        sum_a2 += theta.alpha[j] * theta.alpha[j];
    }
    let s2 = prior.sigma_alpha_scale * prior.sigma_alpha_scale;
    grad[p + g] = sum_a2 / sigma2 - g as f64 - sigma2 / s2 + 1.0;
    Ok(grad)
}

/// Gradient of the log pseudo-posterior: weighted column sums of the unit
/// scores plus the analytic prior gradient.
pub fn grad_log_pseudo_posterior(
    theta: &ParamVector,
    data: &SurveyDataset,
    prior: &PriorSpec,
) -> Result<DVector<f64>> {
    let mut grad = grad_weighted_likelihood(theta, data)?;
    grad += grad_log_prior(theta, prior)?;
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient of log pseudo-posterior".into()));
    }
    Ok(grad)
}

/// Symmetrized central-difference Jacobian of a gradient function: entry-wise
/// (∂g/∂θ + transpose)/2 with per-coordinate step `step·(1 + |θ_k|)`.
///
/// This estimates a Hessian when `grad_fn` is a gradient; callers negate to
/// form −H estimates.
pub fn hessian_fd<F>(grad_fn: F, theta: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step {step} must be positive")));
    }
    let k = theta.len();
    let mut jac = DMatrix::zeros(k, k);
    let mut point = theta.clone();
    for c in 0..k {
        let h = step * (1.0 + theta[c].abs());
        point[c] = theta[c] + h;
        let plus = grad_fn(&point)?;
        point[c] = theta[c] - h;
        let minus = grad_fn(&point)?;
        point[c] = theta[c];
        for r in 0..k {
            jac[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    let sym = (&jac + jac.transpose()) * 0.5;
    for r in 0..k {
        for c in 0..k {
            if !sym[(r, c)].is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite-difference Hessian entry ({r}, {c})"
                )));
            }
        }
    }
    Ok(sym)
}

/// Prior curvature H⁰ = −∇² log π(θ). The normal β prior and the α | σ_α
/// terms are differentiated analytically; the σ_α hyperprior block (including
/// the log-scale Jacobian) uses a central second difference.
pub fn prior_curvature(theta: &ParamVector, prior: &PriorSpec) -> Result<DMatrix<f64>> {
    check_prior_dims(theta, prior)?;
    let p = theta.beta.len();
    let g = theta.alpha.len();
    let k = p + g + 1;
    let t = theta.log_sigma_alpha;
    let sigma2 = (2.0 * t).exp();
    let mut h0 = DMatrix::zeros(k, k);
    for j in 0..p {
        let sd = prior.beta_prior_sd[j];
        h0[(j, j)] = 1.0 / (sd * sd);
    }
    let mut sum_a2 = 0.0;
    for j in 0..g {
        let a = theta.alpha[j];
        h0[(p + j, p + j)] = 1.0 / sigma2;
        h0[(p + j, k - 1)] = -2.0 * a / sigma2;
        h0[(k - 1, p + j)] = -2.0 * a / sigma2;
        sum_a2 += a * a;
    }
    h0[(k - 1, k - 1)] = 2.0 * sum_a2 / sigma2;

    // hyperprior contribution by finite differences; the log-scale Jacobian
    // is linear in t and contributes no curvature, so it stays out of the
    // differenced function
    let s = prior.sigma_alpha_scale;
    let f = |t: f64| -> f64 { -(2.0 * t).exp() / (2.0 * s * s) };
    let h = 1e-4 * (1.0 + t.abs());
    let second = (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h);
    h0[(k - 1, k - 1)] += -second;

    if h0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prior curvature".into()));
    }
    Ok(h0)
}

/// Options for [`find_mode`] and [`maximize`].
#[derive(Debug, Clone)]
pub struct ModeOptions {
    /// Convergence when ‖∇‖ ≤ grad_tol_per_dim · K.
    pub grad_tol_per_dim: f64,
    pub max_iter: usize,
}

impl Default for ModeOptions {
    fn default() -> Self {
        ModeOptions {
            grad_tol_per_dim: 1e-6,
            max_iter: 500,
        }
    }
}

/// Quasi-Newton (BFGS) maximization with backtracking line search.
pub fn maximize<F, G>(f: F, grad: G, init: &DVector<f64>, opts: &ModeOptions) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
    G: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let k = init.len();
    let tol = opts.grad_tol_per_dim * k as f64;
    let mut x = init.clone();
    let mut fx = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite("objective at initial point".into()));
    }
    let mut g = grad(&x)?;
    let mut h_inv = DMatrix::<f64>::identity(k, k);
    for _ in 0..opts.max_iter {
        if g.norm() <= tol {
            return Ok(x);
        }
        let mut dir = &h_inv * &g;
        if dir.dot(&g) <= 0.0 {
            // stale curvature estimate; restart from steepest ascent
            h_inv = DMatrix::identity(k, k);
            dir = g.clone();
        }
        let mut step = 1.0;
        let slope = dir.dot(&g);
        let mut x_new = &x + &dir * step;
        let mut f_new = f(&x_new).unwrap_or(f64::NEG_INFINITY);
        let mut halvings = 0;
        while !(f_new.is_finite() && f_new >= fx + 1e-4 * step * slope) {
            step *= 0.5;
            halvings += 1;
            if halvings > 60 {
                break;
            }
            x_new = &x + &dir * step;
            f_new = f(&x_new).unwrap_or(f64::NEG_INFINITY);
        }
        if halvings > 60 {
            // no ascent direction found; report where we stopped
            return Err(Error::NoConvergence {
                iterations: opts.max_iter,
                grad_norm: g.norm(),
                best: x.iter().cloned().collect(),
            });
        }
        let g_new = grad(&x_new)?;
        let s = &x_new - &x;
        let yv = &g - &g_new; // gradient of -f increases along s
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            // BFGS update of the inverse Hessian of -f
            let rho = 1.0 / sy;
            let hy = &h_inv * &yv;
            let yhy = yv.dot(&hy);
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            h_inv = h_inv - (&hys + hys.transpose()) * rho + ss * (rho * (1.0 + rho * yhy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    if g.norm() <= tol {
        return Ok(x);
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        grad_norm: g.norm(),
        best: x.iter().cloned().collect(),
    })
}

/// Local maximizer of the log pseudo-posterior with ‖∇‖ ≤ 1e-6·K, by BFGS
/// with backtracking. Hierarchical targets may have no joint mode (the
/// density is unbounded along σ_α → 0 ridges); in that case the iteration
/// stops at `max_iter` and the error carries the best iterate.
pub fn find_mode(data: &SurveyDataset, prior: &PriorSpec, init: &ParamVector) -> Result<ParamVector> {
    find_mode_with(data, prior, init, &ModeOptions::default())
}

pub fn find_mode_with(
    data: &SurveyDataset,
    prior: &PriorSpec,
    init: &ParamVector,
    opts: &ModeOptions,
) -> Result<ParamVector> {
    check_dims(init, data)?;
    check_prior_dims(init, prior)?;
    let p = data.n_covariates();
    let g = data.n_groups();
    let f = |flat: &DVector<f64>| -> Result<f64> {
        log_pseudo_posterior(&ParamVector::unpack(flat, p, g)?, data, prior)
    };
    let gr = |flat: &DVector<f64>| -> Result<DVector<f64>> {
        grad_log_pseudo_posterior(&ParamVector::unpack(flat, p, g)?, data, prior)
    };
    let flat = maximize(f, gr, &init.pack(), opts)?;
    ParamVector::unpack(&flat, p, g)
}
