//! Yeo-Johnson transformation toward marginal normality, and the adjustment
//! variant that operates in the transformed space.
//!
//! Each parameter column gets its own exponent λ fitted by profile likelihood.
//! Draws are mapped to η-space, the curvature there is taken from the inverse
//! of the posterior sample covariance (curvature at a point is a poor spread
//! estimate for skewed marginals), the replication score variance is mapped
//! through the chain-rule matrix G, the affine adjustment runs in η-space, and
//! the result is mapped back.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::SurveyDataset;
use crate::error::{Error, Result};
use crate::model::{prior_curvature, ParamVector, PriorSpec};
use crate::replication::{estimate_j, ReplicateDesign};
use crate::sampler::{column_means, sample_cov};
use crate::sandwich::{apply_adjustment, AdjustmentResult, CurvatureSet, Variant};

/// ψ(λ, x): the four-branch piecewise power transform, defined for all real
/// x, with log branches at λ = 0 (x ≥ 0) and λ = 2 (x < 0) where the general
/// formula degenerates. Strictly increasing in x for every λ.
pub fn yj_forward(lambda: f64, x: f64) -> Result<f64> {
    if !lambda.is_finite() || !x.is_finite() {
        return Err(Error::NonFinite("yj_forward input".into()));
    }
    let v = if x >= 0.0 {
        if lambda == 0.0 {
            x.ln_1p()
        } else {
            let e = lambda * x.ln_1p();
            if e > 700.0 {
                return Err(Error::NonFinite(format!(
                    "yj_forward overflow at lambda = {lambda}, x = {x}"
                )));
            }
            e.exp_m1() / lambda
        }
    } else {
        let two_ml = 2.0 - lambda;
        if two_ml == 0.0 {
            -(-x).ln_1p()
        } else {
            let e = two_ml * (-x).ln_1p();
            if e > 700.0 {
                return Err(Error::NonFinite(format!(
                    "yj_forward overflow at lambda = {lambda}, x = {x}"
                )));
            }
            -e.exp_m1() / two_ml
        }
    };
    Ok(v)
}

/// Range of ψ(λ, ·): η must stay inside (lo, hi) for the inverse to exist.
/// For λ < 0 the image is bounded above by −1/λ; for λ > 2 it is bounded
/// below by −1/(λ − 2).
pub fn yj_domain(lambda: f64) -> (f64, f64) {
    let lo = if lambda > 2.0 {
        1.0 / (2.0 - lambda)
    } else {
        f64::NEG_INFINITY
    };
    let hi = if lambda < 0.0 { -1.0 / lambda } else { f64::INFINITY };
    (lo, hi)
}

/// Exact piecewise inverse: ψ(λ, ψ⁻¹(λ, η)) = η.
pub fn yj_inverse(lambda: f64, eta: f64) -> Result<f64> {
    if !lambda.is_finite() || !eta.is_finite() {
        return Err(Error::NonFinite("yj_inverse input".into()));
    }
    let v = if eta >= 0.0 {
        if lambda == 0.0 {
            eta.exp_m1()
        } else {
            let u = lambda * eta;
            if u <= -1.0 {
                return Err(Error::Domain {
                    what: format!("yj_inverse (lambda = {lambda}, positive branch)"),
                    value: eta,
                });
            }
            (u.ln_1p() / lambda).exp_m1()
        }
    } else {
        let two_ml = 2.0 - lambda;
        if two_ml == 0.0 {
            -(-eta).exp_m1()
        } else {
            let u = -two_ml * eta;
            if u <= -1.0 {
                return Err(Error::Domain {
                    what: format!("yj_inverse (lambda = {lambda}, negative branch)"),
                    value: eta,
                });
            }
            -(u.ln_1p() / two_ml).exp_m1()
        }
    };
    if !v.is_finite() {
        return Err(Error::NonFinite(format!(
            "yj_inverse overflow at lambda = {lambda}, eta = {eta}"
        )));
    }
    Ok(v)
}

/// ∂ψ⁻¹/∂η by central differences with step 1e-6·(1 + |η|). Errors if η sits
/// too close to the boundary of the range for the stencil to fit.
pub fn yj_inverse_deriv(lambda: f64, eta: f64) -> Result<f64> {
    let h = 1e-6 * (1.0 + eta.abs());
    let boundary = |_e: Error| Error::Domain {
        what: format!("yj_inverse_deriv (lambda = {lambda}, boundary proximity)"),
        value: eta,
    };
    let plus = yj_inverse(lambda, eta + h).map_err(boundary)?;
    let minus = yj_inverse(lambda, eta - h).map_err(boundary)?;
    let d = (plus - minus) / (2.0 * h);
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::NonFinite(format!(
            "yj_inverse_deriv at lambda = {lambda}, eta = {eta}"
        )));
    }
    Ok(d)
}

/// Normality profile log-likelihood of the transformed values:
/// −(M/2)·log Var(ψ(λ, x)) + (λ−1)·Σ sign(xᵢ)·log(|xᵢ|+1).
fn profile_loglik(lambda: f64, values: &[f64], jacobian_sum: f64) -> f64 {
    let m = values.len() as f64;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for &x in values {
        let t = match yj_forward(lambda, x) {
            Ok(v) if v.is_finite() => v,
            _ => return f64::NEG_INFINITY,
        };
        sum += t;
        sumsq += t * t;
    }
    let mean = sum / m;
    let var = (sumsq / m - mean * mean).max(0.0);
    if var <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -0.5 * m * var.ln() + (lambda - 1.0) * jacobian_sum
}

const LAMBDA_RANGE: (f64, f64) = (-3.0, 5.0);

/// λ maximizing the normality profile log-likelihood, by a coarse scan over
/// [−3, 5] followed by golden-section refinement to 1e-4.
pub fn fit_lambda(column: &[f64]) -> Result<f64> {
    fit_lambda_in(column, LAMBDA_RANGE)
}

fn fit_lambda_in(column: &[f64], range: (f64, f64)) -> Result<f64> {
    if column.len() < 50 {
        return Err(Error::Invalid(format!(
            "fit_lambda needs at least 50 values, got {}",
            column.len()
        )));
    }
    let (min, max) = column
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(max > min) {
        return Err(Error::Invalid("fit_lambda: column is constant".into()));
    }
    let jac: f64 = column.iter().map(|&x| x.signum() * x.abs().ln_1p()).sum();
    let ll = |lambda: f64| profile_loglik(lambda, column, jac);

    // coarse scan to bracket the optimum, then golden section inside
    let (lo, hi) = range;
    let n_scan = 33;
    let scan_step = (hi - lo) / (n_scan - 1) as f64;
    let mut best = (f64::NEG_INFINITY, lo);
    for i in 0..n_scan {
        let l = lo + i as f64 * scan_step;
        let v = ll(l);
        if v > best.0 {
            best = (v, l);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return Err(Error::NonFinite("yeo-johnson profile likelihood".into()));
    }
    let mut a = (best.1 - scan_step).max(lo);
    let mut b = (best.1 + scan_step).min(hi);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = ll(c);
    let mut fd = ll(d);
    while b - a > 1e-4 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = ll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = ll(d);
        }
    }
    Ok(0.5 * (a + b))
}

/// Chain-rule matrix G(η̄): the outer product d dᵀ of the inverse-transform
/// derivatives d_k = ∂ψ⁻¹(η̄_k)/∂η. Rank one, symmetric, strictly positive.
pub fn build_g(lambda: &[f64], eta_bar: &[f64]) -> Result<DMatrix<f64>> {
    if lambda.len() != eta_bar.len() {
        return Err(Error::dim("build_g", lambda.len(), eta_bar.len()));
    }
    let d: Vec<f64> = lambda
        .iter()
        .zip(eta_bar)
        .map(|(&l, &e)| yj_inverse_deriv(l, e))
        .collect::<Result<Vec<f64>>>()?;
    let k = d.len();
    Ok(DMatrix::from_fn(k, k, |r, c| d[r] * d[c]))
}

/// Per-column Yeo-Johnson exponents fitted to a draw matrix.
#[derive(Debug, Clone)]
pub struct YjTransform {
    pub lambda: Vec<f64>,
    /// Fingerprint of the draw set the exponents were fitted on.
    pub fitted_on: u64,
}

fn fingerprint(draws: &DMatrix<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    draws.nrows().hash(&mut h);
    draws.ncols().hash(&mut h);
    for j in 0..draws.ncols() {
        draws[(0, j)].to_bits().hash(&mut h);
        draws[(draws.nrows() - 1, j)].to_bits().hash(&mut h);
    }
    h.finish()
}

impl YjTransform {
    pub fn fit(draws: &DMatrix<f64>) -> Result<Self> {
        let columns: Vec<Vec<f64>> = (0..draws.ncols())
            .map(|j| draws.column(j).iter().cloned().collect())
            .collect();
        let lambda: Result<Vec<f64>> = columns.par_iter().map(|c| fit_lambda(c)).collect();
        Ok(YjTransform {
            lambda: lambda?,
            fitted_on: fingerprint(draws),
        })
    }

    pub fn with_lambda(lambda: Vec<f64>, draws: &DMatrix<f64>) -> Self {
        YjTransform {
            lambda,
            fitted_on: fingerprint(draws),
        }
    }

    pub fn forward_matrix(&self, draws: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(draws)?;
        let mut out = DMatrix::zeros(draws.nrows(), draws.ncols());
        for j in 0..draws.ncols() {
            let l = self.lambda[j];
            for i in 0..draws.nrows() {
                out[(i, j)] = yj_forward(l, draws[(i, j)])?;
            }
        }
        Ok(out)
    }

    /// Inverse transform of a matrix of η values. Values outside the finite
    /// range of ψ⁻¹ are clamped to the boundary minus 1e-8 and counted.
    pub fn inverse_matrix(&self, eta: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
        self.check_dim(eta)?;
        let mut out = DMatrix::zeros(eta.nrows(), eta.ncols());
        let mut clamped = 0usize;
        for j in 0..eta.ncols() {
            let l = self.lambda[j];
            let (lo, hi) = yj_domain(l);
            for i in 0..eta.nrows() {
                let mut e = eta[(i, j)];
                if e <= lo {
                    e = lo + 1e-8;
                    clamped += 1;
                } else if e >= hi {
                    e = hi - 1e-8;
                    clamped += 1;
                }
                out[(i, j)] = yj_inverse(l, e)?;
            }
        }
        Ok((out, clamped))
    }

    pub fn inverse_point(&self, eta: &DVector<f64>) -> Result<DVector<f64>> {
        if eta.len() != self.lambda.len() {
            return Err(Error::dim("eta", self.lambda.len(), eta.len()));
        }
        let vals: Result<Vec<f64>> = eta
            .iter()
            .zip(&self.lambda)
            .map(|(&e, &l)| yj_inverse(l, e))
            .collect();
        Ok(DVector::from_vec(vals?))
    }

    pub fn g_matrix(&self, eta_bar: &DVector<f64>) -> Result<DMatrix<f64>> {
        build_g(&self.lambda, eta_bar.as_slice())
    }

    fn check_dim(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.ncols() != self.lambda.len() {
            return Err(Error::dim("transform columns", self.lambda.len(), m.ncols()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct YjOptions {
    /// Skip fitting and use these exponents (one per column, or one value
    /// broadcast to all columns).
    pub lambda_override: Option<Vec<f64>>,
    /// Add H⁰ after mapping J to η-space instead of before (the default adds
    /// it in θ-space and maps the sum through G).
    pub h0_in_eta: bool,
}

/// The Yeo-Johnson adjustment: fit λ per column, transform, adjust with
/// H_η = Cov(η-draws)⁻¹ and J*_η = (J + H⁰) ∘ G(η̄), and transform back.
pub fn yj_adjust(
    draws: &DMatrix<f64>,
    data: &SurveyDataset,
    prior: &PriorSpec,
    design: &ReplicateDesign,
) -> Result<AdjustmentResult> {
    yj_adjust_with(draws, data, prior, design, &YjOptions::default())
}

pub fn yj_adjust_with(
    draws: &DMatrix<f64>,
    data: &SurveyDataset,
    prior: &PriorSpec,
    design: &ReplicateDesign,
    opts: &YjOptions,
) -> Result<AdjustmentResult> {
    let k = draws.ncols();
    let transform = match &opts.lambda_override {
        Some(l) if l.len() == 1 => YjTransform::with_lambda(vec![l[0]; k], draws),
        Some(l) if l.len() == k => YjTransform::with_lambda(l.clone(), draws),
        Some(l) => return Err(Error::dim("lambda_override", k, l.len())),
        None => YjTransform::fit(draws)?,
    };

    let eta = transform.forward_matrix(draws)?;
    let eta_bar = column_means(&eta);
    let theta_bar = transform.inverse_point(&eta_bar)?;

    // curvature in eta-space from the posterior sample itself
    let cov_eta = sample_cov(&eta)?;
    let h_eta = invert_spd(&cov_eta)?;

    let p = data.n_covariates();
    let g = data.n_groups();
    let theta_hat = ParamVector::unpack(&theta_bar, p, g)?;
    let j_est = estimate_j(&theta_hat, data, design)?;
    let h0 = prior_curvature(&theta_hat, prior)?;
    let g_mat = transform.g_matrix(&eta_bar)?;
    let j_used = if opts.h0_in_eta {
        j_est.matrix.component_mul(&g_mat) + &h0
    } else {
        (&j_est.matrix + &h0).component_mul(&g_mat)
    };

    let curv = CurvatureSet {
        variant: Variant::YeoJohnson,
        h: h_eta.clone(),
        h0,
        j: j_est.matrix,
        h_used: h_eta,
        j_used,
        j_rank: j_est.rank,
    };
    let adj_eta = apply_adjustment(&eta, &curv)?;
    let (adjusted_theta, clamp_count) = transform.inverse_matrix(&adj_eta.adjusted_draws)?;

    // design effects on the original scale
    let var = |m: &DMatrix<f64>, j: usize| {
        let mu = m.column(j).sum() / m.nrows() as f64;
        m.column(j).iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m.nrows() - 1) as f64
    };
    let design_effect: Vec<f64> = (0..k)
        .map(|j| {
            let b = var(draws, j);
            if b > 0.0 {
                var(&adjusted_theta, j) / b
            } else {
                1.0
            }
        })
        .collect();

    Ok(AdjustmentResult {
        adjusted_draws: adjusted_theta,
        r1: adj_eta.r1,
        r2: adj_eta.r2,
        design_effect,
        center: theta_bar,
        lambda: Some(transform.lambda),
        clamp_count,
        conditioning_shift: adj_eta.conditioning_shift,
    })
}

fn invert_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let eigs = sym.clone().symmetric_eigenvalues();
    let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let trace = sym.trace();
    let shift = (1e-10 * trace - min_eig).max(0.0);
    let k = sym.nrows();
    (&sym + DMatrix::identity(k, k) * shift)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::NotPositiveDefinite {
            min_eigenvalue: min_eig,
            trace,
        })
}
