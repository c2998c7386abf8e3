//! Curvature assembly and the affine adjustment of posterior draws.
//!
//! The adjusted draw is `θ̂ᵃ = (θ̂ − θ̄) R₂⁻¹R₁ + θ̄` (draws as row vectors, the
//! transfer matrix multiplying on the right), where `R₁ᵀR₁ = H⁻¹JH⁻¹` and
//! `R₂ᵀR₂ = H⁻¹`. Which H and J enter depends on the variant:
//!
//! - naive: H is the full log-posterior curvature at θ̄, J the replication
//!   score variance;
//! - prior-curvature: H = H_lik + H⁰ and J* = J + H⁰, compensating the score
//!   variance for the prior information that replication cannot see.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::SurveyDataset;
use crate::error::{Error, Result};
use crate::model::{
    grad_log_pseudo_posterior, grad_weighted_likelihood, hessian_fd, prior_curvature, ParamVector,
    PriorSpec, DEFAULT_FD_STEP,
};
use crate::replication::{estimate_j, ReplicateDesign};
use crate::sampler::column_means;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Unadjusted,
    Naive,
    PriorCurvature,
    YeoJohnson,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [
            Variant::Unadjusted,
            Variant::Naive,
            Variant::PriorCurvature,
            Variant::YeoJohnson,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Unadjusted => "unadjusted",
            Variant::Naive => "naive",
            Variant::PriorCurvature => "prior_curvature",
            Variant::YeoJohnson => "yeo_johnson",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unadjusted" => Ok(Variant::Unadjusted),
            "naive" => Ok(Variant::Naive),
            "prior_curvature" => Ok(Variant::PriorCurvature),
            "yeo_johnson" => Ok(Variant::YeoJohnson),
            other => Err(Error::Invalid(format!(
                "unknown variant `{other}` (expected unadjusted, naive, prior_curvature, yeo_johnson)"
            ))),
        }
    }
}

/// How to estimate the likelihood curvature H from the draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HMode {
    /// Finite-difference Hessian at the posterior mean.
    AtMean,
    /// Average of finite-difference Hessians over an evenly thinned subset.
    Averaged { n_points: usize },
}

#[derive(Debug, Clone)]
pub struct CurvatureOptions {
    pub h_mode: HMode,
    pub fd_step: f64,
}

impl Default for CurvatureOptions {
    fn default() -> Self {
        CurvatureOptions {
            h_mode: HMode::AtMean,
            fd_step: DEFAULT_FD_STEP,
        }
    }
}

/// The assembled curvature pieces for one adjustment variant.
#[derive(Debug, Clone)]
pub struct CurvatureSet {
    pub variant: Variant,
    /// Likelihood curvature (−∂² of the weighted log-likelihood) at θ̄.
    pub h: DMatrix<f64>,
    /// Prior curvature at θ̄.
    pub h0: DMatrix<f64>,
    /// Replication estimate of the score variance.
    pub j: DMatrix<f64>,
    /// Curvature entering the sandwich for this variant.
    pub h_used: DMatrix<f64>,
    /// Score variance entering the sandwich for this variant.
    pub j_used: DMatrix<f64>,
    pub j_rank: usize,
}

impl CurvatureSet {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "variant": self.variant,
            "h": matrix_rows(&self.h),
            "h0": matrix_rows(&self.h0),
            "j": matrix_rows(&self.j),
            "h_used": matrix_rows(&self.h_used),
            "j_used": matrix_rows(&self.j_used),
            "j_rank": self.j_rank,
        })
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn thin_points(draws: &DMatrix<f64>, n_points: usize) -> Vec<DVector<f64>> {
    let m = draws.nrows();
    let take = n_points.max(1).min(m);
    (0..take)
        .map(|i| {
            let row = if take == 1 { 0 } else { i * (m - 1) / (take - 1) };
            draws.row(row).transpose()
        })
        .collect()
}

fn averaged_neg_fd_hessian<F>(points: &[DVector<f64>], grad_fn: F, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut acc: Option<DMatrix<f64>> = None;
    for p in points {
        let h = -hessian_fd(&grad_fn, p, step)?;
        acc = Some(match acc {
            None => h,
            Some(a) => a + h,
        });
    }
    Ok(acc.expect("at least one evaluation point") / points.len() as f64)
}

/// Likelihood curvature estimate: −(finite-difference Hessian of the weighted
/// log-likelihood) at θ̄, or averaged over a thinned subset of draws. The
/// prior contribution is excluded here; variants add H⁰ separately.
pub fn estimate_h(
    draws: &DMatrix<f64>,
    data: &SurveyDataset,
    mode: HMode,
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    if draws.nrows() == 0 {
        return Err(Error::Invalid("estimate_h requires at least one draw".into()));
    }
    let p = data.n_covariates();
    let g = data.n_groups();
    if draws.ncols() != p + g + 1 {
        return Err(Error::dim("draw columns", p + g + 1, draws.ncols()));
    }
    let grad = |flat: &DVector<f64>| grad_weighted_likelihood(&ParamVector::unpack(flat, p, g)?, data);
    let points = match mode {
        HMode::AtMean => vec![column_means(draws)],
        HMode::Averaged { n_points } => thin_points(draws, n_points),
    };
    averaged_neg_fd_hessian(&points, grad, fd_step)
}

/// Full log-posterior curvature (likelihood plus prior), the H the naive
/// variant uses.
pub fn estimate_h_posterior(
    draws: &DMatrix<f64>,
    data: &SurveyDataset,
    prior: &PriorSpec,
    mode: HMode,
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    let p = data.n_covariates();
    let g = data.n_groups();
    let grad =
        |flat: &DVector<f64>| grad_log_pseudo_posterior(&ParamVector::unpack(flat, p, g)?, data, prior);
    let points = match mode {
        HMode::AtMean => vec![column_means(draws)],
        HMode::Averaged { n_points } => thin_points(draws, n_points),
    };
    averaged_neg_fd_hessian(&points, grad, fd_step)
}

/// Cholesky of the PSD-conditioned matrix: symmetrize, then shift the
/// diagonal by max(0, 1e-10·trace − λ_min). Finite-difference curvatures and
/// low-rank J estimates can be indefinite at machine scale; the shift applied
/// is returned so callers can log it.
fn conditioned_cholesky(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let sym = (a + a.transpose()) * 0.5;
    let eigs = sym.clone().symmetric_eigenvalues();
    let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let trace = sym.trace();
    let shift = (1e-10 * trace - min_eig).max(0.0);
    let k = sym.nrows();
    let conditioned = &sym + DMatrix::identity(k, k) * shift;
    match conditioned.cholesky() {
        Some(c) => Ok((c, shift)),
        None => Err(Error::NotPositiveDefinite {
            min_eigenvalue: min_eig,
            trace,
        }),
    }
}

/// Upper-triangular R with RᵀR equal to the PSD-conditioned input.
pub fn sqrt_matrix(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(sqrt_matrix_conditioned(a)?.0)
}

/// As [`sqrt_matrix`], also returning the diagonal shift the conditioning
/// applied.
pub fn sqrt_matrix_conditioned(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let (chol, shift) = conditioned_cholesky(a)?;
    Ok((chol.l().transpose(), shift))
}

/// Assemble H, H⁰, and J for the naive or prior-curvature variant at the
/// posterior mean of `draws`.
pub fn build_curvature(
    variant: Variant,
    draws: &DMatrix<f64>,
    data: &SurveyDataset,
    prior: &PriorSpec,
    design: &ReplicateDesign,
    opts: &CurvatureOptions,
) -> Result<CurvatureSet> {
    if !matches!(variant, Variant::Naive | Variant::PriorCurvature) {
        return Err(Error::Invalid(format!(
            "build_curvature handles naive and prior_curvature, not {}",
            variant.label()
        )));
    }
    let p = data.n_covariates();
    let g = data.n_groups();
    let theta_bar = ParamVector::unpack(&column_means(draws), p, g)?;
    let h = estimate_h(draws, data, opts.h_mode, opts.fd_step)?;
    let h0 = prior_curvature(&theta_bar, prior)?;
    let j_est = estimate_j(&theta_bar, data, design)?;
    let (h_used, j_used) = match variant {
        Variant::Naive => {
            let h_xi = estimate_h_posterior(draws, data, prior, opts.h_mode, opts.fd_step)?;
            (h_xi, j_est.matrix.clone())
        }
        Variant::PriorCurvature => (&h + &h0, &j_est.matrix + &h0),
        _ => unreachable!(),
    };
    Ok(CurvatureSet {
        variant,
        h,
        h0,
        j: j_est.matrix,
        h_used,
        j_used,
        j_rank: j_est.rank,
    })
}

/// Adjusted draws together with the square-root matrices and per-parameter
/// design-effect diagnostics.
#[derive(Debug, Clone)]
pub struct AdjustmentResult {
    pub adjusted_draws: DMatrix<f64>,
    pub r1: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    /// Ratio of adjusted to unadjusted marginal variance per parameter.
    pub design_effect: Vec<f64>,
    /// θ̄, the centering point.
    pub center: DVector<f64>,
    /// Fitted Yeo-Johnson exponents when the yeo_johnson variant produced
    /// this result.
    pub lambda: Option<Vec<f64>>,
    /// Inverse-transform clamps applied on the way back to θ-space.
    pub clamp_count: usize,
    /// Largest PSD-conditioning shift applied while forming R₁, R₂.
    pub conditioning_shift: f64,
}

impl AdjustmentResult {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "r1": matrix_rows(&self.r1),
            "r2": matrix_rows(&self.r2),
            "design_effect": self.design_effect,
            "center": self.center.iter().cloned().collect::<Vec<f64>>(),
            "lambda": self.lambda,
            "clamp_count": self.clamp_count,
            "conditioning_shift": self.conditioning_shift,
        })
    }
}

fn column_variances(m: &DMatrix<f64>) -> Vec<f64> {
    let mean = column_means(m);
    let n = m.nrows() as f64;
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect()
}

/// Center the draws, multiply each row by T = R₂⁻¹R₁, and recenter. Column
/// means are preserved exactly up to rounding; the empirical covariance maps
/// to Tᵀ Cov T.
pub fn apply_adjustment(draws: &DMatrix<f64>, curv: &CurvatureSet) -> Result<AdjustmentResult> {
    let k = draws.ncols();
    if curv.h_used.nrows() != k || curv.j_used.nrows() != k {
        return Err(Error::dim("curvature dimension", k, curv.h_used.nrows()));
    }
    if draws.nrows() < 2 {
        return Err(Error::Invalid("adjustment requires at least two draws".into()));
    }
    let (h_chol, shift_h) = conditioned_cholesky(&curv.h_used)?;
    let h_inv = h_chol.inverse();
    let (r1, shift_r1) = sqrt_matrix_conditioned(&(&h_inv * &curv.j_used * &h_inv))?;
    let (r2, shift_r2) = sqrt_matrix_conditioned(&h_inv)?;
    let transfer = r2
        .solve_upper_triangular(&r1)
        .ok_or_else(|| Error::NotPositiveDefinite {
            min_eigenvalue: 0.0,
            trace: r2.trace(),
        })?;

    let center = column_means(draws);
    let mut centered = draws.clone();
    for mut row in centered.row_iter_mut() {
        row -= center.transpose();
    }
    let mut adjusted = centered * &transfer;
    for mut row in adjusted.row_iter_mut() {
        row += center.transpose();
    }

    let var_before = column_variances(draws);
    let var_after = column_variances(&adjusted);
    let design_effect = var_before
        .iter()
        .zip(&var_after)
        .map(|(b, a)| if *b > 0.0 { a / b } else { 1.0 })
        .collect();

    Ok(AdjustmentResult {
        adjusted_draws: adjusted,
        r1,
        r2,
        design_effect,
        center,
        lambda: None,
        clamp_count: 0,
        conditioning_shift: shift_h.max(shift_r1).max(shift_r2),
    })
}
