//! Adaptive MCMC over the weighted pseudo-posterior.
//!
//! The default kernel is random-walk Metropolis with a proposal covariance
//! adapted during warmup (per-coordinate scales, or a dense factor estimated
//! from warmup draws), with the global step size tuned toward a target
//! acceptance rate. A gradient-informed MALA kernel is available as an
//! alternative for higher-dimensional targets. Chains are independent, each
//! owning an RNG stream derived from (seed, chain index), and results merge
//! deterministically in chain order.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SurveyDataset;
use crate::error::{Error, Result};
use crate::model::{
    grad_log_pseudo_posterior, log_pseudo_posterior, ParamVector, PriorSpec,
};

/// An unnormalized log density the sampler can draw from.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &DVector<f64>) -> Result<f64>;
    fn grad_log_density(&self, _x: &DVector<f64>) -> Result<DVector<f64>> {
        Err(Error::Invalid("target does not provide gradients".into()))
    }
    fn has_gradient(&self) -> bool {
        false
    }
}

/// The survey-weighted pseudo-posterior as a sampling target.
pub struct PseudoPosteriorTarget<'a> {
    pub data: &'a SurveyDataset,
    pub prior: &'a PriorSpec,
}

impl Target for PseudoPosteriorTarget<'_> {
    fn dim(&self) -> usize {
        self.data.n_params()
    }

    fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let theta = ParamVector::unpack(x, self.data.n_covariates(), self.data.n_groups())?;
        match log_pseudo_posterior(&theta, self.data, self.prior) {
            Ok(v) => Ok(v),
            // treat overflow regions as zero mass rather than failing the chain
            Err(Error::NonFinite(_)) => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let theta = ParamVector::unpack(x, self.data.n_covariates(), self.data.n_groups())?;
        grad_log_pseudo_posterior(&theta, self.data, self.prior)
    }

    fn has_gradient(&self) -> bool {
        true
    }
}

/// Proposal adaptation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    /// Per-coordinate proposal scales from warmup marginal variances.
    Diagonal,
    /// Dense proposal covariance from warmup draws.
    Dense,
    /// Langevin proposal with a dense warmup-estimated preconditioner.
    Mala,
}

impl Adaptation {
    /// Conventional optimal acceptance rate for the kernel.
    pub fn default_target_accept(self) -> f64 {
        match self {
            Adaptation::Diagonal | Adaptation::Dense => 0.234,
            Adaptation::Mala => 0.574,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    /// Kept draws per chain.
    pub n_keep: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub adaptation: Adaptation,
}

impl SamplerConfig {
    pub fn new(seed: u64) -> Self {
        SamplerConfig {
            n_chains: 4,
            n_warmup: 1000,
            n_keep: 1000,
            seed,
            target_accept: 0.234,
            adaptation: Adaptation::Dense,
        }
    }

    pub fn with_adaptation(mut self, adaptation: Adaptation) -> Self {
        self.adaptation = adaptation;
        self.target_accept = adaptation.default_target_accept();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Invalid("n_chains must be at least 1".into()));
        }
        if self.n_warmup < 100 {
            return Err(Error::Invalid(format!("n_warmup = {} must be >= 100", self.n_warmup)));
        }
        if self.n_keep < 100 {
            return Err(Error::Invalid(format!("n_keep = {} must be >= 100", self.n_keep)));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Invalid(format!(
                "target_accept = {} must lie in (0, 1)",
                self.target_accept
            )));
        }
        Ok(())
    }
}

/// Merged posterior sample: M = n_chains · n_keep rows in unconstrained
/// space, with per-draw log density and chain labels.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub draws: DMatrix<f64>,
    pub lp: Vec<f64>,
    pub param_names: Vec<String>,
    pub chain_id: Vec<usize>,
    /// Split-chain potential scale reduction per coordinate.
    pub rhat: Vec<f64>,
    pub warnings: Vec<String>,
    /// Keep-phase acceptance rate per chain.
    pub accept_rate: Vec<f64>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.draws.ncols()
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Private RNG stream for a chain.
fn chain_rng(seed: u64, chain: usize) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix64(seed ^ splitmix64(chain as u64 + 1)))
}

struct ChainOutput {
    draws: DMatrix<f64>,
    lp: Vec<f64>,
    accept_rate: f64,
    warmup_accept: f64,
}

struct Proposal {
    log_step: f64,
    /// Lower-triangular factor of the proposal shape (identity until the
    /// first covariance refresh; diagonal under `Adaptation::Diagonal`).
    chol: DMatrix<f64>,
}

impl Proposal {
    fn covariance_times(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.chol * (self.chol.transpose() * v)
    }

    fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol
            .solve_lower_triangular(v)
            .expect("proposal factor has positive diagonal")
    }
}

fn standard_normal(rng: &mut ChaCha12Rng, k: usize) -> DVector<f64> {
    let dist = rand_distr::StandardNormal;
    DVector::from_fn(k, |_, _| rng.sample::<f64, _>(dist))
}

/// Sample covariance of the rows in `history[lo..]`, regularized toward a
/// small multiple of its mean diagonal so the Cholesky factor always exists.
fn proposal_factor(history: &[DVector<f64>], lo: usize, diagonal_only: bool) -> Option<DMatrix<f64>> {
    let rows = &history[lo..];
    let m = rows.len();
    if m < 10 {
        return None;
    }
    let k = rows[0].len();
    let mut mean = DVector::zeros(k);
    for r in rows {
        mean += r;
    }
    mean /= m as f64;
    let mut cov = DMatrix::zeros(k, k);
    for r in rows {
        let d = r - &mean;
        if diagonal_only {
            for i in 0..k {
                cov[(i, i)] += d[i] * d[i];
            }
        } else {
            cov.syger(1.0, &d, &d, 1.0);
        }
    }
    cov /= (m - 1) as f64;
    let mean_diag = cov.trace() / k as f64;
    let ridge = (1e-6 * mean_diag).max(1e-12);
    for i in 0..k {
        cov[(i, i)] += ridge;
    }
    // fill upper triangle left untouched by syger
    for r in 0..k {
        for c in (r + 1)..k {
            cov[(r, c)] = cov[(c, r)];
        }
    }
    cov.cholesky().map(|c| c.l())
}

fn run_chain(
    target: &dyn Target,
    config: &SamplerConfig,
    chain: usize,
    init: &DVector<f64>,
) -> Result<ChainOutput> {
    let k = target.dim();
    let mut rng = chain_rng(config.seed, chain);
    let mala = config.adaptation == Adaptation::Mala;

    // jittered start so chains are overdispersed relative to one another
    let mut x = init + standard_normal(&mut rng, k) * 0.2;
    let mut lp = target.log_density(&x)?;
    if !lp.is_finite() {
        // fall back to the unjittered init before giving up
        x = init.clone();
        lp = target.log_density(&x)?;
        if !lp.is_finite() {
            return Err(Error::Divergence {
                chain,
                iteration: 0,
                state: x.iter().cloned().collect(),
            });
        }
    }
    let mut grad = if mala { Some(target.grad_log_density(&x)?) } else { None };

    let init_step = if mala {
        0.5 / (k as f64).powf(1.0 / 3.0)
    } else {
        2.38 / (k as f64).sqrt()
    };
    let mut prop = Proposal {
        log_step: init_step.ln(),
        chol: DMatrix::identity(k, k),
    };

    let mut history: Vec<DVector<f64>> = Vec::with_capacity(config.n_warmup);
    let mut t_local = 0usize; // iterations since last covariance refresh
    let mut window_accept = 0.0;
    let mut window_len = 0usize;
    let window = 200.min(config.n_warmup / 2);

    let step = |x: &mut DVector<f64>,
                    lp: &mut f64,
                    grad: &mut Option<DVector<f64>>,
                    prop: &Proposal,
                    rng: &mut ChaCha12Rng,
                    iteration: usize|
     -> Result<f64> {
        let z = standard_normal(rng, k);
        let scale = prop.log_step.exp();
        let (cand, log_q_diff) = if mala {
            let g = grad.as_ref().expect("gradient cached for mala");
            let drift = prop.covariance_times(g) * (0.5 * scale * scale);
            let fwd_mean = &*x + &drift;
            let cand = &fwd_mean + prop.chol.clone() * (&z * scale);
            let g_cand = target.grad_log_density(&cand);
            match g_cand {
                Ok(gc) if gc.iter().all(|v| v.is_finite()) => {
                    let rev_drift = prop.covariance_times(&gc) * (0.5 * scale * scale);
                    let rev_mean = &cand + rev_drift;
                    let fwd_res = prop.whiten(&(&cand - fwd_mean));
                    let rev_res = prop.whiten(&(&*x - rev_mean));
                    let log_q_fwd = -fwd_res.norm_squared() / (2.0 * scale * scale);
                    let log_q_rev = -rev_res.norm_squared() / (2.0 * scale * scale);
                    (cand, log_q_rev - log_q_fwd)
                }
                _ => {
                    // no usable reverse gradient: reject by forcing -inf ratio
                    (cand, f64::NEG_INFINITY)
                }
            }
        } else {
            let cand = &*x + prop.chol.clone() * (&z * scale);
            (cand, 0.0)
        };
        let lp_cand = target.log_density(&cand)?;
        if lp_cand.is_nan() {
            return Err(Error::Divergence {
                chain,
                iteration,
                state: cand.iter().cloned().collect(),
            });
        }
        let log_ratio = lp_cand - *lp + log_q_diff;
        let alpha = log_ratio.min(0.0).exp();
        if rng.random::<f64>() < alpha {
            *x = cand;
            *lp = lp_cand;
            if mala {
                *grad = Some(target.grad_log_density(x)?);
            }
        }
        Ok(alpha)
    };

    for t in 0..config.n_warmup {
        let alpha = step(&mut x, &mut lp, &mut grad, &prop, &mut rng, t)?;
        let gain = (5.0 + t_local as f64).powf(-0.66);
        prop.log_step += gain * (alpha - config.target_accept);
        history.push(x.clone());
        t_local += 1;
        if t + 1 >= config.n_warmup - window {
            window_accept += alpha;
            window_len += 1;
        }
        // periodic covariance refresh, but leave the tail of warmup alone so
        // the step size settles against a fixed shape
        let due = (t + 1) % 250 == 0 && t + 1 >= 250 && (config.n_warmup - (t + 1)) > window;
        if due {
            let diagonal_only = config.adaptation == Adaptation::Diagonal;
            if let Some(l) = proposal_factor(&history, history.len() / 2, diagonal_only) {
                prop.chol = l;
                // restore the conventional overall scale for the new shape
                prop.log_step = init_step.ln();
                t_local = 0;
            }
        }
    }

    let mut draws = DMatrix::zeros(config.n_keep, k);
    let mut lps = Vec::with_capacity(config.n_keep);
    let mut accepted = 0usize;
    let mut lp_prev = lp;
    for t in 0..config.n_keep {
        let _ = step(&mut x, &mut lp, &mut grad, &prop, &mut rng, config.n_warmup + t)?;
        if lp != lp_prev {
            accepted += 1;
        }
        lp_prev = lp;
        draws.row_mut(t).copy_from(&x.transpose());
        lps.push(lp);
    }

    Ok(ChainOutput {
        draws,
        lp: lps,
        accept_rate: accepted as f64 / config.n_keep as f64,
        warmup_accept: if window_len > 0 {
            window_accept / window_len as f64
        } else {
            f64::NAN
        },
    })
}

/// Split-chain potential scale reduction for one coordinate, given the kept
/// draws of each chain.
fn split_rhat_column(chains: &[&[f64]]) -> f64 {
    let mut seqs: Vec<&[f64]> = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let half = c.len() / 2;
        if half < 2 {
            return 1.0;
        }
        seqs.push(&c[..half]);
        seqs.push(&c[half..half * 2]);
    }
    let l = seqs[0].len() as f64;
    let m = seqs.len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / l).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = l / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (l - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return 1.0;
    }
    let var_plus = (l - 1.0) / l * w + b / l;
    (var_plus / w).sqrt()
}

/// Run `config.n_chains` independent chains over an arbitrary target and
/// merge them in chain order. Deterministic given (target, config, init).
pub fn sample_target(
    target: &dyn Target,
    config: &SamplerConfig,
    init: &DVector<f64>,
    param_names: Vec<String>,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let k = target.dim();
    if init.len() != k {
        return Err(Error::dim("sampler init", k, init.len()));
    }
    if param_names.len() != k {
        return Err(Error::dim("param_names", k, param_names.len()));
    }
    if config.adaptation == Adaptation::Mala && !target.has_gradient() {
        return Err(Error::Invalid("MALA adaptation requires a gradient".into()));
    }
    let outputs: Result<Vec<ChainOutput>> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(target, config, c, init))
        .collect();
    let outputs = outputs?;

    let m = config.n_chains * config.n_keep;
    let mut draws = DMatrix::zeros(m, k);
    let mut lp = Vec::with_capacity(m);
    let mut chain_id = Vec::with_capacity(m);
    for (c, out) in outputs.iter().enumerate() {
        draws
            .rows_mut(c * config.n_keep, config.n_keep)
            .copy_from(&out.draws);
        lp.extend_from_slice(&out.lp);
        chain_id.extend(std::iter::repeat(c).take(config.n_keep));
    }
    if draws.iter().any(|v| !v.is_finite()) || lp.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("posterior draws".into()));
    }

    let mut rhat = Vec::with_capacity(k);
    let columns: Vec<Vec<f64>> = (0..k).map(|j| draws.column(j).iter().cloned().collect()).collect();
    for col in &columns {
        let per_chain: Vec<&[f64]> = (0..config.n_chains)
            .map(|c| &col[c * config.n_keep..(c + 1) * config.n_keep])
            .collect();
        rhat.push(split_rhat_column(&per_chain));
    }
    let mut warnings = Vec::new();
    for (j, &r) in rhat.iter().enumerate() {
        if r > 1.05 {
            warnings.push(format!(
                "split R-hat for {} is {:.3} (> 1.05); chains may not have mixed",
                param_names[j], r
            ));
        }
    }
    let accept_rate = outputs.iter().map(|o| o.accept_rate).collect::<Vec<_>>();
    let warmup_accept: Vec<f64> = outputs.iter().map(|o| o.warmup_accept).collect();
    for (c, wa) in warmup_accept.iter().enumerate() {
        if (wa - config.target_accept).abs() > 0.15 {
            warnings.push(format!(
                "chain {c}: warmup acceptance {wa:.3} far from target {:.3}",
                config.target_accept
            ));
        }
    }

    Ok(PosteriorDraws {
        draws,
        lp,
        param_names,
        chain_id,
        rhat,
        warnings,
        accept_rate,
    })
}

/// Draw from the survey-weighted pseudo-posterior of the multilevel logistic
/// model.
pub fn sample_pseudo_posterior(
    data: &SurveyDataset,
    prior: &PriorSpec,
    config: &SamplerConfig,
) -> Result<PosteriorDraws> {
    let target = PseudoPosteriorTarget { data, prior };
    let names = ParamVector::names(data.covariate_names(), data.n_groups());
    let init = ParamVector {
        beta: DVector::zeros(data.n_covariates()),
        alpha: DVector::zeros(data.n_groups()),
        log_sigma_alpha: -0.5,
    };
    sample_target(&target, config, &init.pack(), names)
}

/// Column means of the draws.
pub fn posterior_mean(draws: &PosteriorDraws) -> Result<DVector<f64>> {
    if draws.n_draws() == 0 {
        return Err(Error::Invalid("posterior_mean requires at least one draw".into()));
    }
    Ok(column_means(&draws.draws))
}

/// Column means of the draws, unpacked into model coordinates.
pub fn posterior_mean_params(draws: &PosteriorDraws, p: usize, g: usize) -> Result<ParamVector> {
    ParamVector::unpack(&posterior_mean(draws)?, p, g)
}

pub(crate) fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / n)
}

/// Unbiased sample covariance of the draws (divisor M − 1), symmetrized.
pub fn posterior_cov(draws: &PosteriorDraws) -> Result<DMatrix<f64>> {
    sample_cov(&draws.draws)
}

pub(crate) fn sample_cov(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rows = m.nrows();
    if rows < 2 {
        return Err(Error::Invalid("covariance requires at least two draws".into()));
    }
    let k = m.ncols();
    let mean = column_means(m);
    let mut cov = DMatrix::zeros(k, k);
    let mut d = DVector::zeros(k);
    for i in 0..rows {
        for j in 0..k {
            d[j] = m[(i, j)] - mean[j];
        }
        cov.syger(1.0, &d, &d, 1.0);
    }
    cov /= (rows - 1) as f64;
    for r in 0..k {
        for c in (r + 1)..k {
            cov[(r, c)] = cov[(c, r)];
        }
    }
    Ok(cov)
}

/// Write draws as CSV: one column per parameter, then `lp` and `chain`.
/// Values carry 17 significant digits so the round trip is bit-identical.
pub fn write_draws_csv(draws: &PosteriorDraws, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = draws.param_names.clone();
    header.push("lp".into());
    header.push("chain".into());
    w.write_record(&header)
        .map_err(|e| Error::Invalid(format!("csv write: {e}")))?;
    for i in 0..draws.n_draws() {
        let mut rec: Vec<String> = (0..draws.n_params())
            .map(|j| format!("{:.16e}", draws.draws[(i, j)]))
            .collect();
        rec.push(format!("{:.16e}", draws.lp[i]));
        rec.push(format!("{}", draws.chain_id[i]));
        w.write_record(&rec)
            .map_err(|e| Error::Invalid(format!("csv write: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Read draws produced by [`write_draws_csv`] (or by an external sampler that
/// follows the same layout).
pub fn read_draws_csv(path: impl AsRef<Path>) -> Result<PosteriorDraws> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path_str.clone(),
            line: 0,
            message: e.to_string(),
        })?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: path_str.clone(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(String::from)
        .collect();
    let lp_col = headers.iter().position(|h| h == "lp").ok_or_else(|| Error::Parse {
        path: path_str.clone(),
        line: 1,
        message: "missing `lp` column".into(),
    })?;
    let chain_col = headers.iter().position(|h| h == "chain").ok_or_else(|| Error::Parse {
        path: path_str.clone(),
        line: 1,
        message: "missing `chain` column".into(),
    })?;
    let param_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != lp_col && i != chain_col).collect();
    let param_names: Vec<String> = param_cols.iter().map(|&i| headers[i].clone()).collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut lp = Vec::new();
    let mut chain_id = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path_str.clone(),
            line,
            message: e.to_string(),
        })?;
        let get = |i: usize| -> Result<f64> {
            record
                .get(i)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse {
                    path: path_str.clone(),
                    line,
                    message: format!("cannot parse `{}` in column `{}`", record.get(i).unwrap_or(""), headers[i]),
                })
        };
        rows.push(param_cols.iter().map(|&i| get(i)).collect::<Result<Vec<f64>>>()?);
        lp.push(get(lp_col)?);
        let c: usize = record
            .get(chain_col)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::Parse {
                path: path_str.clone(),
                line,
                message: "cannot parse chain id".into(),
            })?;
        chain_id.push(c);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path_str,
            line: 2,
            message: "no draws".into(),
        });
    }
    let k = rows[0].len();
    let draws = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    Ok(PosteriorDraws {
        draws,
        lp,
        param_names,
        chain_id,
        rhat: Vec::new(),
        warnings: Vec::new(),
        accept_rate: Vec::new(),
    })
}
