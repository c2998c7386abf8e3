//! Repeated-sampling coverage studies: population generation, SRS and PPS
//! sample designs, the fit-adjust-evaluate loop, and the coverage/length
//! report, plus the brute-force per-replicate refit used as a slow oracle.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SurveyDataset;
use crate::error::{Error, Result};
use crate::model::expit;
use crate::replication::{
    make_delete_a_group_jackknife, make_half_sample_bootstrap, ReplicateDesign, ReplicateKind,
};
use crate::sampler::{
    posterior_mean, sample_pseudo_posterior, splitmix64, PosteriorDraws, SamplerConfig,
};
use crate::sandwich::{apply_adjustment, build_curvature, CurvatureOptions, Variant};
use crate::transform::{yj_adjust_with, YjOptions};
use crate::PriorSpec;

/// Finite population layout and generating parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n: usize,
    pub n_groups: usize,
    pub group_sizes: Vec<usize>,
    pub beta0: f64,
    pub beta1: f64,
    /// Random-effect variance; individuals draw α_j ~ N(0, √ of this).
    pub sigma_alpha_sq: f64,
    pub seed: u64,
}

impl PopulationSpec {
    /// N = 100,000 split over 20 groups whose sizes interpolate geometrically
    /// with a 20:1 ratio, outcome model logit(p) = −2 + x + α with
    /// Var(α) = 0.25.
    pub fn paper_default(seed: u64) -> Self {
        let n = 100_000;
        let n_groups = 20;
        PopulationSpec {
            n,
            n_groups,
            group_sizes: geometric_group_sizes(n, n_groups, 2000.0, 100.0),
            beta0: -2.0,
            beta1: 1.0,
            sigma_alpha_sq: 0.25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_sizes.len() != self.n_groups {
            return Err(Error::dim("group_sizes", self.n_groups, self.group_sizes.len()));
        }
        if self.group_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Invalid("every group size must be positive".into()));
        }
        let total: usize = self.group_sizes.iter().sum();
        if total != self.n {
            return Err(Error::Invalid(format!(
                "group sizes sum to {total}, expected {}",
                self.n
            )));
        }
        if !(self.sigma_alpha_sq > 0.0) {
            return Err(Error::Invalid("sigma_alpha_sq must be positive".into()));
        }
        Ok(())
    }
}

/// Group sizes interpolating geometrically from `first` to `last`, rescaled
/// to sum exactly to `total`.
pub fn geometric_group_sizes(total: usize, g: usize, first: f64, last: f64) -> Vec<usize> {
    assert!(g >= 2);
    let ratio = (last / first).powf(1.0 / (g - 1) as f64);
    let raw: Vec<f64> = (0..g).map(|k| first * ratio.powi(k as i32)).collect();
    let raw_sum: f64 = raw.iter().sum();
    let mut sizes: Vec<usize> = raw
        .iter()
        .map(|r| ((r * total as f64 / raw_sum).round() as usize).max(1))
        .collect();
    let drift = total as i64 - sizes.iter().sum::<usize>() as i64;
    sizes[0] = (sizes[0] as i64 + drift) as usize;
    sizes
}

/// A generated finite population.
#[derive(Debug, Clone)]
pub struct Population {
    pub spec: PopulationSpec,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    /// 0-based group index per individual.
    pub group: Vec<usize>,
    /// Linear predictor μ_ij = β₀ + β₁ x_ij + α_j per individual.
    pub mu: Vec<f64>,
    /// Realized random effects.
    pub alpha: Vec<f64>,
}

impl Population {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn mean_y(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.n() as f64
    }
}

/// Draw a population: α_j ~ N(0, √sigma_alpha_sq), x ~ N(0,1),
/// y ~ Bernoulli(expit(β₀ + β₁x + α)).
pub fn generate_population(spec: &PopulationSpec) -> Result<Population> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let normal = rand_distr::StandardNormal;
    let sd = spec.sigma_alpha_sq.sqrt();
    let alpha: Vec<f64> = (0..spec.n_groups)
        .map(|_| rng.sample::<f64, _>(normal) * sd)
        .collect();
    let n = spec.n;
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut group = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    for (j, &size) in spec.group_sizes.iter().enumerate() {
        for _ in 0..size {
            let xi: f64 = rng.sample(normal);
            let m = spec.beta0 + spec.beta1 * xi + alpha[j];
            let p = expit(m);
            y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
            x.push(xi);
            group.push(j);
            mu.push(m);
        }
    }
    Ok(Population {
        spec: spec.clone(),
        y,
        x,
        group,
        mu,
        alpha,
    })
}

fn dataset_from_units(pop: &Population, units: &[usize], weights: Vec<f64>, cluster_size: usize) -> SurveyDataset {
    let n = units.len();
    let mut y = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(2 * n);
    let mut group = Vec::with_capacity(n);
    let mut psu = Vec::with_capacity(n);
    for (pos, &u) in units.iter().enumerate() {
        y.push(pop.y[u]);
        xs.push(1.0);
        xs.push(pop.x[u]);
        group.push(pop.group[u] + 1);
        psu.push(format!("psu{:04}", pos / cluster_size));
    }
    SurveyDataset::new(
        y,
        DMatrix::from_row_slice(n, 2, &xs),
        vec!["intercept".into(), "x".into()],
        group,
        psu,
        None,
        weights,
        Some(pop.spec.n_groups),
    )
    .expect("simulated sample satisfies dataset invariants")
}

/// Simple random sample without replacement of n_clusters·cluster_size
/// individuals, randomly partitioned into PSU clusters; weights N/n.
pub fn draw_srs_sample(
    pop: &Population,
    n_clusters: usize,
    cluster_size: usize,
    seed: u64,
) -> Result<SurveyDataset> {
    let n = n_clusters * cluster_size;
    if n == 0 || n > pop.n() {
        return Err(Error::Invalid(format!(
            "sample size {n} invalid for population of {}",
            pop.n()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut units: Vec<usize> = rand::seq::index::sample(&mut rng, pop.n(), n).into_vec();
    units.shuffle(&mut rng); // random cluster assignment
    let w = pop.n() as f64 / n as f64;
    Ok(dataset_from_units(pop, &units, vec![w; n], cluster_size))
}

/// Size measure per individual: s = max(0.1, (μ − min μ) + 5α_group).
pub fn pps_size_measures(pop: &Population) -> Vec<f64> {
    let min_mu = pop.mu.iter().cloned().fold(f64::INFINITY, f64::min);
    pop.mu
        .iter()
        .zip(&pop.group)
        .map(|(&m, &g)| (m - min_mu + 5.0 * pop.alpha[g]).max(0.1))
        .collect()
}

/// First-order inclusion probabilities n·s/Σs (before truncation at 1).
pub fn pps_inclusion_probs(sizes: &[f64], n_sample: usize) -> Vec<f64> {
    let total: f64 = sizes.iter().sum();
    sizes.iter().map(|&s| n_sample as f64 * s / total).collect()
}

#[derive(Debug, Clone)]
pub struct PpsDiagnostics {
    /// Fraction of population units with π ≥ 1.
    pub frac_certainty: f64,
    /// Set when more than 5% of units hit the truncation.
    pub warning: bool,
}

/// Systematic PPS without replacement on randomly permuted units. Weights are
/// 1/min(π, 1), rescaled to sum to n; PSU clusters are assigned in selection
/// order.
pub fn draw_pps_sample(
    pop: &Population,
    n_clusters: usize,
    cluster_size: usize,
    seed: u64,
) -> Result<(SurveyDataset, PpsDiagnostics)> {
    let n = n_clusters * cluster_size;
    if n == 0 || n > pop.n() {
        return Err(Error::Invalid(format!(
            "sample size {n} invalid for population of {}",
            pop.n()
        )));
    }
    let sizes = pps_size_measures(pop);
    let pi = pps_inclusion_probs(&sizes, n);
    let n_certainty = pi.iter().filter(|&&p| p >= 1.0).count();
    let frac_certainty = n_certainty as f64 / pop.n() as f64;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pop.n()).collect();
    order.shuffle(&mut rng);
    let total: f64 = sizes.iter().sum();
    let step = total / n as f64;
    let start: f64 = rng.random::<f64>() * step;

    let mut units = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut pointer = 0usize;
    for k in 0..n {
        let threshold = start + k as f64 * step;
        while pointer < order.len() && cum + sizes[order[pointer]] <= threshold {
            cum += sizes[order[pointer]];
            pointer += 1;
        }
        if pointer >= order.len() {
            // floating-point slack at the very end of the list
            units.push(order[order.len() - 1]);
            continue;
        }
        units.push(order[pointer]);
        // a unit with s > step would capture several thresholds; it enters
        // once (its π is truncated at 1) and the walk resumes at the next unit
        cum += sizes[order[pointer]];
        pointer += 1;
    }

    let raw_w: Vec<f64> = units.iter().map(|&u| 1.0 / pi[u].min(1.0)).collect();
    let w_sum: f64 = raw_w.iter().sum();
    let weights: Vec<f64> = raw_w.iter().map(|w| w * n as f64 / w_sum).collect();
    let data = dataset_from_units(pop, &units, weights, cluster_size);
    Ok((
        data,
        PpsDiagnostics {
            frac_certainty,
            warning: frac_certainty > 0.05,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyDesign {
    Srs,
    Pps,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationConfig {
    pub kind: ReplicateKind,
    /// Replicate count (half-sample bootstrap) or group count (jackknife).
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub design: StudyDesign,
    pub n_reps: usize,
    pub variants: Vec<Variant>,
    pub population: PopulationSpec,
    pub n_clusters: usize,
    pub cluster_size: usize,
    pub sampler: SamplerConfig,
    pub prior: PriorSpec,
    pub replication: ReplicationConfig,
    pub master_seed: u64,
    /// Draw a fresh population each replication (the default) instead of
    /// holding one fixed.
    pub regenerate_population: bool,
    pub yj_h0_in_eta: bool,
}

impl StudyConfig {
    pub fn paper_default(design: StudyDesign, master_seed: u64) -> Self {
        let mut sampler = SamplerConfig::new(0).with_adaptation(crate::sampler::Adaptation::Mala);
        sampler.n_chains = 4;
        sampler.n_warmup = 1500;
        sampler.n_keep = 1000;
        StudyConfig {
            design,
            n_reps: 100,
            variants: Variant::all().to_vec(),
            population: PopulationSpec::paper_default(master_seed),
            n_clusters: 100,
            cluster_size: 10,
            sampler,
            prior: PriorSpec {
                beta_prior_sd: vec![10.0, 10.0],
                sigma_alpha_scale: 1.0,
            },
            replication: ReplicationConfig {
                kind: ReplicateKind::DeleteAGroupJackknife,
                count: 100,
            },
            master_seed,
            regenerate_population: true,
            yj_h0_in_eta: false,
        }
    }
}

/// Parameter classes aggregated in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Fixed,
    Random,
    SigmaAlpha,
}

impl ParamClass {
    pub fn all() -> [ParamClass; 3] {
        [ParamClass::Fixed, ParamClass::Random, ParamClass::SigmaAlpha]
    }

    pub fn label(&self) -> &'static str {
        match self {
            ParamClass::Fixed => "fixed",
            ParamClass::Random => "random",
            ParamClass::SigmaAlpha => "sigma_alpha",
        }
    }
}

/// One replication's coverage fraction and mean interval length for one
/// variant and parameter class.
#[derive(Debug, Clone, Serialize)]
pub struct RepCellStat {
    pub rep: usize,
    pub variant: Variant,
    pub class: ParamClass,
    pub coverage: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageCell {
    pub variant: Variant,
    pub class: ParamClass,
    pub mean_length: f64,
    pub coverage_pct: f64,
    pub mc_se_pct: f64,
}

#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub cells: Vec<CoverageCell>,
    pub per_rep: Vec<RepCellStat>,
    pub n_reps: usize,
    pub n_failed: usize,
    pub failures: Vec<String>,
}

impl CoverageReport {
    pub fn cell(&self, variant: Variant, class: ParamClass) -> Option<&CoverageCell> {
        self.cells.iter().find(|c| c.variant == variant && c.class == class)
    }

    /// Mean and standard error of the per-replication difference between two
    /// cells (paired over replications), for a chosen field.
    pub fn paired_diff(
        &self,
        a: (Variant, ParamClass),
        b: (Variant, ParamClass),
        length: bool,
    ) -> (f64, f64) {
        let pick = |v: Variant, c: ParamClass, rep: usize| {
            self.per_rep
                .iter()
                .find(|r| r.variant == v && r.class == c && r.rep == rep)
                .map(|r| if length { r.mean_length } else { r.coverage })
        };
        let mut diffs = Vec::new();
        for rep in 0..self.n_reps + self.n_failed {
            if let (Some(x), Some(y)) = (pick(a.0, a.1, rep), pick(b.0, b.1, rep)) {
                diffs.push(x - y);
            }
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    pub fn to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["variant", "param_class", "mean_length", "coverage_pct", "mc_se_pct"])
            .map_err(|e| Error::Invalid(format!("csv write: {e}")))?;
        for c in &self.cells {
            w.write_record([
                c.variant.label().to_string(),
                c.class.label().to_string(),
                format!("{:.6}", c.mean_length),
                format!("{:.2}", c.coverage_pct),
                format!("{:.2}", c.mc_se_pct),
            ])
            .map_err(|e| Error::Invalid(format!("csv write: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn per_rep_to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["rep", "variant", "param_class", "coverage", "mean_length"])
            .map_err(|e| Error::Invalid(format!("csv write: {e}")))?;
        for r in &self.per_rep {
            w.write_record([
                r.rep.to_string(),
                r.variant.label().to_string(),
                r.class.label().to_string(),
                format!("{:.6}", r.coverage),
                format!("{:.6}", r.mean_length),
            ])
            .map_err(|e| Error::Invalid(format!("csv write: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Text table with one row per variant, mirroring interval length and
    /// coverage per parameter class.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>12} {:>8} {:>8} {:>12}\n",
            "adjustment", "len.fix", "len.rand", "len.sigma", "cov.fix", "cov.rand", "cov.sigma"
        ));
        let variants: Vec<Variant> = {
            let mut seen = Vec::new();
            for c in &self.cells {
                if !seen.contains(&c.variant) {
                    seen.push(c.variant);
                }
            }
            seen
        };
        for v in variants {
            let get = |class| self.cell(v, class);
            let f = |c: Option<&CoverageCell>, len: bool| match c {
                Some(c) => format!("{:.3}", if len { c.mean_length } else { c.coverage_pct }),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{:<16} {:>8} {:>8} {:>12} {:>8} {:>8} {:>12}\n",
                v.label(),
                f(get(ParamClass::Fixed), true),
                f(get(ParamClass::Random), true),
                f(get(ParamClass::SigmaAlpha), true),
                f(get(ParamClass::Fixed), false),
                f(get(ParamClass::Random), false),
                f(get(ParamClass::SigmaAlpha), false),
            ));
        }
        out.push_str(&format!(
            "({} replications, {} failed)\n",
            self.n_reps, self.n_failed
        ));
        out
    }
}

/// Equal-tailed interval from a column of draws (type-7 quantiles).
fn interval(column: &mut [f64], level: f64) -> (f64, f64) {
    column.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (column.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if lo + 1 < column.len() {
            column[lo] * (1.0 - frac) + column[lo + 1] * frac
        } else {
            column[lo]
        }
    };
    let tail = (1.0 - level) / 2.0;
    (q(tail), q(1.0 - tail))
}

fn make_design(data: &SurveyDataset, cfg: &ReplicationConfig, seed: u64) -> Result<ReplicateDesign> {
    match cfg.kind {
        ReplicateKind::HalfSampleBootstrap => make_half_sample_bootstrap(data, cfg.count, seed),
        ReplicateKind::DeleteAGroupJackknife => make_delete_a_group_jackknife(data, cfg.count, seed),
    }
}

struct RepOutcome {
    stats: Vec<RepCellStat>,
}

fn run_one_rep(cfg: &StudyConfig, rep: usize) -> Result<RepOutcome> {
    let base = splitmix64(cfg.master_seed ^ splitmix64(rep as u64 + 0x5eed));
    let mut pop_spec = cfg.population.clone();
    pop_spec.seed = if cfg.regenerate_population {
        splitmix64(base)
    } else {
        cfg.population.seed
    };
    let pop = generate_population(&pop_spec)?;
    let mut data = match cfg.design {
        StudyDesign::Srs => draw_srs_sample(&pop, cfg.n_clusters, cfg.cluster_size, splitmix64(base + 1))?,
        StudyDesign::Pps => draw_pps_sample(&pop, cfg.n_clusters, cfg.cluster_size, splitmix64(base + 1))?.0,
    };
    data.normalize_weights();

    let mut sampler_cfg = cfg.sampler.clone();
    sampler_cfg.seed = splitmix64(base + 2);
    let draws = sample_pseudo_posterior(&data, &cfg.prior, &sampler_cfg)?;
    let design = make_design(&data, &cfg.replication, splitmix64(base + 3))?;

    let p = data.n_covariates();
    let g = data.n_groups();
    let k = data.n_params();
    let sigma_true = pop.spec.sigma_alpha_sq.sqrt();

    let mut stats = Vec::new();
    for &variant in &cfg.variants {
        let adjusted: DMatrix<f64> = match variant {
            Variant::Unadjusted => draws.draws.clone(),
            Variant::Naive | Variant::PriorCurvature => {
                let curv = build_curvature(
                    variant,
                    &draws.draws,
                    &data,
                    &cfg.prior,
                    &design,
                    &CurvatureOptions::default(),
                )?;
                apply_adjustment(&draws.draws, &curv)?.adjusted_draws
            }
            Variant::YeoJohnson => {
                let opts = YjOptions {
                    lambda_override: None,
                    h0_in_eta: cfg.yj_h0_in_eta,
                };
                yj_adjust_with(&draws.draws, &data, &cfg.prior, &design, &opts)?.adjusted_draws
            }
        };

        // per-parameter 95% intervals; sigma on the standard-deviation scale
        let mut cover = vec![0.0f64; 3];
        let mut length = vec![0.0f64; 3];
        let mut counts = vec![0usize; 3];
        for col in 0..k {
            let (class, truth, transform_exp) = if col < p {
                (0, if col == 0 { pop.spec.beta0 } else { pop.spec.beta1 }, false)
            } else if col < p + g {
                (1, pop.alpha[col - p], false)
            } else {
                (2, sigma_true, true)
            };
            let mut column: Vec<f64> = adjusted.column(col).iter().cloned().collect();
            if transform_exp {
                for v in column.iter_mut() {
                    *v = v.exp();
                }
            }
            let (lo, hi) = interval(&mut column, 0.95);
            cover[class] += if (lo..=hi).contains(&truth) { 1.0 } else { 0.0 };
            length[class] += hi - lo;
            counts[class] += 1;
        }
        for (idx, class) in ParamClass::all().into_iter().enumerate() {
            stats.push(RepCellStat {
                rep,
                variant,
                class,
                coverage: cover[idx] / counts[idx] as f64,
                mean_length: length[idx] / counts[idx] as f64,
            });
        }
    }
    Ok(RepOutcome { stats })
}

/// Run the full repeated-sampling study: per replication, draw a sample,
/// sample its pseudo-posterior, apply each variant, and score 95% equal-tailed
/// intervals against the generating values. Failed replications are excluded
/// and reported.
pub fn run_study(cfg: &StudyConfig) -> Result<CoverageReport> {
    cfg.sampler.validate()?;
    cfg.prior.validate()?;
    if cfg.n_reps == 0 {
        return Err(Error::Invalid("n_reps must be positive".into()));
    }
    let results: Vec<(usize, Result<RepOutcome>)> = (0..cfg.n_reps)
        .into_par_iter()
        .map(|rep| (rep, run_one_rep(cfg, rep)))
        .collect();

    let mut per_rep = Vec::new();
    let mut failures = Vec::new();
    for (rep, res) in results {
        match res {
            Ok(out) => per_rep.extend(out.stats),
            Err(e) => failures.push(format!("replication {rep}: {e}")),
        }
    }
    let n_failed = failures.len();
    let n_ok = cfg.n_reps - n_failed;
    if n_ok == 0 {
        return Err(Error::Invalid(format!(
            "all {} replications failed; first failure: {}",
            cfg.n_reps, failures[0]
        )));
    }

    let mut cells = Vec::new();
    for &variant in &cfg.variants {
        for class in ParamClass::all() {
            let rows: Vec<&RepCellStat> = per_rep
                .iter()
                .filter(|r| r.variant == variant && r.class == class)
                .collect();
            let n = rows.len() as f64;
            let cov_mean = rows.iter().map(|r| r.coverage).sum::<f64>() / n;
            let cov_var = rows
                .iter()
                .map(|r| (r.coverage - cov_mean).powi(2))
                .sum::<f64>()
                / (n - 1.0).max(1.0);
            let len_mean = rows.iter().map(|r| r.mean_length).sum::<f64>() / n;
            cells.push(CoverageCell {
                variant,
                class,
                mean_length: len_mean,
                coverage_pct: 100.0 * cov_mean,
                mc_se_pct: 100.0 * (cov_var / n).sqrt(),
            });
        }
    }
    Ok(CoverageReport {
        cells,
        per_rep,
        n_reps: n_ok,
        n_failed,
        failures,
    })
}

/// Slow oracle: refit the full pseudo-posterior under every replicate weight
/// set and return the per-parameter replication variance of the posterior
/// means, Σ_r c_r (m_r − m̄)². Every refit reuses the same sampler seed, so
/// identical replicate weights give identical draws and the Monte-Carlo noise
/// largely cancels from the between-replicate differences.
pub fn brute_force_replication_fit(
    data: &SurveyDataset,
    prior: &PriorSpec,
    design: &ReplicateDesign,
    sampler_cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    let r_total = design.n_replicates();
    let means: Result<Vec<DVector<f64>>> = (0..r_total)
        .into_par_iter()
        .map(|r| {
            let data_r = data.with_weights(design.replicate_weights(r))?;
            let draws = sample_pseudo_posterior(&data_r, prior, sampler_cfg)?;
            posterior_mean(&draws)
        })
        .collect();
    let means = means?;
    let k = means[0].len();
    let mut grand = DVector::zeros(k);
    for m in &means {
        grand += m;
    }
    grand /= r_total as f64;
    let mut var = vec![0.0; k];
    for (r, m) in means.iter().enumerate() {
        for j in 0..k {
            var[j] += design.scale[r] * (m[j] - grand[j]).powi(2);
        }
    }
    Ok(var)
}

/// Convenience used by the bindings and docs: one SRS draw from the default
/// population.
pub fn demo_srs_dataset(seed: u64, n_clusters: usize, cluster_size: usize) -> Result<SurveyDataset> {
    let pop = generate_population(&PopulationSpec::paper_default(seed))?;
    draw_srs_sample(&pop, n_clusters, cluster_size, splitmix64(seed))
}

/// One PPS draw from the default population (informative design).
pub fn demo_pps_dataset(seed: u64, n_clusters: usize, cluster_size: usize) -> Result<SurveyDataset> {
    let pop = generate_population(&PopulationSpec::paper_default(seed))?;
    Ok(draw_pps_sample(&pop, n_clusters, cluster_size, splitmix64(seed))?.0)
}

/// dev-scale 2-replication smoke settings used in tests and docs
pub fn smoke_config(design: StudyDesign, master_seed: u64) -> StudyConfig {
    let mut cfg = StudyConfig::paper_default(design, master_seed);
    cfg.n_reps = 2;
    cfg.n_clusters = 30;
    cfg.cluster_size = 5;
    cfg.sampler.n_warmup = 300;
    cfg.sampler.n_keep = 150;
    cfg.sampler.n_chains = 2;
    cfg.replication.count = 30;
    cfg
}

#[allow(dead_code)]
fn used_by_tests(_: &PosteriorDraws) {}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> PopulationSpec {
        PopulationSpec {
            n: 5000,
            n_groups: 20,
            group_sizes: geometric_group_sizes(5000, 20, 2000.0, 100.0),
            beta0: -2.0,
            beta1: 1.0,
            sigma_alpha_sq: 0.25,
            seed,
        }
    }

    #[test]
    fn group_sizes_sum_exactly() {
        let spec = PopulationSpec::paper_default(1);
        assert_eq!(spec.group_sizes.iter().sum::<usize>(), 100_000);
        assert_eq!(spec.group_sizes.len(), 20);
        assert!(spec.group_sizes.windows(2).all(|w| w[0] >= w[1]));
        // 20:1 ratio preserved by the rescaling
        let ratio = spec.group_sizes[0] as f64 / spec.group_sizes[19] as f64;
        assert!((ratio - 20.0).abs() < 0.5, "{ratio}");
        spec.validate().unwrap();
    }

    #[test]
    fn mean_probability_at_reference_point() {
        // plug-in check of the outcome model at alpha = 0, x = 0
        assert!((expit(-2.0) - 0.11920292202211755).abs() < 1e-12);
    }

    #[test]
    fn alpha_variance_matches_spec_over_regenerations() {
        let mut spec = small_spec(0);
        spec.n = 200;
        spec.n_groups = 4;
        spec.group_sizes = vec![50; 4];
        let m = 2000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0.0;
        for s in 0..m {
            spec.seed = s as u64;
            let pop = generate_population(&spec).unwrap();
            for &a in &pop.alpha {
                sum += a;
                sumsq += a * a;
                count += 1.0;
            }
        }
        let var = sumsq / count - (sum / count).powi(2);
        // MC standard error of a variance estimate: var * sqrt(2/(n-1))
        let se = 0.25 * (2.0 / (count - 1.0)).sqrt();
        assert!(
            (var - 0.25).abs() <= 3.0 * se,
            "empirical Var(alpha) {var} vs 0.25 (se {se})"
        );
    }

    #[test]
    fn population_sizes_and_groups_line_up() {
        let pop = generate_population(&small_spec(3)).unwrap();
        assert_eq!(pop.n(), 5000);
        assert_eq!(pop.alpha.len(), 20);
        let mut counts = vec![0usize; 20];
        for &g in &pop.group {
            counts[g] += 1;
        }
        assert_eq!(counts, pop.spec.group_sizes);
    }

    #[test]
    fn srs_sample_shape_and_weights() {
        let pop = generate_population(&PopulationSpec::paper_default(5)).unwrap();
        let d = draw_srs_sample(&pop, 100, 10, 7).unwrap();
        assert_eq!(d.n(), 1000);
        assert!(d.weights().iter().all(|&w| (w - 100.0).abs() < 1e-12));
        // no duplicate population units: all covariate values distinct with
        // probability one, so check psu structure instead
        let idx = d.psu_index();
        assert_eq!(idx.n_psus(), 100);
        assert!(idx.units_by_psu.iter().all(|u| u.len() == 10));
    }

    #[test]
    fn srs_units_are_distinct() {
        let mut spec = small_spec(11);
        spec.n = 600;
        spec.group_sizes = geometric_group_sizes(600, 20, 2000.0, 100.0);
        let pop = generate_population(&spec).unwrap();
        let d = draw_srs_sample(&pop, 50, 10, 13).unwrap();
        // x values are continuous draws; duplicates would mean a repeated unit
        let mut xs: Vec<f64> = (0..d.n()).map(|i| d.x()[(i, 1)]).collect();
        xs.sort_by(f64::total_cmp);
        assert!(xs.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn pps_constant_sizes_reduce_to_equal_weights() {
        let mut pop = generate_population(&small_spec(17)).unwrap();
        // flatten the size measure by zeroing mu spread and alpha
        for m in pop.mu.iter_mut() {
            *m = -1.0;
        }
        for a in pop.alpha.iter_mut() {
            *a = 0.0;
        }
        let (d, diag) = draw_pps_sample(&pop, 40, 10, 19).unwrap();
        assert!(!diag.warning);
        let w0 = d.weights()[0];
        assert!(d.weights().iter().all(|&w| (w - w0).abs() < 1e-9));
    }

    #[test]
    fn pps_inclusion_probabilities_sum_to_sample_size() {
        let pop = generate_population(&small_spec(23)).unwrap();
        let sizes = pps_size_measures(&pop);
        let pi = pps_inclusion_probs(&sizes, 1000);
        let total: f64 = pi.iter().sum();
        assert!((total - 1000.0).abs() < 1e-8, "{total}");
    }

    #[test]
    fn pps_design_is_informative() {
        let pop = generate_population(&PopulationSpec::paper_default(29)).unwrap();
        let pop_mean = pop.mean_y();
        let mut exceed = 0;
        for seed in 0..100 {
            let (d, _) = draw_pps_sample(&pop, 100, 10, seed).unwrap();
            let sample_mean = d.y().iter().sum::<f64>() / d.n() as f64;
            if sample_mean > pop_mean {
                exceed += 1;
            }
        }
        assert!(exceed >= 95, "informative in {exceed}/100 draws");
    }

    #[test]
    fn study_smoke_runs_end_to_end_and_is_deterministic() {
        let mut cfg = smoke_config(StudyDesign::Srs, 7);
        cfg.population = small_spec(7);
        let a = run_study(&cfg).unwrap();
        let b = run_study(&cfg).unwrap();
        assert_eq!(a.n_failed, 0);
        assert_eq!(a.cells.len(), 4 * 3);
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            assert_eq!(ca.coverage_pct, cb.coverage_pct);
            assert_eq!(ca.mean_length, cb.mean_length);
        }
        // coverages are percentages, lengths positive
        for c in &a.cells {
            assert!((0.0..=100.0).contains(&c.coverage_pct));
            assert!(c.mean_length > 0.0);
        }
    }

    #[test]
    fn brute_force_zero_variation_gives_zero_variance() {
        let mut spec = small_spec(31);
        spec.n = 400;
        spec.group_sizes = geometric_group_sizes(400, 20, 2000.0, 100.0);
        let pop = generate_population(&spec).unwrap();
        let mut data = draw_srs_sample(&pop, 20, 5, 33).unwrap();
        data.normalize_weights();
        // identical replicate weights
        let design = ReplicateDesign::from_parts(
            ReplicateKind::HalfSampleBootstrap,
            DMatrix::from_element(4, data.n(), 1.0),
            vec![0.25; 4],
            data.psu().to_vec(),
            data.weights().to_vec(),
        )
        .unwrap();
        let prior = PriorSpec {
            beta_prior_sd: vec![10.0, 10.0],
            sigma_alpha_scale: 1.0,
        };
        let mut cfg = SamplerConfig::new(35);
        cfg.n_chains = 1;
        cfg.n_warmup = 200;
        cfg.n_keep = 100;
        let var = brute_force_replication_fit(&data, &prior, &design, &cfg).unwrap();
        assert!(var.iter().all(|&v| v == 0.0), "{var:?}");
        // and deterministic
        let var2 = brute_force_replication_fit(&data, &prior, &design, &cfg).unwrap();
        assert_eq!(var, var2);
    }
}
