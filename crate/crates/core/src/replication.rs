//! Replicate-weight designs over PSUs and the between-replicate variance of
//! the weighted score vector.
//!
//! The score variance J is estimated without refitting: unit scores are
//! computed once at a plug-in estimate and re-weighted under each replicate,
//! so that J = Σ_r c_r (s_r − s̄)(s_r − s̄)ᵀ with s_r the replicate-weighted
//! score total.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::SurveyDataset;
use crate::error::{Error, Result};
use crate::model::{unit_scores, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateKind {
    HalfSampleBootstrap,
    DeleteAGroupJackknife,
}

/// R sets of replicate weights, stored as PSU-constant multipliers of the
/// base weights, plus the per-replicate variance scaling constants c_r.
#[derive(Debug, Clone)]
pub struct ReplicateDesign {
    pub kind: ReplicateKind,
    /// R × n multipliers; replicate weights are `multipliers[(r, i)] * base_weights[i]`.
    pub multipliers: DMatrix<f64>,
    /// Variance scaling constant per replicate.
    pub scale: Vec<f64>,
    /// PSU label per unit.
    pub psu_map: Vec<String>,
    base_weights: Vec<f64>,
    seed: u64,
}

impl ReplicateDesign {
    /// Assemble a design from explicit multipliers, e.g. one read back from an
    /// audit file or built for a test.
    pub fn from_parts(
        kind: ReplicateKind,
        multipliers: DMatrix<f64>,
        scale: Vec<f64>,
        psu_map: Vec<String>,
        base_weights: Vec<f64>,
    ) -> Result<Self> {
        if scale.len() != multipliers.nrows() {
            return Err(Error::dim("scale constants", multipliers.nrows(), scale.len()));
        }
        if psu_map.len() != multipliers.ncols() || base_weights.len() != multipliers.ncols() {
            return Err(Error::dim("design units", multipliers.ncols(), psu_map.len()));
        }
        Ok(ReplicateDesign {
            kind,
            multipliers,
            scale,
            psu_map,
            base_weights,
            seed: 0,
        })
    }

    pub fn n_replicates(&self) -> usize {
        self.multipliers.nrows()
    }

    pub fn n_units(&self) -> usize {
        self.multipliers.ncols()
    }

    /// Full replicate weight vector for replicate r.
    pub fn replicate_weights(&self, r: usize) -> Vec<f64> {
        (0..self.n_units())
            .map(|i| self.multipliers[(r, i)] * self.base_weights[i])
            .collect()
    }

    /// Write the R × n multiplier matrix for audit.
    pub fn to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        let header: Vec<String> = (0..self.n_units()).map(|i| format!("unit{i}")).collect();
        w.write_record(&header)
            .map_err(|e| Error::Invalid(format!("csv write: {e}")))?;
        for r in 0..self.n_replicates() {
            let rec: Vec<String> = (0..self.n_units())
                .map(|i| format!("{:.16e}", self.multipliers[(r, i)]))
                .collect();
            w.write_record(&rec)
                .map_err(|e| Error::Invalid(format!("csv write: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "n_replicates": self.n_replicates(),
            "n_units": self.n_units(),
            "scale": self.scale,
            "seed": self.seed,
        })
    }
}

/// Half-sample bootstrap: each replicate selects half the PSUs in every
/// stratum with equal probability and doubles their weights; c_r = 1/R.
pub fn make_half_sample_bootstrap(
    data: &SurveyDataset,
    n_replicates: usize,
    seed: u64,
) -> Result<ReplicateDesign> {
    if n_replicates < 2 {
        return Err(Error::Invalid(format!(
            "half-sample bootstrap needs at least 2 replicates, got {n_replicates}"
        )));
    }
    let idx = data.psu_index();
    for (s, psus) in idx.psus_by_stratum.iter().enumerate() {
        if psus.len() < 2 {
            return Err(Error::Invalid(format!(
                "stratum `{}` has {} PSU(s); half-sampling needs at least 2 per stratum",
                idx.strata[s],
                psus.len()
            )));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = data.n();
    let mut multipliers = DMatrix::zeros(n_replicates, n);
    let mut psu_mult = vec![0.0; idx.n_psus()];
    for r in 0..n_replicates {
        psu_mult.iter_mut().for_each(|m| *m = 0.0);
        for psus in &idx.psus_by_stratum {
            let take = psus.len().div_ceil(2);
            let chosen = rand::seq::index::sample(&mut rng, psus.len(), take);
            for c in chosen {
                psu_mult[psus[c]] = 2.0;
            }
        }
        for (i, &p) in idx.unit_psu.iter().enumerate() {
            multipliers[(r, i)] = psu_mult[p];
        }
    }
    Ok(ReplicateDesign {
        kind: ReplicateKind::HalfSampleBootstrap,
        multipliers,
        scale: vec![1.0 / n_replicates as f64; n_replicates],
        psu_map: data.psu().to_vec(),
        base_weights: data.weights().to_vec(),
        seed,
    })
}

/// Delete-a-group jackknife: PSUs are randomly partitioned into `n_groups`
/// groups within each stratum; replicate r zeroes group r and rescales the
/// remaining units by n_groups/(n_groups − 1); c_r = (n_groups − 1)/n_groups.
pub fn make_delete_a_group_jackknife(
    data: &SurveyDataset,
    n_groups: usize,
    seed: u64,
) -> Result<ReplicateDesign> {
    if n_groups < 2 {
        return Err(Error::Invalid(format!(
            "delete-a-group jackknife needs at least 2 groups, got {n_groups}"
        )));
    }
    let idx = data.psu_index();
    for (s, psus) in idx.psus_by_stratum.iter().enumerate() {
        if n_groups > psus.len() {
            return Err(Error::Invalid(format!(
                "n_groups = {n_groups} exceeds the {} PSU(s) of stratum `{}`",
                psus.len(),
                idx.strata[s]
            )));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // assign each PSU a group 0..n_groups, dealing a shuffled order round-robin
    // within each stratum so group sizes differ by at most one
    let mut psu_group = vec![0usize; idx.n_psus()];
    for psus in &idx.psus_by_stratum {
        let mut order: Vec<usize> = psus.clone();
        order.shuffle(&mut rng);
        for (pos, &p) in order.iter().enumerate() {
            psu_group[p] = pos % n_groups;
        }
    }
    let n = data.n();
    let keep_factor = n_groups as f64 / (n_groups as f64 - 1.0);
    let mut multipliers = DMatrix::zeros(n_groups, n);
    for r in 0..n_groups {
        for (i, &p) in idx.unit_psu.iter().enumerate() {
            multipliers[(r, i)] = if psu_group[p] == r { 0.0 } else { keep_factor };
        }
    }
    Ok(ReplicateDesign {
        kind: ReplicateKind::DeleteAGroupJackknife,
        multipliers,
        scale: vec![(n_groups as f64 - 1.0) / n_groups as f64; n_groups],
        psu_map: data.psu().to_vec(),
        base_weights: data.weights().to_vec(),
        seed,
    })
}

/// J estimate with its numerical rank.
#[derive(Debug, Clone)]
pub struct JEstimate {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
}

/// Between-replicate variance of the weighted score total at a plug-in
/// estimate (posterior mean by default): scores are computed once and
/// re-weighted per replicate. Rank deficiency (inevitable when R < K) is
/// reported through `rank`, not as an error.
pub fn estimate_j(
    theta_hat: &ParamVector,
    data: &SurveyDataset,
    design: &ReplicateDesign,
) -> Result<JEstimate> {
    let scores = unit_scores(theta_hat, data)?;
    estimate_j_from_scores(&scores, data.weights(), design)
}

/// Same as [`estimate_j`] but with caller-supplied unit scores (n × K),
/// letting tests and alternative estimating equations reuse the machinery.
pub fn estimate_j_from_scores(
    scores: &DMatrix<f64>,
    base_weights: &[f64],
    design: &ReplicateDesign,
) -> Result<JEstimate> {
    let n = scores.nrows();
    let k = scores.ncols();
    if design.n_units() != n {
        return Err(Error::dim("replicate design units", n, design.n_units()));
    }
    if base_weights.len() != n {
        return Err(Error::dim("base weights", n, base_weights.len()));
    }
    let r_total = design.n_replicates();
    // replicate score totals s_r
    let totals: Vec<DVector<f64>> = (0..r_total)
        .map(|r| {
            let mut s = DVector::zeros(k);
            for i in 0..n {
                let w = design.multipliers[(r, i)] * base_weights[i];
                if w != 0.0 {
                    for c in 0..k {
                        s[c] += w * scores[(i, c)];
                    }
                }
            }
            s
        })
        .collect();
    let mut mean = DVector::zeros(k);
    for s in &totals {
        mean += s;
    }
    mean /= r_total as f64;
    let mut j = DMatrix::zeros(k, k);
    for (r, s) in totals.iter().enumerate() {
        let d = s - &mean;
        j.syger(design.scale[r], &d, &d, 1.0);
    }
    for r in 0..k {
        for c in (r + 1)..k {
            j[(r, c)] = j[(c, r)];
        }
    }
    let j = (&j + j.transpose()) * 0.5;
    let eigs = j.clone().symmetric_eigenvalues();
    let max_eig = eigs.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let rank = if max_eig <= 0.0 {
        0
    } else {
        eigs.iter().filter(|&&l| l > 1e-10 * max_eig).count()
    };
    Ok(JEstimate { matrix: j, rank })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn make_data(n_psu: usize, per_psu: usize, weights: Option<Vec<f64>>, seed: u64) -> SurveyDataset {
        let n = n_psu * per_psu;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect();
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() - 0.5 });
        let w = weights.unwrap_or_else(|| vec![1.0; n]);
        SurveyDataset::new(
            y,
            x,
            vec!["intercept".into(), "x".into()],
            (0..n).map(|i| (i % 2) + 1).collect(),
            (0..n).map(|i| format!("psu{}", i / per_psu)).collect(),
            None,
            w,
            Some(2),
        )
        .unwrap()
    }

    #[test]
    fn two_psu_half_sampling_doubles_one_and_zeroes_other() {
        let d = make_data(2, 3, None, 1);
        let design = make_half_sample_bootstrap(&d, 10, 7).unwrap();
        for r in 0..10 {
            let m0 = design.multipliers[(r, 0)];
            let m1 = design.multipliers[(r, 3)];
            assert!(m0 == 2.0 || m1 == 2.0);
            assert_eq!(m0.min(m1), 0.0);
            assert_eq!(m0.max(m1), 2.0);
            // psu-constant within each psu
            for i in 0..3 {
                assert_eq!(design.multipliers[(r, i)], m0);
                assert_eq!(design.multipliers[(r, 3 + i)], m1);
            }
        }
        assert!((design.scale[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn half_sampling_selection_frequency_is_binomial() {
        let d = make_data(10, 1, None, 2);
        let r = 2000;
        let design = make_half_sample_bootstrap(&d, r, 31).unwrap();
        // each PSU selected with probability 1/2, multiplier 2: column sums ~ R
        // with variance R (multiplier variance is 1), so use a 3 sigma band
        for i in 0..10 {
            let sum: f64 = (0..r).map(|rr| design.multipliers[(rr, i)]).sum();
            let sd = (r as f64).sqrt();
            assert!(
                (sum - r as f64).abs() <= 3.0 * sd,
                "psu {i}: column sum {sum} vs expected {r}"
            );
        }
    }

    #[test]
    fn same_seed_same_design() {
        let d = make_data(6, 2, None, 3);
        let a = make_half_sample_bootstrap(&d, 50, 9).unwrap();
        let b = make_half_sample_bootstrap(&d, 50, 9).unwrap();
        assert_eq!(a.multipliers, b.multipliers);
        let ja = make_delete_a_group_jackknife(&d, 3, 5).unwrap();
        let jb = make_delete_a_group_jackknife(&d, 3, 5).unwrap();
        assert_eq!(ja.multipliers, jb.multipliers);
    }

    #[test]
    fn single_psu_strata_are_rejected() {
        let n = 4;
        let d = SurveyDataset::new(
            vec![1.0, 0.0, 1.0, 0.0],
            DMatrix::from_element(n, 1, 1.0),
            vec!["intercept".into()],
            vec![1; n],
            vec!["a".into(), "a".into(), "b".into(), "b".into()],
            Some(vec!["s1".into(), "s1".into(), "s2".into(), "s2".into()]),
            vec![1.0; n],
            None,
        )
        .unwrap();
        assert!(make_half_sample_bootstrap(&d, 10, 1).is_err());
    }

    #[test]
    fn jackknife_drops_one_psu_and_rescales() {
        let d = make_data(3, 2, None, 4);
        let design = make_delete_a_group_jackknife(&d, 3, 17).unwrap();
        assert_eq!(design.n_replicates(), 3);
        for r in 0..3 {
            let mut zeroed = 0;
            for p in 0..3 {
                let m = design.multipliers[(r, 2 * p)];
                assert_eq!(design.multipliers[(r, 2 * p + 1)], m);
                if m == 0.0 {
                    zeroed += 1;
                } else {
                    assert!((m - 1.5).abs() < 1e-15);
                }
            }
            assert_eq!(zeroed, 1);
        }
        assert!((design.scale[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn jackknife_zeroes_every_unit_exactly_once() {
        let d = make_data(12, 2, None, 5);
        let design = make_delete_a_group_jackknife(&d, 4, 6).unwrap();
        for i in 0..d.n() {
            let zeroed = (0..4).filter(|&r| design.multipliers[(r, i)] == 0.0).count();
            assert_eq!(zeroed, 1, "unit {i}");
        }
    }

    #[test]
    fn jackknife_replicate_mean_preserves_weighted_totals() {
        // random weights: the across-replicate mean of a weighted total of a
        // constant variable equals the full-sample total exactly
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let w: Vec<f64> = (0..20).map(|_| 0.2 + rng.random::<f64>() * 3.0).collect();
        let d = make_data(10, 2, Some(w.clone()), 6);
        let design = make_delete_a_group_jackknife(&d, 5, 3).unwrap();
        let full: f64 = w.iter().sum();
        let mut totals = Vec::new();
        for r in 0..design.n_replicates() {
            totals.push(design.replicate_weights(r).iter().sum::<f64>());
        }
        let mean = totals.iter().sum::<f64>() / totals.len() as f64;
        assert!((mean - full).abs() <= 1e-10 * full, "{mean} vs {full}");
    }

    #[test]
    fn jackknife_row_sums_preserved_for_balanced_groups() {
        // equal weights, equal-size groups: each replicate row sum equals the
        // base sum exactly
        let d = make_data(6, 2, None, 7);
        let design = make_delete_a_group_jackknife(&d, 3, 8).unwrap();
        let full: f64 = d.weights().iter().sum();
        for r in 0..design.n_replicates() {
            let sum: f64 = design.replicate_weights(r).iter().sum();
            assert!((sum - full).abs() <= 1e-10, "replicate {r}: {sum} vs {full}");
        }
    }

    #[test]
    fn constant_scores_give_zero_j_under_balanced_design() {
        // balanced PSUs and equal weights: every replicate total of a constant
        // score is identical, so J = 0
        let d = make_data(8, 2, None, 9);
        let design = make_half_sample_bootstrap(&d, 100, 10).unwrap();
        let scores = DMatrix::from_element(d.n(), 3, 0.7);
        let j = estimate_j_from_scores(&scores, d.weights(), &design).unwrap();
        assert!(j.matrix.iter().all(|v| v.abs() < 1e-10));
        assert_eq!(j.rank, 0);
    }

    #[test]
    fn j_matches_independent_replicate_loop_and_binomial_magnitude() {
        // single PSU per unit, w = 1, intercept-only scores y - ybar:
        // J should match n*ybar*(1-ybar) * n/(n-1) up to replicate noise
        let n = 400;
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let y: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        let ybar = y.iter().sum::<f64>() / n as f64;
        let d = SurveyDataset::new(
            y.clone(),
            DMatrix::from_element(n, 1, 1.0),
            vec!["intercept".into()],
            vec![1; n],
            (0..n).map(|i| format!("u{i}")).collect(),
            None,
            vec![1.0; n],
            None,
        )
        .unwrap();
        let r = 3000;
        let design = make_half_sample_bootstrap(&d, r, 23).unwrap();
        let scores = DMatrix::from_fn(n, 1, |i, _| y[i] - ybar);
        let j = estimate_j_from_scores(&scores, d.weights(), &design).unwrap();

        // independent loop over the replicate multipliers
        let mut totals = Vec::with_capacity(r);
        for rr in 0..r {
            let mut t = 0.0;
            for i in 0..n {
                t += design.multipliers[(rr, i)] * (y[i] - ybar);
            }
            totals.push(t);
        }
        let mean = totals.iter().sum::<f64>() / r as f64;
        let var: f64 = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / r as f64;
        assert!(
            (j.matrix[(0, 0)] - var).abs() <= 1e-8 * var.max(1.0),
            "{} vs loop {var}",
            j.matrix[(0, 0)]
        );

        let expected = n as f64 * ybar * (1.0 - ybar) * n as f64 / (n as f64 - 1.0);
        // replicate noise: relative sd of the variance estimate ~ sqrt(2/R)
        let band = 4.0 * (2.0 / r as f64).sqrt() * expected;
        assert!(
            (j.matrix[(0, 0)] - expected).abs() <= band,
            "{} vs binomial {expected} (band {band})",
            j.matrix[(0, 0)]
        );
    }

    #[test]
    fn jackknife_and_bootstrap_agree_on_iid_data() {
        let n = 600;
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let y: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.45 { 1.0 } else { 0.0 }).collect();
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 2.0 - 1.0 });
        let d = SurveyDataset::new(
            y,
            x,
            vec!["intercept".into(), "x".into()],
            (0..n).map(|i| (i % 2) + 1).collect(),
            (0..n).map(|i| format!("psu{}", i / 3)).collect(),
            None,
            vec![1.0; n],
            Some(2),
        )
        .unwrap();
        let theta = ParamVector::zeros(2, 2);
        let boot = estimate_j(&theta, &d, &make_half_sample_bootstrap(&d, 200, 3).unwrap()).unwrap();
        let jack = estimate_j(&theta, &d, &make_delete_a_group_jackknife(&d, 200, 4).unwrap()).unwrap();
        for k in 0..d.n_params() - 1 {
            let b = boot.matrix[(k, k)];
            let j = jack.matrix[(k, k)];
            assert!(
                (b - j).abs() <= 0.25 * b.abs().max(j.abs()),
                "diag {k}: bootstrap {b} vs jackknife {j}"
            );
        }
    }

    #[test]
    fn j_is_positive_semidefinite_and_permutation_invariant() {
        let d = make_data(10, 3, None, 15);
        let design = make_delete_a_group_jackknife(&d, 5, 16).unwrap();
        let theta = ParamVector {
            beta: nalgebra::DVector::from_vec(vec![0.2, -0.4]),
            alpha: nalgebra::DVector::from_vec(vec![0.1, -0.1]),
            log_sigma_alpha: -0.7,
        };
        let j = estimate_j(&theta, &d, &design).unwrap();
        let eigs = j.matrix.clone().symmetric_eigenvalues();
        let trace = j.matrix.trace();
        for &l in eigs.iter() {
            assert!(l >= -1e-10 * trace, "eigenvalue {l} under -1e-10*trace");
        }

        // permute units together with design columns and scores
        let n = d.n();
        let perm: Vec<usize> = (0..n).rev().collect();
        let scores = unit_scores(&theta, &d).unwrap();
        let perm_scores = DMatrix::from_fn(n, scores.ncols(), |i, c| scores[(perm[i], c)]);
        let perm_weights: Vec<f64> = perm.iter().map(|&i| d.weights()[i]).collect();
        let mut perm_design = design.clone();
        perm_design.multipliers =
            DMatrix::from_fn(design.n_replicates(), n, |r, i| design.multipliers[(r, perm[i])]);
        perm_design.base_weights = perm_weights.clone();
        let j2 = estimate_j_from_scores(&perm_scores, &perm_weights, &perm_design).unwrap();
        for r in 0..j.matrix.nrows() {
            for c in 0..j.matrix.ncols() {
                assert!((j.matrix[(r, c)] - j2.matrix[(r, c)]).abs() <= 1e-12);
            }
        }
    }
}
