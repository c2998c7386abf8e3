//! Survey dataset container and CSV interchange.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// One observed sample from a complex survey: binary outcomes, covariates, a
/// group index driving the random intercept, sampling-design labels, and base
/// weights.
///
/// Group indices are 1-based in all public constructors and file formats
/// (matching the usual survey-file convention) and stored 0-based internally;
/// [`SurveyDataset::group`] returns the 0-based form.
#[derive(Debug, Clone)]
pub struct SurveyDataset {
    y: Vec<f64>,
    x: DMatrix<f64>,
    covariate_names: Vec<String>,
    group: Vec<usize>,
    psu: Vec<String>,
    stratum: Vec<String>,
    weights: Vec<f64>,
    n_groups: usize,
    weight_scale: f64,
}

impl SurveyDataset {
    /// Build and validate a dataset. `group` entries are 1-based and must cover
    /// `1..=n_groups`; `n_groups` defaults to the largest observed index.
    /// Weights must be strictly positive (replicate refits that need zeros go
    /// through [`SurveyDataset::with_weights`]).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        y: Vec<f64>,
        x: DMatrix<f64>,
        covariate_names: Vec<String>,
        group: Vec<usize>,
        psu: Vec<String>,
        stratum: Option<Vec<String>>,
        weights: Vec<f64>,
        n_groups: Option<usize>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Invalid("dataset must contain at least one unit".into()));
        }
        if x.nrows() != n {
            return Err(Error::dim("covariate matrix rows", n, x.nrows()));
        }
        if covariate_names.len() != x.ncols() {
            return Err(Error::dim("covariate names", x.ncols(), covariate_names.len()));
        }
        for (what, len) in [("group", group.len()), ("psu", psu.len()), ("weight", weights.len())] {
            if len != n {
                return Err(Error::dim(what, n, len));
            }
        }
        let stratum = match stratum {
            Some(s) => {
                if s.len() != n {
                    return Err(Error::dim("stratum", n, s.len()));
                }
                s
            }
            None => vec!["_all".to_string(); n],
        };
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 && yi != 1.0 {
                return Err(Error::Invalid(format!("y[{i}] = {yi} is not 0 or 1")));
            }
        }
        for (i, &wi) in weights.iter().enumerate() {
            if !(wi.is_finite() && wi > 0.0) {
                return Err(Error::Invalid(format!(
                    "weight[{i}] = {wi} must be strictly positive and finite"
                )));
            }
        }
        for (i, p) in psu.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Invalid(format!("psu[{i}] is empty")));
            }
        }
        let max_group = *group.iter().max().unwrap();
        let min_group = *group.iter().min().unwrap();
        if min_group < 1 {
            return Err(Error::Invalid("group indices are 1-based; found 0".into()));
        }
        let n_groups = n_groups.unwrap_or(max_group);
        if max_group > n_groups {
            return Err(Error::Invalid(format!(
                "group index {max_group} exceeds declared group count {n_groups}"
            )));
        }
        for (j, col) in x.column_iter().enumerate() {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("covariate column `{}`", covariate_names[j])));
            }
            if col.iter().all(|&v| v == 0.0) {
                return Err(Error::Invalid(format!(
                    "covariate column `{}` is identically zero",
                    covariate_names[j]
                )));
            }
        }
        Ok(SurveyDataset {
            y,
            x,
            covariate_names,
            group: group.into_iter().map(|g| g - 1).collect(),
            psu,
            stratum,
            weights,
            n_groups,
            weight_scale: 1.0,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    /// Packed parameter dimension for this dataset: p + G + 1.
    pub fn n_params(&self) -> usize {
        self.n_covariates() + self.n_groups + 1
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// 0-based group index per unit.
    pub fn group(&self) -> &[usize] {
        &self.group
    }

    pub fn psu(&self) -> &[String] {
        &self.psu
    }

    pub fn stratum(&self) -> &[String] {
        &self.stratum
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Rescale weights to sum to n and record the factor so the original scale
    /// can be recovered. Both the curvature H and the replication estimate J
    /// scale linearly in total weight, so the adjustment is unchanged; the
    /// normalized scale keeps proposal tuning well conditioned.
    pub fn normalize_weights(&mut self) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let n = self.n() as f64;
        let scale = total / n;
        for w in &mut self.weights {
            *w /= scale;
        }
        self.weight_scale *= scale;
        scale
    }

    /// Multiplier that maps current weights back to the originally supplied
    /// ones (1.0 if weights were never normalized).
    pub fn weight_scale(&self) -> f64 {
        self.weight_scale
    }

    /// Clone with a replacement weight vector. Unlike [`SurveyDataset::new`],
    /// zeros are allowed here: replicate designs null out whole PSUs.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n() {
            return Err(Error::dim("weights", self.n(), weights.len()));
        }
        for (i, &wi) in weights.iter().enumerate() {
            if !(wi.is_finite() && wi >= 0.0) {
                return Err(Error::Invalid(format!(
                    "weight[{i}] = {wi} must be nonnegative and finite"
                )));
            }
        }
        let mut out = self.clone();
        out.weights = weights;
        out.weight_scale = 1.0;
        Ok(out)
    }

    /// Unique (stratum, psu) pairs in first-appearance order, plus the PSU
    /// index of every unit. Replication designs resample these.
    pub fn psu_index(&self) -> PsuIndex {
        let mut ids: Vec<(String, String)> = Vec::new();
        let mut lookup: HashMap<(String, String), usize> = HashMap::new();
        let mut unit_psu = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            let key = (self.stratum[i].clone(), self.psu[i].clone());
            let idx = *lookup.entry(key.clone()).or_insert_with(|| {
                ids.push(key);
                ids.len() - 1
            });
            unit_psu.push(idx);
        }
        let mut units_by_psu = vec![Vec::new(); ids.len()];
        for (i, &p) in unit_psu.iter().enumerate() {
            units_by_psu[p].push(i);
        }
        let mut strata: Vec<String> = Vec::new();
        let mut psus_by_stratum: Vec<Vec<usize>> = Vec::new();
        for (p, (s, _)) in ids.iter().enumerate() {
            match strata.iter().position(|t| t == s) {
                Some(k) => psus_by_stratum[k].push(p),
                None => {
                    strata.push(s.clone());
                    psus_by_stratum.push(vec![p]);
                }
            }
        }
        PsuIndex {
            unit_psu,
            units_by_psu,
            strata,
            psus_by_stratum,
        }
    }

    /// Read a dataset from CSV. Required headers: `y`, `weight`, `group`,
    /// `psu`; `stratum` is optional; every remaining column is a numeric
    /// covariate. An `intercept` column of ones is prepended unless one is
    /// already present.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Parse {
                path: path_str.clone(),
                line: 0,
                message: e.to_string(),
            })?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Parse {
                path: path_str.clone(),
                line: 1,
                message: e.to_string(),
            })?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();

        let col = |name: &str| headers.iter().position(|h| h == name);
        let require = |name: &str| {
            col(name).ok_or_else(|| Error::Parse {
                path: path_str.clone(),
                line: 1,
                message: format!("missing required column `{name}`"),
            })
        };
        let y_col = require("y")?;
        let w_col = require("weight")?;
        let g_col = require("group")?;
        let p_col = require("psu")?;
        let s_col = col("stratum");
        let reserved = [Some(y_col), Some(w_col), Some(g_col), Some(p_col), s_col];
        let covariate_cols: Vec<usize> = (0..headers.len())
            .filter(|i| !reserved.contains(&Some(*i)))
            .collect();

        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut group = Vec::new();
        let mut psu = Vec::new();
        let mut stratum = Vec::new();
        let mut covs: Vec<Vec<f64>> = vec![Vec::new(); covariate_cols.len()];
        for (rec_idx, record) in reader.records().enumerate() {
            let line = rec_idx + 2; // header is line 1
            let record = record.map_err(|e| Error::Parse {
                path: path_str.clone(),
                line,
                message: e.to_string(),
            })?;
            let field = |i: usize| record.get(i).unwrap_or("").trim();
            let parse_f64 = |i: usize, name: &str| -> Result<f64> {
                field(i).parse::<f64>().map_err(|_| Error::Parse {
                    path: path_str.clone(),
                    line,
                    message: format!("column `{name}`: cannot parse `{}` as a number", field(i)),
                })
            };
            y.push(parse_f64(y_col, "y")?);
            w.push(parse_f64(w_col, "weight")?);
            let g: usize = field(g_col).parse().map_err(|_| Error::Parse {
                path: path_str.clone(),
                line,
                message: format!("column `group`: cannot parse `{}` as a positive integer", field(g_col)),
            })?;
            group.push(g);
            psu.push(field(p_col).to_string());
            if let Some(sc) = s_col {
                stratum.push(field(sc).to_string());
            }
            for (k, &ci) in covariate_cols.iter().enumerate() {
                covs[k].push(parse_f64(ci, &headers[ci])?);
            }
        }
        let n = y.len();
        if n == 0 {
            return Err(Error::Parse {
                path: path_str,
                line: 2,
                message: "no data rows".into(),
            });
        }

        let mut names: Vec<String> = covariate_cols.iter().map(|&i| headers[i].clone()).collect();
        let mut columns = covs;
        if !names.iter().any(|n| n == "intercept") {
            names.insert(0, "intercept".to_string());
            columns.insert(0, vec![1.0; n]);
        }
        let p = columns.len();
        let x = DMatrix::from_fn(n, p, |i, j| columns[j][i]);
        SurveyDataset::new(y, x, names, group, psu, (s_col.is_some()).then_some(stratum), w, None)
    }

    /// Write the dataset back to CSV with weights on their original scale, so
    /// a normalized dataset round-trips the input file.
    pub fn to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path.as_ref())?;
        let mut header = vec!["y", "weight", "group", "psu", "stratum"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend(self.covariate_names.iter().cloned());
        writer
            .write_record(&header)
            .map_err(|e| Error::Invalid(format!("csv write: {e}")))?;
        for i in 0..self.n() {
            let mut rec = vec![
                format!("{}", self.y[i]),
                format!("{:.16e}", self.weights[i] * self.weight_scale),
                format!("{}", self.group[i] + 1),
                self.psu[i].clone(),
                self.stratum[i].clone(),
            ];
            for j in 0..self.n_covariates() {
                rec.push(format!("{:.16e}", self.x[(i, j)]));
            }
            writer
                .write_record(&rec)
                .map_err(|e| Error::Invalid(format!("csv write: {e}")))?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// PSU structure of a dataset, grouped by stratum.
#[derive(Debug, Clone)]
pub struct PsuIndex {
    /// PSU index of each unit.
    pub unit_psu: Vec<usize>,
    /// Unit indices belonging to each PSU.
    pub units_by_psu: Vec<Vec<usize>>,
    /// Stratum labels in first-appearance order.
    pub strata: Vec<String>,
    /// PSU indices belonging to each stratum.
    pub psus_by_stratum: Vec<Vec<usize>>,
}

impl PsuIndex {
    pub fn n_psus(&self) -> usize {
        self.units_by_psu.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SurveyDataset {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 1.0, -0.5, 1.0, 1.5, 1.0, 0.0]);
        SurveyDataset::new(
            vec![1.0, 0.0, 1.0, 0.0],
            x,
            vec!["intercept".into(), "x".into()],
            vec![1, 1, 2, 2],
            vec!["a".into(), "a".into(), "b".into(), "b".into()],
            None,
            vec![2.0, 2.0, 1.0, 3.0],
            None,
        )
        .unwrap()
    }

    #[test]
    fn rejects_nonpositive_weights() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let err = SurveyDataset::new(
            vec![1.0, 0.0],
            x,
            vec!["intercept".into()],
            vec![1, 1],
            vec!["a".into(), "a".into()],
            None,
            vec![1.0, 0.0],
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_zero_column() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let err = SurveyDataset::new(
            vec![1.0, 0.0],
            x,
            vec!["intercept".into(), "z".into()],
            vec![1, 1],
            vec!["a".into(), "a".into()],
            None,
            vec![1.0, 1.0],
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn normalize_records_scale() {
        let mut d = toy();
        let scale = d.normalize_weights();
        assert!((scale - 2.0).abs() < 1e-12);
        assert!((d.weights().iter().sum::<f64>() - 4.0).abs() < 1e-12);
        assert!((d.weight_scale() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn psu_index_groups_units() {
        let d = toy();
        let idx = d.psu_index();
        assert_eq!(idx.n_psus(), 2);
        assert_eq!(idx.units_by_psu[0], vec![0, 1]);
        assert_eq!(idx.units_by_psu[1], vec![2, 3]);
        assert_eq!(idx.strata, vec!["_all".to_string()]);
        assert_eq!(idx.psus_by_stratum[0], vec![0, 1]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut d = toy();
        d.normalize_weights();
        d.to_csv(&path).unwrap();
        let back = SurveyDataset::from_csv(&path).unwrap();
        assert_eq!(back.n(), 4);
        assert_eq!(back.n_covariates(), 2);
        // weights come back on the original scale
        assert!((back.weights()[0] - 2.0).abs() < 1e-12);
        assert_eq!(back.group(), d.group());
    }

    #[test]
    fn csv_missing_weight_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "y,group,psu,x\n1,1,a,0.5\n").unwrap();
        let err = SurveyDataset::from_csv(&path).unwrap_err();
        assert!(err.to_string().contains("weight"), "{err}");
    }

    #[test]
    fn csv_parse_error_carries_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "y,weight,group,psu,x\n1,1.0,1,a,0.5\n1,oops,1,a,0.1\n").unwrap();
        let err = SurveyDataset::from_csv(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other}"),
        }
    }
}
