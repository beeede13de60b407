//! Rank-based Mahalanobis distances with a soft propensity-score caliper.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CALIPER_WIDTH: f64 = 0.2;
pub const DEFAULT_CALIPER_PENALTY: f64 = 1000.0;
const EIGEN_CUTOFF: f64 = 1e-10;

/// Exposed units (rows) by controls (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(rows: Vec<usize>, cols: Vec<usize>, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in 0..rows.len() {
            for j in 0..cols.len() {
                let d = f(i, j);
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::Input(format!("distance ({i}, {j}) = {d} is not a finite non-negative number")));
                }
                data.push(d);
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Row-major nested vectors with positional ids.
    pub fn from_rows(values: &[Vec<f64>]) -> Result<Self> {
        let nr = values.len();
        let nc = values.first().map_or(0, Vec::len);
        if values.iter().any(|r| r.len() != nc) {
            return Err(Error::Input("ragged distance rows".into()));
        }
        Self::from_fn((0..nr).collect(), (0..nc).collect(), |i, j| values[i][j])
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let nc = self.cols.len();
        &self.data[i * nc..(i + 1) * nc]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Delimited dump with unit labels, for debugging.
    pub fn to_delimited(&self, label: impl Fn(usize) -> String, delimiter: char) -> String {
        let mut out = String::from("exposed");
        for &c in &self.cols {
            let _ = write!(out, "{delimiter}{}", label(c));
        }
        out.push('\n');
        for (i, &r) in self.rows.iter().enumerate() {
            out.push_str(&label(r));
            for d in self.row(i) {
                let _ = write!(out, "{delimiter}{d}");
            }
            out.push('\n');
        }
        out
    }
}

/// Column-wise ranks 1..n, ties receiving their average rank.
pub fn rank_transform(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = DMatrix::zeros(n, x.ncols());
    let mut idx: Vec<usize> = Vec::with_capacity(n);
    for j in 0..x.ncols() {
        let col = x.column(j);
        idx.clear();
        idx.extend(0..n);
        idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && col[idx[end]] == col[idx[start]] {
                end += 1;
            }
            // positions start..end hold ranks start+1..=end
            let avg = (start + end + 1) as f64 / 2.0;
            for &i in &idx[start..end] {
                out[(i, j)] = avg;
            }
            start = end;
        }
    }
    out
}

/// Mahalanobis metric on rank-transformed covariates. The rank covariance is
/// rescaled so each diagonal equals the untied-rank variance `n(n+1)/12`, and
/// is inverted with a Moore-Penrose pseudo-inverse.
#[derive(Debug, Clone)]
pub struct RankMahalanobis {
    /// Whitened coordinates: the distance is the squared Euclidean distance here.
    coords: DMatrix<f64>,
}

impl RankMahalanobis {
    pub fn fit(ranks: &DMatrix<f64>) -> Result<Self> {
        let n = ranks.nrows();
        if n < 2 {
            return Err(Error::Input(format!("rank Mahalanobis needs at least 2 units, got {n}")));
        }
        let means: Vec<f64> = (0..ranks.ncols()).map(|j| ranks.column(j).mean()).collect();
        let vars: Vec<f64> = (0..ranks.ncols())
            .map(|j| ranks.column(j).iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / (n - 1) as f64)
            .collect();
        let kept: Vec<usize> = (0..ranks.ncols()).filter(|&j| vars[j] > 1e-12).collect();
        let k = kept.len();
        if k == 0 {
            return Ok(Self { coords: DMatrix::zeros(n, 0) });
        }
        let untied = (n * (n + 1)) as f64 / 12.0;
        let centered = DMatrix::from_fn(n, k, |i, c| ranks[(i, kept[c])] - means[kept[c]]);
        // tied columns have their variance raised to the untied value; the
        // coordinates themselves stay on the rank scale
        let scale: Vec<f64> = kept.iter().map(|&j| (untied / vars[j]).sqrt()).collect();
        let raw = centered.transpose() * &centered / (n - 1) as f64;
        let cov = DMatrix::from_fn(k, k, |a, b| raw[(a, b)] * scale[a] * scale[b]);
        let eig = cov.symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let basis: Vec<usize> = (0..k).filter(|&c| eig.eigenvalues[c] > EIGEN_CUTOFF * max_eig).collect();
        let proj = DMatrix::from_fn(k, basis.len(), |r, c| {
            eig.eigenvectors[(r, basis[c])] / eig.eigenvalues[basis[c]].sqrt()
        });
        Ok(Self { coords: centered * proj })
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.coords.row(a).iter().zip(self.coords.row(b).iter()).map(|(x, y)| (x - y).powi(2)).sum()
    }

    /// Distances between the listed unit rows; `ids` maps a row of the
    /// fitted matrix to the identifier stored in the result.
    pub fn matrix(&self, exposed: &[usize], controls: &[usize], ids: &[usize]) -> Result<DistanceMatrix> {
        DistanceMatrix::from_fn(
            exposed.iter().map(|&r| ids[r]).collect(),
            controls.iter().map(|&r| ids[r]).collect(),
            |i, j| self.distance(exposed[i], controls[j]),
        )
    }
}

/// Rank-based Mahalanobis distances between exposed and control rows of `x`.
/// Row positions serve as unit ids.
pub fn rank_mahalanobis(x: &DMatrix<f64>, exposed: &[bool]) -> Result<DistanceMatrix> {
    let metric = RankMahalanobis::fit(&rank_transform(x))?;
    let e: Vec<usize> = (0..x.nrows()).filter(|&i| exposed[i]).collect();
    let c: Vec<usize> = (0..x.nrows()).filter(|&i| !exposed[i]).collect();
    let ids: Vec<usize> = (0..x.nrows()).collect();
    metric.matrix(&e, &c, &ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CaliperScale {
    #[default]
    Probability,
    Logit,
}

impl CaliperScale {
    fn apply(self, p: f64) -> f64 {
        match self {
            CaliperScale::Probability => p,
            CaliperScale::Logit => (p / (1.0 - p)).ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Caliper {
    pub width_sd: f64,
    pub penalty: f64,
    #[serde(default)]
    pub scale: CaliperScale,
}

impl Default for Caliper {
    fn default() -> Self {
        Self { width_sd: DEFAULT_CALIPER_WIDTH, penalty: DEFAULT_CALIPER_PENALTY, scale: CaliperScale::Probability }
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Adds a flat penalty to pairs whose score gap exceeds `width_sd` standard
/// deviations of all the scores in the matrix. `row_scores`/`col_scores` are
/// aligned with the matrix rows and columns.
pub fn apply_caliper(d: &DistanceMatrix, row_scores: &[f64], col_scores: &[f64], caliper: &Caliper) -> Result<DistanceMatrix> {
    if row_scores.len() != d.nrows() || col_scores.len() != d.ncols() {
        return Err(Error::Input("caliper scores do not match the distance matrix".into()));
    }
    let rs: Vec<f64> = row_scores.iter().map(|&p| caliper.scale.apply(p)).collect();
    let cs: Vec<f64> = col_scores.iter().map(|&p| caliper.scale.apply(p)).collect();
    let all: Vec<f64> = rs.iter().chain(&cs).copied().collect();
    let width = caliper.width_sd * sample_sd(&all);
    DistanceMatrix::from_fn(d.rows.clone(), d.cols.clone(), |i, j| {
        let base = d.get(i, j);
        if (rs[i] - cs[j]).abs() > width {
            base + caliper.penalty
        } else {
            base
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn ranks() {
        assert_eq!(rank_transform(&col(&[5., 5., 7.])).as_slice(), &[1.5, 1.5, 3.0]);
        assert_eq!(rank_transform(&col(&[1., 2., 3.])).as_slice(), &[1., 2., 3.]);
        assert_eq!(rank_transform(&col(&[4.; 4])).as_slice(), &[2.5; 4]);
        assert_eq!(rank_transform(&col(&[3., 1., 2., 1.])).as_slice(), &[4., 1.5, 3., 1.5]);
    }

    #[test]
    fn one_covariate_hand_value() {
        let m = RankMahalanobis::fit(&rank_transform(&col(&[1., 2., 3.]))).unwrap();
        assert!((m.distance(0, 2) - 4.0).abs() < 1e-12);
        assert!((m.distance(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(m.distance(1, 1), 0.0);
    }

    #[test]
    fn identical_rows_zero_and_too_few_units() {
        let x = DMatrix::from_row_slice(3, 2, &[1., 2., 1., 2., 3., 0.]);
        let m = RankMahalanobis::fit(&rank_transform(&x)).unwrap();
        assert!(m.distance(0, 1).abs() < 1e-12);
        assert!(RankMahalanobis::fit(&DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn tie_correction_matches_direct_quadratic_form() {
        // two correlated columns with ties; compare with an explicit inverse
        let x = DMatrix::from_row_slice(6, 2, &[1., 3., 2., 3., 2., 1., 4., 5., 5., 2., 6., 6.]);
        let r = rank_transform(&x);
        let n = 6.0;
        let mean0 = r.column(0).mean();
        let mean1 = r.column(1).mean();
        let c = |a: usize, b: usize| {
            let (ma, mb) = ([mean0, mean1][a], [mean0, mean1][b]);
            (0..6).map(|i| (r[(i, a)] - ma) * (r[(i, b)] - mb)).sum::<f64>() / 5.0
        };
        let untied = n * (n + 1.0) / 12.0;
        let s0 = (untied / c(0, 0)).sqrt();
        let s1 = (untied / c(1, 1)).sqrt();
        let cov = DMatrix::from_row_slice(2, 2, &[untied, c(0, 1) * s0 * s1, c(0, 1) * s0 * s1, untied]);
        let inv = cov.try_inverse().unwrap();
        let m = RankMahalanobis::fit(&r).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                let d = nalgebra::Vector2::new(r[(a, 0)] - r[(b, 0)], r[(a, 1)] - r[(b, 1)]);
                let want = (d.transpose() * &inv * d)[(0, 0)];
                assert!((m.distance(a, b) - want).abs() < 1e-9, "{a} {b}");
            }
        }
    }

    #[test]
    fn collinear_and_constant_columns() {
        let x = DMatrix::from_fn(5, 3, |i, j| match j {
            0 => i as f64,
            1 => 2.0 * i as f64 + 1.0,
            _ => 7.0,
        });
        let m = RankMahalanobis::fit(&rank_transform(&x)).unwrap();
        let single = RankMahalanobis::fit(&rank_transform(&x.columns(0, 1).into_owned())).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                assert!((m.distance(a, b) - single.distance(a, b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn caliper_penalty() {
        let d = DistanceMatrix::from_rows(&[vec![2.0, 2.0]]).unwrap();
        // scores 0.5, 0.5, 0.9: sd = 0.2309, width = 0.0462
        let out = apply_caliper(&d, &[0.5], &[0.5, 0.9], &Caliper::default()).unwrap();
        assert_eq!(out.get(0, 0), 2.0);
        assert_eq!(out.get(0, 1), 1002.0);
    }

    #[test]
    fn caliper_all_outside_shifts_uniformly() {
        let d = DistanceMatrix::from_rows(&[vec![1.0, 3.0], vec![0.5, 2.0]]).unwrap();
        let out = apply_caliper(&d, &[0.9, 0.95], &[0.1, 0.05], &Caliper::default()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(out.get(i, j), d.get(i, j) + 1000.0);
            }
        }
    }

    #[test]
    fn logit_scale_caliper() {
        let d = DistanceMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let cal = Caliper { scale: CaliperScale::Logit, ..Caliper::default() };
        let out = apply_caliper(&d, &[0.5], &[0.5, 0.99], &cal).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(0, 1), 1000.0);
    }

    #[test]
    fn delimited_dump() {
        let d = DistanceMatrix::from_rows(&[vec![1.0, 2.5]]).unwrap();
        assert_eq!(d.to_delimited(|u| format!("u{u}"), ','), "exposed,u0,u1\nu0,1,2.5\n");
    }
}
