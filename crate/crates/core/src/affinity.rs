//! Cross-camera k-NN Gaussian affinities and the soft-label rows derived
//! from them.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::PersonBuffer;
use crate::dataset::PersonIndex;
use crate::error::{Error, Result};
use crate::eval::average_precision;

/// Sparse `C x C` affinity matrix; each row holds at most `k` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    /// Row `i`: `(column, value)` pairs sorted by column.
    rows: Vec<Vec<(usize, f64)>>,
    pub sigma_sq: f64,
    pub k: usize,
    pub epoch_built: usize,
    pub mask_same_camera: bool,
}

#[derive(Debug, Clone)]
pub struct AffinityBuild {
    pub matrix: AffinityMatrix,
    pub warnings: Vec<String>,
}

impl AffinityMatrix {
    /// Assembles a matrix from explicit rows. Columns are sorted.
    pub fn from_rows(mut rows: Vec<Vec<(usize, f64)>>, sigma_sq: f64, k: usize) -> Self {
        for r in &mut rows {
            r.sort_by_key(|&(c, _)| c);
        }
        Self {
            rows,
            sigma_sq,
            k,
            epoch_built: 0,
            mask_same_camera: true,
        }
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0.0, |p| self.rows[i][p].1)
    }

    pub fn nonzeros(&self) -> usize {
        self.rows.iter().map(|r| r.iter().filter(|e| e.1 > 0.0).count()).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.size();
        let mut out = vec![vec![0.0; n]; n];
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                out[i][j] = v;
            }
        }
        out
    }

    /// Writes `row col value` lines for every stored nonzero entry.
    pub fn write_sparse(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "# row col value (C={}, sigma_sq={:?}, k={})", self.size(), self.sigma_sq, self.k)?;
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                if v > 0.0 {
                    writeln!(w, "{i} {j} {v:?}")?;
                }
            }
        }
        Ok(())
    }
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        _ => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

/// Builds the affinity matrix from a buffer snapshot.
///
/// For each row the candidates are all persons of other cameras (or all other
/// persons when `mask_same_camera` is off); the `k` nearest by squared
/// Euclidean distance are kept, ties going to the lower class index. The
/// kernel width `sigma_sq` is the mean squared distance over every kept
/// (row, neighbor) pair, and kept entries become `exp(-d^2 / sigma_sq)`.
pub fn build_affinity(buf: &PersonBuffer, index: &PersonIndex, k: usize, mask_same_camera: bool) -> Result<AffinityBuild> {
    let c = index.num_classes();
    if buf.num_classes() != c {
        return Err(Error::Contract(format!(
            "buffer has {} columns, index has {c} classes",
            buf.num_classes()
        )));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let populated = index.per_camera().iter().filter(|&&n| n > 0).count();
    if populated < 2 {
        return Err(Error::NoCrossCamera(format!(
            "persons span {populated} camera(s), at least 2 are required"
        )));
    }
    let missing = buf.uninitialized();
    if !missing.is_empty() {
        return Err(Error::Uninitialized(missing));
    }

    let camera: Vec<usize> = (0..c).map(|i| index.camera_of(i).expect("in range")).collect();
    let feats = buf.features();
    let neighbours: Vec<Vec<(usize, f64)>> = (0..c)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(usize, f64)> = (0..c)
                .filter(|&j| j != i && (!mask_same_camera || camera[j] != camera[i]))
                .map(|j| (j, squared_distance(feats.row(i), feats.row(j))))
                .collect();
            let order = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
            if cand.len() > k {
                cand.select_nth_unstable_by(k, order);
                cand.truncate(k);
            }
            cand.sort_by(order);
            cand
        })
        .collect();

    let (sum, count) = neighbours
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), &(_, d)| (s + d, n + 1));
    let sigma_sq = sum / count as f64;
    let mut warnings = Vec::new();
    if sigma_sq == 0.0 {
        warnings.push("sigma_sq is zero (all kept neighbours coincide); affinities set to 1".to_string());
    }
    let rows = neighbours
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|(j, d)| (j, if sigma_sq > 0.0 { (-d / sigma_sq).exp() } else { 1.0 }))
                .collect()
        })
        .collect();
    let mut matrix = AffinityMatrix::from_rows(rows, sigma_sq, k);
    matrix.mask_same_camera = mask_same_camera;
    Ok(AffinityBuild { matrix, warnings })
}

/// Normalized affinity row of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelRow {
    pub class: usize,
    /// Nonzero `(class, weight)` pairs sorted by class; empty when degenerate.
    pub weights: Vec<(usize, f64)>,
    pub degenerate: bool,
}

impl SoftLabelRow {
    /// One-hot row on `class` (the plain cross-entropy target).
    pub fn one_hot(owner: usize, class: usize) -> Self {
        Self {
            class: owner,
            weights: vec![(class, 1.0)],
            degenerate: false,
        }
    }

    pub fn weight(&self, class: usize) -> f64 {
        self.weights
            .binary_search_by_key(&class, |&(c, _)| c)
            .map_or(0.0, |p| self.weights[p].1)
    }
}

pub fn soft_label_rows(a: &AffinityMatrix) -> Vec<SoftLabelRow> {
    (0..a.size())
        .map(|i| {
            let total: f64 = a.row(i).iter().map(|e| e.1).sum();
            if total > 0.0 {
                SoftLabelRow {
                    class: i,
                    weights: a
                        .row(i)
                        .iter()
                        .filter(|e| e.1 > 0.0)
                        .map(|&(j, v)| (j, v / total))
                        .collect(),
                    degenerate: false,
                }
            } else {
                SoftLabelRow {
                    class: i,
                    weights: Vec::new(),
                    degenerate: true,
                }
            }
        })
        .collect()
}

/// Mean average precision of retrieving same-identity persons of other
/// cameras from each affinity row. Rows rank every cross-camera person by
/// affinity (descending, ties by class index); rows without a cross-camera
/// true match are excluded.
pub fn affinity_quality_map(a: &AffinityMatrix, index: &PersonIndex, truth: &[Option<usize>]) -> Result<f64> {
    let c = a.size();
    if truth.len() != c || index.num_classes() != c {
        return Err(Error::Contract(format!(
            "affinity size {c}, truth table {}, index {}",
            truth.len(),
            index.num_classes()
        )));
    }
    let camera: Vec<Option<usize>> = (0..c).map(|j| index.camera_of(j)).collect();
    let mut total = 0.0;
    let mut rows = 0usize;
    for i in 0..c {
        let Some(ti) = truth[i] else { continue };
        let cam = camera[i].expect("in range");
        // nonzero entries by value, then the zero entries in class order
        let mut ranked: Vec<(usize, f64)> = a
            .row(i)
            .iter()
            .copied()
            .filter(|&(j, v)| v > 0.0 && camera[j] != Some(cam))
            .collect();
        ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let mut relevance: Vec<bool> = ranked.iter().map(|&(j, _)| truth[j] == Some(ti)).collect();
        let mut ranked_cols: Vec<usize> = ranked.iter().map(|r| r.0).collect();
        ranked_cols.sort_unstable();
        relevance.extend(
            (0..c)
                .filter(|&j| camera[j] != Some(cam) && ranked_cols.binary_search(&j).is_err())
                .map(|j| truth[j] == Some(ti)),
        );
        if let Some(ap) = average_precision(&relevance) {
            total += ap;
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::NoTrueMatches);
    }
    Ok(total / rows as f64)
}
