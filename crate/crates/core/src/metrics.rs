//! Unsupervised clustering accuracy by optimal assignment, confusion
//! matrices and band structure of the confusion.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Minimum-cost perfect matching for a square cost matrix (Hungarian method
/// with potentials, O(n³)). Returns `assignment[row] = col` and the total
/// cost.
fn hungarian_square(cost: &Array2<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays; index 0 is the virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[[i, assignment[i]]]).sum();
    (assignment, total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `columns[row]`; `None` when the row was matched to padding.
    pub columns: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of rows to columns of a rectangular matrix,
/// zero-padded to square.
pub fn linear_assignment(cost: &Array2<f64>) -> Result<Assignment> {
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    let (r, c) = cost.dim();
    let n = r.max(c);
    let mut square = Array2::zeros((n, n));
    square.slice_mut(ndarray::s![..r, ..c]).assign(cost);
    let (assignment, _) = hungarian_square(&square);
    let columns: Vec<Option<usize>> = assignment[..r]
        .iter()
        .map(|&j| (j < c).then_some(j))
        .collect();
    let total_cost = columns
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[[i, j]]))
        .sum();
    Ok(Assignment {
        columns,
        total_cost,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `mapping[cluster]`, `None` for clusters left without a label.
    pub mapping: Vec<Option<usize>>,
    pub accuracy: f64,
    /// Cluster × label counts.
    pub confusion: Array2<u64>,
}

impl AssignmentResult {
    /// Label × label counts with clusters replaced by their mapped label;
    /// records in unmapped clusters are dropped.
    pub fn mapped_confusion(&self) -> Array2<u64> {
        let l = self.confusion.ncols();
        let mut out = Array2::zeros((l, l));
        for (c, m) in self.mapping.iter().enumerate() {
            if let Some(pred) = m {
                for truth in 0..l {
                    out[[truth, *pred]] += self.confusion[[c, truth]];
                }
            }
        }
        out
    }

    pub fn confusion_csv(&self) -> String {
        matrix_csv(&self.mapped_confusion())
    }
}

pub fn matrix_csv(m: &Array2<u64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Best-over-mappings agreement between cluster ids and labels.
pub fn unsupervised_accuracy(true_labels: &[usize], cluster_ids: &[usize]) -> Result<AssignmentResult> {
    check_dim("cluster id count", true_labels.len(), cluster_ids.len())?;
    if true_labels.is_empty() {
        return Err(Error::Empty("accuracy input"));
    }
    let l = true_labels.iter().max().expect("non-empty") + 1;
    let c = cluster_ids.iter().max().expect("non-empty") + 1;
    let mut confusion = Array2::<u64>::zeros((c, l));
    for (&t, &k) in true_labels.iter().zip(cluster_ids) {
        confusion[[k, t]] += 1;
    }
    let max = *confusion.iter().max().expect("non-empty") as f64;
    let cost = confusion.mapv(|v| max - v as f64);
    let a = linear_assignment(&cost)?;
    let matched: u64 = a
        .columns
        .iter()
        .enumerate()
        .filter_map(|(k, j)| j.map(|j| confusion[[k, j]]))
        .sum();
    Ok(AssignmentResult {
        mapping: a.columns,
        accuracy: matched as f64 / true_labels.len() as f64,
        confusion,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    /// `|i − j| = 1`.
    #[default]
    Linear,
    /// Also counts the wrap-around pair `(0, L−1)`.
    Cyclic,
}

/// Share of off-diagonal mass on the ±1 off-diagonals of a square,
/// label-ordered confusion matrix. A matrix with no off-diagonal mass scores
/// 1.
pub fn band_score(confusion: &Array2<u64>, band: Band) -> Result<f64> {
    let (r, c) = confusion.dim();
    check_dim("band_score square matrix", r, c)?;
    let (mut off, mut near) = (0u64, 0u64);
    for ((i, j), &v) in confusion.indexed_iter() {
        if i == j {
            continue;
        }
        off += v;
        let d = i.abs_diff(j);
        if d == 1 || (band == Band::Cyclic && d == r - 1) {
            near += v;
        }
    }
    Ok(if off == 0 { 1.0 } else { near as f64 / off as f64 })
}
