//! Gaussian-mixture latent prior, cluster responsibilities and the EM update
//! of cluster centers (batch and streaming).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{DiagGaussian, VAR_MAX, VAR_MIN};

/// Responsibilities are floored at this value before renormalization so that
/// `log γ` stays finite.
pub const GAMMA_FLOOR: f64 = 1e-10;

/// Column sums of γ below this count as an empty cluster.
pub const EMPTY_CLUSTER_WEIGHT: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Categorical weights (softmax of `logits`) over `C` isotropic-per-axis
/// Gaussian clusters in latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePrior {
    logits: Vec<f64>,
    means: Array2<f64>,
    vars: Array2<f64>,
}

impl MixturePrior {
    pub fn new(logits: Vec<f64>, means: Array2<f64>, vars: Array2<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Empty("mixture logits"));
        }
        check_dim("cluster means rows", logits.len(), means.nrows())?;
        check_dim("cluster variance rows", logits.len(), vars.nrows())?;
        check_dim("cluster variance cols", means.ncols(), vars.ncols())?;
        if means.ncols() == 0 {
            return Err(Error::Empty("latent dimension"));
        }
        if logits.iter().chain(means.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixture prior".into()));
        }
        if let Some((index, &value)) = vars
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(Error::NonPositiveVariance { index, value });
        }
        let vars = vars.mapv(|v| v.clamp(VAR_MIN, VAR_MAX));
        Ok(Self {
            logits,
            means,
            vars,
        })
    }

    /// Zero logits, zero means, unit variances.
    pub fn standard(clusters: usize, latent_dim: usize) -> Self {
        Self {
            logits: vec![0.0; clusters],
            means: Array2::zeros((clusters, latent_dim)),
            vars: Array2::ones((clusters, latent_dim)),
        }
    }

    pub fn clusters(&self) -> usize {
        self.logits.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn vars(&self) -> &Array2<f64> {
        &self.vars
    }

    /// `log π` by a max-shifted log-sum-exp.
    pub fn log_weights(&self) -> Vec<f64> {
        let max = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + self
                .logits
                .iter()
                .map(|x| (x - max).exp())
                .sum::<f64>()
                .ln();
        self.logits.iter().map(|x| x - lse).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights().into_iter().map(f64::exp).collect()
    }

    pub fn component(&self, c: usize) -> DiagGaussian {
        DiagGaussian::new(self.means.row(c).to_vec(), self.vars.row(c).to_vec())
            .expect("prior components are validated at construction")
    }

    /// `log p(z | c)` for every cluster.
    pub fn component_log_densities(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("latent point", self.dim(), z.len())?;
        Ok((0..self.clusters())
            .map(|c| {
                let s: f64 = (0..self.dim())
                    .map(|j| {
                        let v = self.vars[[c, j]];
                        let d = z[j] - self.means[[c, j]];
                        LN_2PI + v.ln() + d * d / v
                    })
                    .sum();
                -0.5 * s
            })
            .collect())
    }
}

/// Normalizes log-weights into a floored simplex vector.
pub(crate) fn normalize_log_weights(logw: &[f64]) -> Vec<f64> {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logw.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = p.iter().sum();
    for x in p.iter_mut() {
        *x = (*x / s).max(GAMMA_FLOOR);
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Posterior cluster responsibilities `p(c | z) ∝ π_c N(z; μ_c, σ²_c)`,
/// computed in log space, floored at [`GAMMA_FLOOR`] and renormalized.
pub fn gamma_posterior(prior: &MixturePrior, z: &[f64]) -> Result<Vec<f64>> {
    let logp = prior.component_log_densities(z)?;
    let logw: Vec<f64> = logp
        .iter()
        .zip(prior.log_weights())
        .map(|(a, b)| a + b)
        .collect();
    Ok(normalize_log_weights(&logw))
}

/// Row-stochastic N×C matrix of cluster responsibilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    gamma: Array2<f64>,
}

impl Responsibilities {
    /// Validates that rows are non-negative and sum to one within 1e-9.
    pub fn new(gamma: Array2<f64>) -> Result<Self> {
        if gamma.ncols() == 0 {
            return Err(Error::Empty("responsibility columns"));
        }
        for (i, row) in gamma.rows().into_iter().enumerate() {
            if row.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
                return Err(Error::invalid(format!("responsibility row {i} is not valid")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "responsibility row {i} sums to {s}"
                )));
            }
        }
        Ok(Self { gamma })
    }

    /// One-hot rows from hard assignments.
    pub fn one_hot(assignments: &[usize], clusters: usize) -> Result<Self> {
        let mut gamma = Array2::zeros((assignments.len(), clusters));
        for (i, &c) in assignments.iter().enumerate() {
            if c >= clusters {
                return Err(Error::invalid(format!("cluster {c} out of range")));
            }
            gamma[[i, c]] = 1.0;
        }
        Ok(Self { gamma })
    }

    pub fn from_prior(prior: &MixturePrior, points: ArrayView2<f64>) -> Result<Self> {
        check_dim("latent points", prior.dim(), points.ncols())?;
        let mut gamma = Array2::zeros((points.nrows(), prior.clusters()));
        for (i, z) in points.rows().into_iter().enumerate() {
            let g = gamma_posterior(prior, &z.to_vec())?;
            gamma.row_mut(i).assign(&Array1::from(g));
        }
        Ok(Self { gamma })
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.gamma.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.nrows() == 0
    }

    pub fn clusters(&self) -> usize {
        self.gamma.ncols()
    }

    /// Σ_d γ_cd per cluster.
    pub fn occupancy(&self) -> Vec<f64> {
        self.gamma.sum_axis(Axis(0)).to_vec()
    }

    /// Most responsible cluster per row; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.gamma.rows().into_iter().map(|r| argmax(r.iter())).collect()
    }
}

pub(crate) fn argmax<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// New cluster means plus the clusters that received no responsibility and
/// kept their previous mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EmUpdate {
    pub means: Array2<f64>,
    pub empty_clusters: Vec<usize>,
}

/// `μ_c = Σ_d γ_cd μ_d / Σ_d γ_cd`; clusters with negligible weight keep
/// `previous[c]`.
pub fn em_update_means(
    gammas: ArrayView2<f64>,
    encoded_means: ArrayView2<f64>,
    previous: &Array2<f64>,
) -> Result<EmUpdate> {
    let mut em = StreamingEm::new(gammas.ncols(), encoded_means.ncols());
    em.push(gammas, encoded_means)?;
    if em.batches == 0 {
        return Err(Error::Empty("em_update_means data"));
    }
    em.finish(previous)
}

/// Incremental weighted mean over a stream of (γ, μ) blocks. After all
/// blocks it equals [`em_update_means`] on the concatenated data.
#[derive(Clone, Debug)]
pub struct StreamingEm {
    weight: Vec<f64>,
    mean: Array2<f64>,
    batches: usize,
}

impl StreamingEm {
    pub fn new(clusters: usize, latent_dim: usize) -> Self {
        Self {
            weight: vec![0.0; clusters],
            mean: Array2::zeros((clusters, latent_dim)),
            batches: 0,
        }
    }

    pub fn push(&mut self, gammas: ArrayView2<f64>, encoded_means: ArrayView2<f64>) -> Result<()> {
        check_dim("em batch rows", gammas.nrows(), encoded_means.nrows())?;
        check_dim("em clusters", self.weight.len(), gammas.ncols())?;
        check_dim("em latent dim", self.mean.ncols(), encoded_means.ncols())?;
        if gammas.nrows() == 0 {
            return Ok(());
        }
        self.batches += 1;
        let batch_weight = gammas.sum_axis(Axis(0));
        let batch_sum = gammas.t().dot(&encoded_means);
        for c in 0..self.weight.len() {
            let w_old = self.weight[c];
            let w_new = w_old + batch_weight[c];
            if w_new <= 0.0 {
                continue;
            }
            for j in 0..self.mean.ncols() {
                self.mean[[c, j]] = (w_old * self.mean[[c, j]] + batch_sum[[c, j]]) / w_new;
            }
            self.weight[c] = w_new;
        }
        Ok(())
    }

    /// Accumulated weight per cluster.
    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn finish(self, previous: &Array2<f64>) -> Result<EmUpdate> {
        if previous.dim() != self.mean.dim() {
            return Err(Error::invalid("previous cluster means have the wrong shape"));
        }
        let mut means = self.mean;
        let mut empty_clusters = Vec::new();
        for (c, &w) in self.weight.iter().enumerate() {
            if w < EMPTY_CLUSTER_WEIGHT {
                means.row_mut(c).assign(&previous.row(c));
                empty_clusters.push(c);
            }
        }
        Ok(EmUpdate {
            means,
            empty_clusters,
        })
    }
}

/// Runs [`StreamingEm`] over a sequence of `(γ-block, μ-block)` pairs.
pub fn streaming_em<'a, I>(batches: I, previous: &Array2<f64>) -> Result<EmUpdate>
where
    I: IntoIterator<Item = (ArrayView2<'a, f64>, ArrayView2<'a, f64>)>,
{
    let mut em = StreamingEm::new(previous.nrows(), previous.ncols());
    for (g, m) in batches {
        em.push(g, m)?;
    }
    em.finish(previous)
}

/// `Σ_{c,d} γ_cd Σ_j (μ_dj − μ_cj)² / σ²_cj`, the part of the loss the EM
/// step minimizes over the cluster means.
pub fn latent_quadratic(
    gammas: ArrayView2<f64>,
    encoded_means: ArrayView2<f64>,
    cluster_means: &Array2<f64>,
    cluster_vars: &Array2<f64>,
) -> f64 {
    let mut total = 0.0;
    for (g, m) in gammas.rows().into_iter().zip(encoded_means.rows()) {
        for c in 0..cluster_means.nrows() {
            let q: f64 = (0..m.len())
                .map(|j| {
                    let d = m[j] - cluster_means[[c, j]];
                    d * d / cluster_vars[[c, j]]
                })
                .sum();
            total += g[c] * q;
        }
    }
    total
}

/// Draws `(c, z)` with `c ~ Cat(π)` and `z ~ N(μ_c, σ²_c)`.
pub fn sample_prior<R: Rng + ?Sized>(prior: &MixturePrior, rng: &mut R) -> (usize, Vec<f64>) {
    let weights = prior.weights();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut c = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            c = i;
            break;
        }
    }
    let z = (0..prior.dim())
        .map(|j| {
            let e: f64 = StandardNormal.sample(rng);
            prior.means[[c, j]] + e * prior.vars[[c, j]].sqrt()
        })
        .collect();
    (c, z)
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
pub fn kmeans_pp_seed<R: Rng + ?Sized>(
    points: ArrayView2<f64>,
    k: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let n = points.nrows();
    if n == 0 || k == 0 {
        return Err(Error::Empty("k-means++ seeding"));
    }
    let mut centers = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let sq = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut nearest: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq(p, centers.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq(p, centers.row(c)));
        }
    }
    Ok(centers)
}

/// Sum of squared distances from each point to its assigned center.
pub fn kmeans_inertia(points: ArrayView2<f64>, centers: &Array2<f64>, assign: &[usize]) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(assign)
        .map(|(p, &c)| p.iter().zip(centers.row(c)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

/// k-means++ seeding followed by at most `max_iter` Lloyd iterations,
/// repeated `restarts` times; the partition with the lowest inertia wins.
/// A cluster that loses all points keeps its previous center.
pub fn kmeans<R: Rng + ?Sized>(
    points: ArrayView2<f64>,
    k: usize,
    max_iter: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let nearest = |centers: &Array2<f64>| -> Vec<usize> {
        points
            .rows()
            .into_iter()
            .map(|p| {
                let d: Vec<f64> = centers
                    .rows()
                    .into_iter()
                    .map(|c| -c.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .collect();
                argmax(d.iter())
            })
            .collect()
    };
    let mut best: Option<(f64, Array2<f64>, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = kmeans_pp_seed(points, k, rng)?;
        let mut assign = nearest(&centers);
        for _ in 0..max_iter {
            let gamma = Responsibilities::one_hot(&assign, k)?;
            centers = em_update_means(gamma.view(), points, &centers)?.means;
            let next = nearest(&centers);
            if next == assign {
                break;
            }
            assign = next;
        }
        let inertia = kmeans_inertia(points, &centers, &assign);
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, centers, assign));
        }
    }
    let (_, centers, assign) = best.expect("at least one restart");
    Ok((centers, assign))
}
