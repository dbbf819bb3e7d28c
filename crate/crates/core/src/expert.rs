//! Parametric physics decoders for scientific modalities, their mixture
//! moments and weighted least-squares refits.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// `E(t) = θ t`
    Affine,
    /// Elastic modulus, yield strain, plastic modulus.
    StrainHardening,
}

impl ExpertKind {
    pub fn parameter_count(self) -> usize {
        match self {
            ExpertKind::Affine => 1,
            ExpertKind::StrainHardening => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::Affine => "affine",
            ExpertKind::StrainHardening => "strain_hardening",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub kind: ExpertKind,
    pub t_grid: Vec<f64>,
}

impl ExpertSpec {
    pub fn new(kind: ExpertKind, t_grid: Vec<f64>) -> Result<Self> {
        let spec = Self { kind, t_grid };
        spec.validate()?;
        Ok(spec)
    }

    /// `n` evenly spaced points on `[lo, hi]`.
    pub fn linspace(kind: ExpertKind, lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("t_grid needs at least two points"));
        }
        let step = (hi - lo) / (n - 1) as f64;
        Self::new(kind, (0..n).map(|i| lo + step * i as f64).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_grid.len() < 2 {
            return Err(Error::invalid("t_grid needs at least two points"));
        }
        if self.t_grid.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("t_grid".into()));
        }
        if self.t_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("t_grid must be strictly increasing"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }

    pub fn t_min(&self) -> f64 {
        self.t_grid[0]
    }

    pub fn t_max(&self) -> f64 {
        self.t_grid[self.t_grid.len() - 1]
    }

    /// Checks the per-kind invariants on one parameter vector.
    pub fn check_params(&self, params: &[f64]) -> Result<()> {
        check_dim("expert parameter count", self.kind.parameter_count(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("expert parameters".into()));
        }
        if self.kind == ExpertKind::StrainHardening {
            let (e_e, t_y) = (params[0], params[1]);
            if e_e <= 0.0 {
                return Err(Error::invalid(format!("elastic modulus {e_e} must be positive")));
            }
            if !(t_y > self.t_min() && t_y < self.t_max()) {
                return Err(Error::invalid(format!(
                    "yield strain {t_y} outside ({}, {})",
                    self.t_min(),
                    self.t_max()
                )));
            }
        }
        Ok(())
    }
}

/// Per-cluster parameters, one row per cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub kind: ExpertKind,
    pub theta: Array2<f64>,
}

impl ExpertParams {
    pub fn new(spec: &ExpertSpec, theta: Array2<f64>) -> Result<Self> {
        for row in theta.rows() {
            spec.check_params(&row.to_vec())?;
        }
        Ok(Self {
            kind: spec.kind,
            theta,
        })
    }

    /// A neutral starting point: zero slope, or a unit elastic modulus
    /// yielding at the middle of the grid with no hardening.
    pub fn initial(spec: &ExpertSpec, clusters: usize) -> Self {
        let row = match spec.kind {
            ExpertKind::Affine => vec![0.0],
            ExpertKind::StrainHardening => vec![1.0, 0.5 * (spec.t_min() + spec.t_max()), 0.0],
        };
        let mut theta = Array2::zeros((clusters, row.len()));
        for mut r in theta.rows_mut() {
            r.assign(&ndarray::Array1::from(row.clone()));
        }
        Self {
            kind: spec.kind,
            theta,
        }
    }

    pub fn clusters(&self) -> usize {
        self.theta.nrows()
    }

    pub fn row(&self, c: usize) -> Vec<f64> {
        self.theta.row(c).to_vec()
    }

    /// `cluster,kind,p0,p1,p2,yield_stress` rows. Affine rows leave the
    /// unused columns empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster,kind,p0,p1,p2,yield_stress\n");
        for (c, row) in self.theta.rows().into_iter().enumerate() {
            match self.kind {
                ExpertKind::Affine => {
                    out.push_str(&format!("{c},affine,{},,,\n", row[0]));
                }
                ExpertKind::StrainHardening => out.push_str(&format!(
                    "{c},strain_hardening,{},{},{},{}\n",
                    row[0],
                    row[1],
                    row[2],
                    row[0] * row[1]
                )),
            }
        }
        out
    }
}

fn eval_unchecked(kind: ExpertKind, params: &[f64], t: f64) -> f64 {
    match kind {
        ExpertKind::Affine => params[0] * t,
        ExpertKind::StrainHardening => {
            let (e_e, t_y, e_p) = (params[0], params[1], params[2]);
            if t <= t_y {
                e_e * t
            } else {
                e_e * t_y + e_p * (t - t_y)
            }
        }
    }
}

/// The expert curve `E(t_n; θ)` on the spec's grid.
pub fn evaluate_expert(spec: &ExpertSpec, params: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    Ok(spec
        .t_grid
        .iter()
        .map(|&t| eval_unchecked(spec.kind, params, t))
        .collect())
}

/// Evaluates at arbitrary points without the grid-interior check on `t_y`.
pub fn evaluate_at(kind: ExpertKind, params: &[f64], t: &[f64]) -> Vec<f64> {
    t.iter().map(|&x| eval_unchecked(kind, params, x)).collect()
}

fn expert_curves(spec: &ExpertSpec, params: &ExpertParams) -> Result<Vec<Vec<f64>>> {
    (0..params.clusters())
        .map(|c| evaluate_expert(spec, &params.row(c)))
        .collect()
}

/// `Σ_c π_c E(t; θ_c)`.
pub fn moe_mean(pi: &[f64], spec: &ExpertSpec, params: &ExpertParams) -> Result<Vec<f64>> {
    check_dim("mixture weights", params.clusters(), pi.len())?;
    let curves = expert_curves(spec, params)?;
    Ok((0..spec.len())
        .map(|n| pi.iter().zip(&curves).map(|(p, e)| p * e[n]).sum())
        .collect())
}

/// `Σ_c π_c (σ²_c + E_c²) − (Σ_c π_c E_c)²`, clipped at zero against
/// cancellation.
pub fn moe_variance(
    pi: &[f64],
    spec: &ExpertSpec,
    params: &ExpertParams,
    sigma2: &[f64],
) -> Result<Vec<f64>> {
    check_dim("mixture weights", params.clusters(), pi.len())?;
    check_dim("expert variances", params.clusters(), sigma2.len())?;
    if let Some((index, &value)) = sigma2.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NonPositiveVariance { index, value });
    }
    let curves = expert_curves(spec, params)?;
    Ok((0..spec.len())
        .map(|n| {
            let mean: f64 = pi.iter().zip(&curves).map(|(p, e)| p * e[n]).sum();
            // Centered form avoids the E[X²] − E[X]² cancellation.
            let v: f64 = pi
                .iter()
                .zip(&curves)
                .zip(sigma2)
                .map(|((p, e), s)| p * (s + (e[n] - mean).powi(2)))
                .sum();
            v.max(0.0)
        })
        .collect())
}

/// `Σ_n [log σ² + (X_n − E(t_n))² / σ²]`.
pub fn expert_nll_term(
    spec: &ExpertSpec,
    params: &[f64],
    curve: &[f64],
    sigma2: f64,
) -> Result<f64> {
    check_dim("curve length", spec.len(), curve.len())?;
    if !(sigma2 > 0.0) {
        return Err(Error::NonPositiveVariance {
            index: 0,
            value: sigma2,
        });
    }
    let e = evaluate_expert(spec, params)?;
    Ok(curve
        .iter()
        .zip(&e)
        .map(|(x, m)| sigma2.ln() + (x - m).powi(2) / sigma2)
        .sum())
}

/// Weighted sufficient statistics of one cluster: total weight `W`,
/// weighted curve sum `S_n` and weighted sum of squares `Q`.
struct ClusterStats {
    w: f64,
    s: Vec<f64>,
    q: f64,
}

fn cluster_stats(data: ArrayView2<f64>, weights: ndarray::ArrayView1<f64>) -> ClusterStats {
    let s = weights.dot(&data).to_vec();
    let q = data
        .rows()
        .into_iter()
        .zip(weights.iter())
        .map(|(r, w)| w * r.dot(&r))
        .sum();
    ClusterStats {
        w: weights.sum(),
        s,
        q,
    }
}

/// Weighted objective `Σ_d w_d Σ_n (X_dn − E(t_n))²` from the sufficient
/// statistics.
fn stats_objective(stats: &ClusterStats, curve: &[f64]) -> f64 {
    let cross: f64 = stats.s.iter().zip(curve).map(|(s, e)| s * e).sum();
    let sq: f64 = curve.iter().map(|e| e * e).sum();
    stats.q - 2.0 * cross + stats.w * sq
}

fn fit_affine(t: &[f64], stats: &ClusterStats) -> Result<Vec<f64>> {
    let tt: f64 = t.iter().map(|x| x * x).sum();
    if tt <= 0.0 || stats.w <= 0.0 {
        return Err(Error::DegenerateFit(
            "affine normal equation has zero curvature".into(),
        ));
    }
    let ts: f64 = t.iter().zip(&stats.s).map(|(a, b)| a * b).sum();
    Ok(vec![ts / (stats.w * tt)])
}

/// Conditional (E_e, E_p) for a fixed yield strain and the objective value.
fn strain_conditional(t: &[f64], t_y: f64, stats: &ClusterStats) -> Option<(f64, f64, f64)> {
    let (mut uu, mut uv, mut vv, mut us, mut vs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&tn, &sn) in t.iter().zip(&stats.s) {
        let u = tn.min(t_y);
        let v = (tn - t_y).max(0.0);
        uu += u * u;
        uv += u * v;
        vv += v * v;
        us += u * sn;
        vs += v * sn;
    }
    let det = uu * vv - uv * uv;
    let scale = (uu * vv).max(f64::MIN_POSITIVE);
    if det <= 1e-14 * scale || stats.w <= 0.0 {
        return None;
    }
    let e_e = (vv * us - uv * vs) / (stats.w * det);
    let e_p = (uu * vs - uv * us) / (stats.w * det);
    if !(e_e > 0.0) || !e_p.is_finite() {
        return None;
    }
    let curve: Vec<f64> = t
        .iter()
        .map(|&tn| e_e * tn.min(t_y) + e_p * (tn - t_y).max(0.0))
        .collect();
    Some((e_e, e_p, stats_objective(stats, &curve)))
}

fn fit_strain_hardening(t: &[f64], stats: &ClusterStats) -> Result<Vec<f64>> {
    let n = t.len();
    let mut best: Option<(usize, f64, f64, f64)> = None;
    for (k, &t_y) in t.iter().enumerate().take(n - 1).skip(1) {
        if let Some((e_e, e_p, obj)) = strain_conditional(t, t_y, stats) {
            if best.is_none_or(|b| obj < b.3) {
                best = Some((k, e_e, e_p, obj));
            }
        }
    }
    let (k, mut e_e, mut e_p, obj) = best.ok_or_else(|| {
        Error::DegenerateFit("no admissible yield strain on the grid".into())
    })?;
    let mut t_y = t[k];
    // Golden-section refinement between the neighbouring knots; only
    // accepted when it clearly improves on the grid minimizer.
    let (mut a, mut b) = (t[k - 1], t[k + 1]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let eval = |y: f64| strain_conditional(t, y, stats).map_or(f64::INFINITY, |r| r.2);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (eval(x1), eval(x2));
    for _ in 0..60 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = eval(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = eval(x2);
        }
    }
    let y = 0.5 * (a + b);
    if y > t[0] && y < t[n - 1] {
        if let Some((ee, ep, o)) = strain_conditional(t, y, stats) {
            if o < obj - 1e-12 * stats.q {
                (e_e, e_p, t_y) = (ee, ep, y);
            }
        }
    }
    Ok(vec![e_e, t_y, e_p])
}

/// Fits one θ_c per cluster minimizing `Σ_d γ_cd ‖X_d − E(·; θ_c)‖²`.
pub fn weighted_ls_fit(
    spec: &ExpertSpec,
    data: ArrayView2<f64>,
    gammas: ArrayView2<f64>,
) -> Result<ExpertParams> {
    spec.validate()?;
    check_dim("curve length", spec.len(), data.ncols())?;
    check_dim("responsibility rows", data.nrows(), gammas.nrows())?;
    let clusters = gammas.ncols();
    let mut theta = Array2::zeros((clusters, spec.kind.parameter_count()));
    for c in 0..clusters {
        let row = fit_cluster(spec, data, gammas.column(c))?;
        theta.row_mut(c).assign(&ndarray::Array1::from(row));
    }
    Ok(ExpertParams {
        kind: spec.kind,
        theta,
    })
}

/// Fits a single cluster from its responsibility column.
pub fn fit_cluster(
    spec: &ExpertSpec,
    data: ArrayView2<f64>,
    weights: ndarray::ArrayView1<f64>,
) -> Result<Vec<f64>> {
    let stats = cluster_stats(data, weights);
    if !(stats.w > 0.0) {
        return Err(Error::DegenerateFit("cluster has zero total weight".into()));
    }
    match spec.kind {
        ExpertKind::Affine => fit_affine(&spec.t_grid, &stats),
        ExpertKind::StrainHardening => fit_strain_hardening(&spec.t_grid, &stats),
    }
}

/// Weighted residual sum `Σ_d w_d ‖X_d − E(·; θ)‖²`.
pub fn weighted_objective(
    spec: &ExpertSpec,
    data: ArrayView2<f64>,
    weights: ndarray::ArrayView1<f64>,
    params: &[f64],
) -> f64 {
    let e = evaluate_at(spec.kind, params, &spec.t_grid);
    data.axis_iter(Axis(0))
        .zip(weights.iter())
        .map(|(x, w)| w * x.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum()
}

/// Smallest variance returned by [`fit_cluster_variance`].
pub const EXPERT_VAR_FLOOR: f64 = 1e-6;

/// Weighted maximum-likelihood noise variance of one cluster around its
/// fitted curve, `Σ_d w_d ‖X_d − E‖² / (T Σ_d w_d)`, floored at
/// [`EXPERT_VAR_FLOOR`].
pub fn fit_cluster_variance(
    spec: &ExpertSpec,
    data: ArrayView2<f64>,
    weights: ndarray::ArrayView1<f64>,
    params: &[f64],
) -> Result<f64> {
    let w = weights.sum();
    if !(w > 0.0) {
        return Err(Error::DegenerateFit("cluster has zero total weight".into()));
    }
    let v = weighted_objective(spec, data, weights, params) / (w * spec.len() as f64);
    if !v.is_finite() {
        return Err(Error::NonFinite("expert variance".into()));
    }
    Ok(v.max(EXPERT_VAR_FLOOR))
}
