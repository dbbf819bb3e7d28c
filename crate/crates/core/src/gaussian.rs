//! Diagonal-covariance Gaussians in latent space.
//!
//! Everything here is closed-form algebra on `N(mean, diag(var))`: product
//! fusion, log densities, reparameterized sampling, expected log densities,
//! entropies and KL divergences. All reductions run in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Lower clamp applied to every stored variance.
pub const VAR_MIN: f64 = 1e-8;
/// Upper clamp applied to every stored variance.
pub const VAR_MAX: f64 = 1e8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A Gaussian with diagonal covariance. Variances are always in
/// `[VAR_MIN, VAR_MAX]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    /// Builds a Gaussian, clamping variances into `[VAR_MIN, VAR_MAX]`.
    ///
    /// Non-positive or non-finite variances are rejected rather than clamped.
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Empty("gaussian mean"));
        }
        check_dim("gaussian variance", mean.len(), var.len())?;
        if let Some(i) = mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::NonFinite(format!("gaussian mean[{i}]")));
        }
        let var = var
            .into_iter()
            .enumerate()
            .map(|(index, v)| {
                if v > 0.0 && v.is_finite() {
                    Ok(v.clamp(VAR_MIN, VAR_MAX))
                } else if v == f64::INFINITY {
                    Ok(VAR_MAX)
                } else {
                    Err(Error::NonPositiveVariance { index, value: v })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mean, var })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Isotropic Gaussian `N(mean, var I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![var; n])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }

    pub fn precision(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.recip()).collect()
    }

    /// `log N(z; mean, diag(var))`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_dim("log_density point", self.dim(), z.len())?;
        let s: f64 = self
            .mean
            .iter()
            .zip(&self.var)
            .zip(z)
            .map(|((m, v), z)| LN_2PI + v.ln() + (z - m) * (z - m) / v)
            .sum();
        Ok(-0.5 * s)
    }

    /// Reparameterized draw `mean + eps ⊙ sqrt(var)`.
    pub fn sample_reparam(&self, eps: &[f64]) -> Result<Vec<f64>> {
        check_dim("reparameterization noise", self.dim(), eps.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.var)
            .zip(eps)
            .map(|((m, v), e)| m + e * v.sqrt())
            .collect())
    }

    /// Differential entropy `-∫ g log g`.
    pub fn entropy(&self) -> f64 {
        0.5 * self.var.iter().map(|v| 1.0 + LN_2PI + v.ln()).sum::<f64>()
    }
}

/// Product-of-experts fusion: precisions add and the fused mean is the
/// precision-weighted average of member means.
pub fn poe_fuse(members: &[DiagGaussian]) -> Result<DiagGaussian> {
    let first = members.first().ok_or(Error::Empty("poe_fuse members"))?;
    let l = first.dim();
    let mut precision = vec![0.0; l];
    let mut weighted = vec![0.0; l];
    for g in members {
        check_dim("poe_fuse member", l, g.dim())?;
        for j in 0..l {
            let p = g.var[j].recip();
            precision[j] += p;
            weighted[j] += g.mean[j] * p;
        }
    }
    let var: Vec<f64> = precision.iter().map(|p| p.recip()).collect();
    let mean = weighted.iter().zip(&var).map(|(w, v)| w * v).collect();
    DiagGaussian::new(mean, var)
}

/// `∫ f(z) log g(z) dz` for diagonal Gaussians `f` and `g`.
///
/// Per dimension this is `-½ [log 2πσ²_g + σ²_f/σ²_g + (μ_f − μ_g)²/σ²_g]`.
pub fn gaussian_cross_entropy(f: &DiagGaussian, g: &DiagGaussian) -> Result<f64> {
    check_dim("gaussian_cross_entropy", f.dim(), g.dim())?;
    let s: f64 = (0..f.dim())
        .map(|j| {
            let d = f.mean[j] - g.mean[j];
            LN_2PI + g.var[j].ln() + f.var[j] / g.var[j] + d * d / g.var[j]
        })
        .sum();
    Ok(-0.5 * s)
}

/// `KL(q ‖ p)`, non-negative and zero only when `q == p`.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dim("kl_diag", q.dim(), p.dim())?;
    let s: f64 = (0..q.dim())
        .map(|j| {
            let ratio = q.var[j] / p.var[j];
            let d = q.mean[j] - p.mean[j];
            (ratio - 1.0 - ratio.ln()) + d * d / p.var[j]
        })
        .sum();
    Ok(0.5 * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn g1(m: f64, v: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![v]).unwrap()
    }

    #[test]
    fn fuse_equal_standard_normals_halves_variance() {
        let f = poe_fuse(&[g1(0.0, 1.0), g1(0.0, 1.0)]).unwrap();
        assert_eq!(f.mean(), &[0.0]);
        assert_eq!(f.var(), &[0.5]);
    }

    #[test]
    fn fuse_symmetric_pair_lands_on_midpoint() {
        let f = poe_fuse(&[g1(1.0, 1.0), g1(3.0, 1.0)]).unwrap();
        assert_relative_eq!(f.mean()[0], 2.0);
        assert_relative_eq!(f.var()[0], 0.5);
    }

    #[test]
    fn fuse_singleton_is_identity() {
        let g = DiagGaussian::new(vec![0.3, -1.2], vec![0.7, 2.5]).unwrap();
        let f = poe_fuse(std::slice::from_ref(&g)).unwrap();
        assert_relative_eq!(f.mean()[0], 0.3, max_relative = 1e-15);
        assert_relative_eq!(f.mean()[1], -1.2, max_relative = 1e-15);
        assert_relative_eq!(f.var()[1], 2.5, max_relative = 1e-15);
    }

    #[test]
    fn fuse_rejects_mismatch_and_empty() {
        let a = g1(0.0, 1.0);
        let b = DiagGaussian::standard(2);
        assert!(matches!(
            poe_fuse(&[a, b]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(poe_fuse(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn construction_validates_and_clamps() {
        assert!(matches!(
            DiagGaussian::new(vec![0.0], vec![0.0]),
            Err(Error::NonPositiveVariance { index: 0, .. })
        ));
        assert!(DiagGaussian::new(vec![0.0], vec![-1.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![f64::NAN]).is_err());
        assert_eq!(g1(0.0, 1e-20).var()[0], VAR_MIN);
        assert_eq!(g1(0.0, 1e20).var()[0], VAR_MAX);
    }

    #[test]
    fn log_density_of_standard_normal() {
        let g = DiagGaussian::standard(1);
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(g.log_density(&[0.0]).unwrap(), -half_ln_2pi);
        assert_relative_eq!(g.log_density(&[0.0]).unwrap(), -0.918_938_5, epsilon = 1e-7);
        assert_relative_eq!(g.log_density(&[1.0]).unwrap(), -half_ln_2pi - 0.5);
        assert!(g.log_density(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn reparam_examples() {
        assert_eq!(g1(2.0, 4.0).sample_reparam(&[0.0]).unwrap(), vec![2.0]);
        assert_eq!(g1(0.0, 1.0).sample_reparam(&[0.37]).unwrap(), vec![0.37]);
        assert_eq!(g1(1.0, 4.0).sample_reparam(&[0.5]).unwrap(), vec![2.0]);
    }

    #[test]
    fn gaussian_cross_entropy_examples() {
        let std = DiagGaussian::standard(1);
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(
            gaussian_cross_entropy(&std, &std).unwrap(),
            -0.5 * (ln2pi + 1.0)
        );
        assert_relative_eq!(
            gaussian_cross_entropy(&std, &std).unwrap(),
            -1.418_938_5,
            epsilon = 1e-7
        );
        assert_relative_eq!(
            gaussian_cross_entropy(&std, &g1(1.0, 1.0)).unwrap(),
            -0.5 * (ln2pi + 2.0)
        );
    }

    #[test]
    fn entropy_examples() {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(DiagGaussian::standard(1).entropy(), 0.5 * (1.0 + ln2pi));
        let g = DiagGaussian::new(vec![0.1, 0.2, 0.3], vec![0.5, 1.5, 3.0]).unwrap();
        let g4 = DiagGaussian::new(vec![0.1, 0.2, 0.3], vec![2.0, 6.0, 12.0]).unwrap();
        assert_relative_eq!(
            g4.entropy() - g.entropy(),
            0.5 * 3.0 * 4f64.ln(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            g.entropy(),
            -gaussian_cross_entropy(&g, &g).unwrap(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn kl_examples() {
        let q = DiagGaussian::new(vec![0.4, -2.0], vec![0.3, 7.0]).unwrap();
        assert_eq!(kl_diag(&q, &q).unwrap(), 0.0);
        assert_relative_eq!(
            kl_diag(&DiagGaussian::standard(1), &g1(1.0, 1.0)).unwrap(),
            0.5
        );
        let p = DiagGaussian::new(vec![1.0, 0.5], vec![2.0, 0.25]).unwrap();
        let via_cross =
            gaussian_cross_entropy(&q, &q).unwrap() - gaussian_cross_entropy(&q, &p).unwrap();
        assert_relative_eq!(kl_diag(&q, &p).unwrap(), via_cross, max_relative = 1e-12);
    }
}
