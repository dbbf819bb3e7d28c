//! The single-sample ELBO, assembled in closed form on the autodiff tape, and
//! a Monte-Carlo estimator of the same terms.
//!
//! Term scale follows the printed objective:
//!
//! ```text
//! L = −Σ_dd ‖X − x̂‖² / v
//!     − Σ_sci Σ_c γ_c Σ_n [log σ̂²_c + (X_n − E_c(t_n))² / σ̂²_c]
//!     − Σ_c γ_c Σ_j [log σ²_cj + σ²_j/σ²_cj + (μ_j − μ_cj)²/σ²_cj]
//!     + 2 Σ_c γ_c log(π_c / γ_c)
//!     + Σ_j (1 + log σ²_j)
//! ```
//!
//! which is twice the usual evidence bound with the `log 2π` constants
//! dropped. [`elbo_monte_carlo`] estimates each term from canonical
//! log-densities and maps them onto this scale.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::exec::{map_chunks, Exec};
use crate::expert::{evaluate_at, ExpertKind};
use crate::gaussian::{VAR_MAX, VAR_MIN};
use crate::model::{GammaMode, PimaModel, Reconstruction};
use crate::nn::mlp::{forward_tape, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::nn::{Tape, Var};
use crate::prior::{gamma_posterior, GAMMA_FLOOR};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon_dd: f64,
    pub recon_sci: f64,
    pub latent_fit: f64,
    pub categorical: f64,
    pub entropy: f64,
    pub total: f64,
}

impl ElboBreakdown {
    fn from_terms(recon_dd: f64, recon_sci: f64, latent_fit: f64, categorical: f64, entropy: f64) -> Self {
        Self {
            recon_dd,
            recon_sci,
            latent_fit,
            categorical,
            entropy,
            total: recon_dd + recon_sci + latent_fit + categorical + entropy,
        }
    }

    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("recon_dd", self.recon_dd),
            ("recon_sci", self.recon_sci),
            ("latent_fit", self.latent_fit),
            ("categorical", self.categorical),
            ("entropy", self.entropy),
        ]
    }

    pub fn accumulate(&mut self, other: &ElboBreakdown) {
        self.recon_dd += other.recon_dd;
        self.recon_sci += other.recon_sci;
        self.latent_fit += other.latent_fit;
        self.categorical += other.categorical;
        self.entropy += other.entropy;
        self.total += other.total;
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            recon_dd: self.recon_dd * k,
            recon_sci: self.recon_sci * k,
            latent_fit: self.latent_fit * k,
            categorical: self.categorical * k,
            entropy: self.entropy * k,
            total: self.total * k,
        }
    }
}

/// Handles into a recorded ELBO graph. Term nodes are N×1.
pub(crate) struct ElboGraph {
    pub recon_dd: Var,
    pub recon_sci: Var,
    pub latent_fit: Var,
    pub categorical: Var,
    pub entropy: Var,
    pub total: Var,
    pub mean: Var,
    pub gamma: Var,
}

/// Fused PoE posterior on the tape from per-modality encoder outputs.
pub(crate) fn fused_posterior_tape(
    model: &PimaModel,
    tape: &mut Tape,
    vars: &[Var],
    batch: &[Array2<f64>],
    which: &[usize],
) -> (Var, Var) {
    let l = model.latent_dim();
    let mut prec_sum = None;
    let mut weighted_sum = None;
    for &m in which {
        let enc = &model.config().modalities[m].encoder;
        let slots = model.layout().encoders[m].clone();
        let x = tape.constant(batch[m].clone());
        let h = forward_tape(enc, tape, &vars[slots], x);
        let mu = tape.slice_cols(h, 0, l);
        let lv = tape.slice_cols(h, l, l);
        let lv = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        let neg = tape.neg(lv);
        let prec = tape.exp(neg);
        let w = tape.mul(mu, prec);
        prec_sum = Some(match prec_sum {
            None => prec,
            Some(p) => tape.add(p, prec),
        });
        weighted_sum = Some(match weighted_sum {
            None => w,
            Some(s) => tape.add(s, w),
        });
    }
    let prec = prec_sum.expect("at least one modality");
    let var = tape.recip(prec);
    let var = tape.clamp(var, VAR_MIN, VAR_MAX);
    let mean = tape.mul(weighted_sum.expect("at least one modality"), var);
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
fn model_gamma(
    model: &PimaModel,
    tape: &mut Tape,
    z: Var,
    mean: Var,
    cmeans: Var,
    cprec: Var,
    logdet: Var,
    logpi: Var,
) -> Var {
    let at = match model.config().gamma_mode {
        GammaMode::Sample => z,
        GammaMode::Mean => mean,
    };
    let dg = tape.pairwise_sq_dist(at, cmeans, cprec);
    let dg = tape.scale(dg, -0.5);
    let half_logdet = tape.scale(logdet, 0.5);
    let row = tape.sub(logpi, half_logdet);
    let scores = tape.add_row(dg, row);
    let lg = tape.log_softmax_rows(scores);
    let g0 = tape.exp(lg);
    let gf = tape.clamp(g0, GAMMA_FLOOR, 1.0);
    let gsum = tape.sum_cols(gf);
    tape.div_col(gf, gsum)
}

/// Records the per-sample ELBO for a batch. `eps` holds one standard-normal
/// row per sample.
pub(crate) fn build_elbo(
    model: &PimaModel,
    tape: &mut Tape,
    vars: &[Var],
    batch: &[Array2<f64>],
    eps: &Array2<f64>,
    fixed_gamma: Option<&Array2<f64>>,
) -> ElboGraph {
    let n = batch[0].nrows();
    let l = model.latent_dim();
    let c = model.clusters();
    let layout = model.layout();
    let all: Vec<usize> = (0..model.modality_count()).collect();
    let (mean, var) = fused_posterior_tape(model, tape, vars, batch, &all);

    let eps_v = tape.constant(eps.clone());
    let sd = tape.sqrt(var);
    let noise = tape.mul(eps_v, sd);
    let z = tape.add(mean, noise);

    // Prior pieces.
    let lvp = tape.clamp(vars[layout.cluster_log_vars], LOG_VAR_MIN, LOG_VAR_MAX);
    let neg_lvp = tape.neg(lvp);
    let cprec = tape.exp(neg_lvp);
    let cmeans = vars[layout.cluster_means];
    let logdet = tape.sum_cols(lvp);
    let logdet = tape.transpose(logdet);
    let logpi = tape.log_softmax_rows(vars[layout.logits]);

    // Responsibilities, unless supplied.
    let gamma = match fixed_gamma {
        Some(g) => {
            let g = g.mapv(|v| v.clamp(GAMMA_FLOOR, 1.0));
            let sums = g.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
            tape.constant(&g / &sums)
        }
        None => model_gamma(model, tape, z, mean, cmeans, cprec, logdet, logpi),
    };


    // −Σ_c γ_c Σ_j [log σ²_cj + σ²_j/σ²_cj + (μ_j − μ_cj)²/σ²_cj]
    let cprec_t = tape.transpose(cprec);
    let cross = tape.matmul(var, cprec_t);
    let dist = tape.pairwise_sq_dist(mean, cmeans, cprec);
    let inner = tape.add(cross, dist);
    let inner = tape.add_row(inner, logdet);
    let weighted = tape.mul(gamma, inner);
    let latent_fit = tape.sum_cols(weighted);
    let latent_fit = tape.neg(latent_fit);

    // 2 Σ_c γ_c (log π_c − log γ_c)
    let log_gamma = tape.log(gamma);
    let neg_lg = tape.neg(log_gamma);
    let inner = tape.add_row(neg_lg, logpi);
    let weighted = tape.mul(gamma, inner);
    let categorical = tape.sum_cols(weighted);
    let categorical = tape.scale(categorical, 2.0);

    // Σ_j (1 + log σ²_j)
    let log_var = tape.log(var);
    let entropy = tape.sum_cols(log_var);
    let entropy = tape.add_scalar(entropy, l as f64);

    let zeros = || Array2::<f64>::zeros((n, 1));
    let mut recon_dd = tape.constant(zeros());
    let mut recon_sci = tape.constant(zeros());
    for (m, cfg) in model.config().modalities.iter().enumerate() {
        let x = tape.constant(batch[m].clone());
        match &cfg.reconstruction {
            Reconstruction::DataDriven { decoder, variance } => {
                let slots = layout.decoders[m].clone().expect("decoder slot");
                let xhat = forward_tape(decoder, tape, &vars[slots], z);
                let r = tape.sub(x, xhat);
                let r2 = tape.square(r);
                let s = tape.sum_cols(r2);
                let s = tape.scale(s, -1.0 / variance);
                recon_dd = tape.add(recon_dd, s);
            }
            Reconstruction::Scientific { expert, .. } => {
                let slots = layout.experts[m].expect("expert slot");
                let t_len = expert.len();
                let curves = match expert.kind {
                    ExpertKind::Affine => {
                        let t = tape.constant(
                            Array2::from_shape_vec((1, t_len), expert.t_grid.clone())
                                .expect("row vector"),
                        );
                        tape.matmul(vars[slots.theta], t)
                    }
                    ExpertKind::StrainHardening => {
                        tape.strain_hardening(vars[slots.theta], &expert.t_grid)
                    }
                };
                let lv = tape.clamp(vars[slots.log_var], LOG_VAR_MIN, LOG_VAR_MAX);
                let neg = tape.neg(lv);
                let prec = tape.exp(neg);
                let ones = tape.constant(Array2::ones((c, t_len)));
                let prec = tape.mul_col(ones, prec);
                let d = tape.pairwise_sq_dist(x, curves, prec);
                let lv_row = tape.transpose(lv);
                let lv_row = tape.scale(lv_row, t_len as f64);
                let inner = tape.add_row(d, lv_row);
                let weighted = tape.mul(gamma, inner);
                let s = tape.sum_cols(weighted);
                let s = tape.neg(s);
                recon_sci = tape.add(recon_sci, s);
            }
        }
    }

    let total = tape.add(recon_dd, recon_sci);
    let total = tape.add(total, latent_fit);
    let total = tape.add(total, categorical);
    let total = tape.add(total, entropy);
    ElboGraph {
        recon_dd,
        recon_sci,
        latent_fit,
        categorical,
        entropy,
        total,
        mean,
        gamma,
    }
}

fn check_inputs(model: &PimaModel, batch: &[Array2<f64>], eps: &Array2<f64>) -> Result<()> {
    model.check_batch(batch)?;
    if batch[0].nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    check_dim("noise rows", batch[0].nrows(), eps.nrows())?;
    check_dim("noise width", model.latent_dim(), eps.ncols())?;
    Ok(())
}

fn breakdown_rows(tape: &Tape, g: &ElboGraph) -> Result<Vec<ElboBreakdown>> {
    let col = |v: Var| tape.value(v).column(0).to_owned();
    let cols = [
        ("recon_dd", col(g.recon_dd)),
        ("recon_sci", col(g.recon_sci)),
        ("latent_fit", col(g.latent_fit)),
        ("categorical", col(g.categorical)),
        ("entropy", col(g.entropy)),
    ];
    for (name, c) in &cols {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("elbo term {name}")));
        }
    }
    Ok((0..cols[0].1.len())
        .map(|i| {
            ElboBreakdown::from_terms(cols[0].1[i], cols[1].1[i], cols[2].1[i], cols[3].1[i], cols[4].1[i])
        })
        .collect())
}

/// Per-sample closed-form ELBO terms for a batch and fixed noise.
pub fn elbo_closed_form(
    model: &PimaModel,
    batch: &[Array2<f64>],
    eps: &Array2<f64>,
) -> Result<Vec<ElboBreakdown>> {
    check_inputs(model, batch, eps)?;
    let mut tape = Tape::new();
    let vars = model.params().register(&mut tape, &vec![false; model.params().len()]);
    let g = build_elbo(model, &mut tape, &vars, batch, eps, None);
    breakdown_rows(&tape, &g)
}

/// `−Σ_d L_d` over the batch.
pub fn batch_loss(model: &PimaModel, batch: &[Array2<f64>], eps: &Array2<f64>) -> Result<f64> {
    Ok(-elbo_closed_form(model, batch, eps)?
        .iter()
        .map(|b| b.total)
        .sum::<f64>())
}

/// Batch loss, summed term breakdown and gradients for every parameter
/// slot (zeros for frozen slots).
#[derive(Clone, Debug)]
pub struct LossGradient {
    pub loss: f64,
    pub breakdown: ElboBreakdown,
    pub gradients: Vec<Array2<f64>>,
    /// Fused posterior means and responsibilities seen by this pass.
    pub means: Array2<f64>,
    pub gamma: Array2<f64>,
}

pub fn loss_and_gradients(
    model: &PimaModel,
    batch: &[Array2<f64>],
    eps: &Array2<f64>,
    trainable: &[bool],
) -> Result<LossGradient> {
    loss_and_gradients_with_gamma(model, batch, eps, trainable, None)
}

/// As [`loss_and_gradients`], optionally with responsibilities held fixed
/// at `fixed_gamma` (N×C rows on the simplex) instead of computed from the
/// prior.
pub fn loss_and_gradients_with_gamma(
    model: &PimaModel,
    batch: &[Array2<f64>],
    eps: &Array2<f64>,
    trainable: &[bool],
    fixed_gamma: Option<&Array2<f64>>,
) -> Result<LossGradient> {
    check_inputs(model, batch, eps)?;
    check_dim("trainable mask", model.params().len(), trainable.len())?;
    if let Some(g) = fixed_gamma {
        check_dim("fixed gamma rows", batch[0].nrows(), g.nrows())?;
        check_dim("fixed gamma clusters", model.clusters(), g.ncols())?;
    }
    let mut tape = Tape::new();
    let vars = model.params().register(&mut tape, trainable);
    let g = build_elbo(model, &mut tape, &vars, batch, eps, fixed_gamma);
    let rows = breakdown_rows(&tape, &g)?;
    let total = tape.sum_all(g.total);
    let loss_var = tape.neg(total);
    let mut grads = tape.backward(loss_var)?;
    let gradients = vars
        .iter()
        .zip(&model.params().tensors)
        .map(|(v, t)| grads.take(*v, t.dim()))
        .collect();
    let mut breakdown = ElboBreakdown::default();
    rows.iter().for_each(|r| breakdown.accumulate(r));
    Ok(LossGradient {
        loss: tape.scalar(loss_var),
        breakdown,
        gradients,
        means: tape.value(g.mean).clone(),
        gamma: tape.value(g.gamma).clone(),
    })
}

/// Closed-form terms over a large set, evaluated in row chunks. Noise comes
/// from `seed` so the result does not depend on `exec` or `chunk`.
pub fn evaluate_dataset(
    model: &PimaModel,
    data: &[Array2<f64>],
    seed: u64,
    exec: Exec,
    chunk: usize,
) -> Result<Vec<ElboBreakdown>> {
    model.check_batch(data)?;
    let n = data[0].nrows();
    let eps = standard_normal_rows(n, model.latent_dim(), seed);
    let parts = map_chunks(exec, n, chunk.max(1), |start, end| {
        let batch: Vec<Array2<f64>> = data
            .iter()
            .map(|x| x.slice(ndarray::s![start..end, ..]).to_owned())
            .collect();
        let e = eps.slice(ndarray::s![start..end, ..]).to_owned();
        elbo_closed_form(model, &batch, &e)
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `n×l` standard-normal draws where row `i` depends only on `(seed, i)`.
pub fn standard_normal_rows(n: usize, l: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, l), || rng.sample(StandardNormal))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte-Carlo estimates of each ELBO term on the printed scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloElbo {
    pub recon_dd: TermEstimate,
    pub recon_sci: TermEstimate,
    pub latent_fit: TermEstimate,
    pub categorical: TermEstimate,
    pub entropy: TermEstimate,
    pub n_samples: usize,
    /// Responsibilities held fixed during sampling.
    pub gamma: Vec<f64>,
}

impl MonteCarloElbo {
    pub fn terms(&self) -> [(&'static str, TermEstimate); 5] {
        [
            ("recon_dd", self.recon_dd),
            ("recon_sci", self.recon_sci),
            ("latent_fit", self.latent_fit),
            ("categorical", self.categorical),
            ("entropy", self.entropy),
        ]
    }
}

#[derive(Clone, Copy, Default)]
struct Moments {
    sum: [f64; 5],
    sq: [f64; 5],
}

/// Estimates `E_{q(Z|X)} E_{c~γ}` of every ELBO term for a single record.
///
/// `γ` is computed once, exactly as the closed form does for noise `eps0`,
/// and then held fixed. Fresh draws `Z ~ q(Z|X)` give the latent, entropy and
/// data-driven terms through canonical log-densities; draws `c ~ γ` give the
/// categorical and expert terms. Samples are split into seeded chunks, so the
/// estimate does not depend on `exec`.
pub fn elbo_monte_carlo(
    model: &PimaModel,
    sample: &[Array2<f64>],
    eps0: &[f64],
    n_samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<MonteCarloElbo> {
    model.check_batch(sample)?;
    check_dim("monte carlo record count", 1, sample[0].nrows())?;
    check_dim("noise width", model.latent_dim(), eps0.len())?;
    if n_samples < 2 {
        return Err(Error::invalid("monte carlo needs at least two samples"));
    }
    let l = model.latent_dim();
    let prior = model.prior();
    let (mean, var) = model.fuse_all(sample)?;
    let (mean, var) = (mean.row(0).to_owned(), var.row(0).to_owned());
    let sd = var.mapv(f64::sqrt);
    let gamma = match model.config().gamma_mode {
        GammaMode::Sample => {
            let z0: Vec<f64> = (0..l).map(|j| mean[j] + eps0[j] * sd[j]).collect();
            gamma_posterior(&prior, &z0)?
        }
        GammaMode::Mean => gamma_posterior(&prior, &mean.to_vec())?,
    };
    let log_pi = prior.log_weights();
    let log_q_const: f64 = var.iter().map(|v| LN_2PI + v.ln()).sum::<f64>();

    // Per-cluster expert log-likelihoods do not depend on Z.
    let mut sci_loglik = vec![0.0; prior.clusters()];
    let mut sci_points = 0usize;
    for (m, cfg) in model.config().modalities.iter().enumerate() {
        if let Some(spec) = cfg.expert() {
            let params = model.expert_params(m).expect("expert params");
            let s2 = model.expert_variances(m).expect("expert variances");
            let x = sample[m].row(0);
            sci_points += spec.len();
            for (c, ll) in sci_loglik.iter_mut().enumerate() {
                let e = evaluate_at(spec.kind, &params.row(c), &spec.t_grid);
                *ll += x
                    .iter()
                    .zip(&e)
                    .map(|(xv, ev)| -0.5 * (LN_2PI + s2[c].ln() + (xv - ev).powi(2) / s2[c]))
                    .sum::<f64>();
            }
        }
    }
    let dd: Vec<(usize, f64)> = model
        .config()
        .modalities
        .iter()
        .enumerate()
        .filter_map(|(m, cfg)| match &cfg.reconstruction {
            Reconstruction::DataDriven { variance, .. } => Some((m, *variance)),
            _ => None,
        })
        .collect();

    let chunk = 4096;
    let parts = map_chunks(exec, n_samples, chunk, |start, end| -> Result<Moments> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let rows = end - start;
        let eps = Array2::from_shape_simple_fn((rows, l), || rng.sample::<f64, _>(StandardNormal));
        let z = &eps * &sd + &mean;
        let mut decoded = Vec::with_capacity(dd.len());
        for &(m, v) in &dd {
            decoded.push((m, v, model.decode(m, z.view())?));
        }
        let mut mom = Moments::default();
        for i in 0..rows {
            let zi = z.row(i);
            // 2 Σ_c γ_c log N(z; μ_c, σ²_c) + l log 2π
            let comp = prior.component_log_densities(&zi.to_vec())?;
            let latent = 2.0 * gamma.iter().zip(&comp).map(|(g, lp)| g * lp).sum::<f64>()
                + l as f64 * LN_2PI;
            // −2 log q(z) − l log 2π
            let log_q = -0.5 * (log_q_const + eps.row(i).dot(&eps.row(i)));
            let entropy = -2.0 * log_q - l as f64 * LN_2PI;
            let mut recon_dd = 0.0;
            for (m, v, xhat) in &decoded {
                let x = sample[*m].row(0);
                let d = x.len() as f64;
                let log_lik: f64 = -0.5
                    * (d * (LN_2PI + v.ln())
                        + x.iter().zip(xhat.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v);
                recon_dd += 2.0 * log_lik + d * (LN_2PI + v.ln());
            }
            let c = draw_categorical(&gamma, rng.random::<f64>());
            let categorical = 2.0 * (log_pi[c] - gamma[c].ln());
            let recon_sci = 2.0 * sci_loglik[c] + sci_points as f64 * LN_2PI;
            let vals = [recon_dd, recon_sci, latent, categorical, entropy];
            for k in 0..5 {
                mom.sum[k] += vals[k];
                mom.sq[k] += vals[k] * vals[k];
            }
        }
        Ok(mom)
    });
    let mut total = Moments::default();
    for p in parts {
        let p = p?;
        for k in 0..5 {
            total.sum[k] += p.sum[k];
            total.sq[k] += p.sq[k];
        }
    }
    let nf = n_samples as f64;
    let est = |k: usize| {
        let mean = total.sum[k] / nf;
        let var = ((total.sq[k] / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
        TermEstimate {
            mean,
            std_error: (var / nf).sqrt(),
        }
    };
    Ok(MonteCarloElbo {
        recon_dd: est(0),
        recon_sci: est(1),
        latent_fit: est(2),
        categorical: est(3),
        entropy: est(4),
        n_samples,
        gamma,
    })
}

fn draw_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Fused posterior means for a dataset, in parallel row chunks.
pub fn fused_means(model: &PimaModel, data: &[Array2<f64>], exec: Exec, chunk: usize) -> Result<Array2<f64>> {
    model.check_batch(data)?;
    let n = data[0].nrows();
    let parts = map_chunks(exec, n, chunk.max(1), |start, end| {
        let batch: Vec<Array2<f64>> = data
            .iter()
            .map(|x| x.slice(ndarray::s![start..end, ..]).to_owned())
            .collect();
        model.fuse_all(&batch).map(|(m, _)| m)
    });
    let mut out = Array2::zeros((0, model.latent_dim()));
    for p in parts {
        out.append(Axis(0), p?.view()).expect("latent width");
    }
    Ok(out)
}

/// Responsibilities at given latent points, in parallel row chunks.
pub fn responsibilities(
    model: &PimaModel,
    points: ArrayView2<f64>,
    exec: Exec,
    chunk: usize,
) -> Result<Array2<f64>> {
    check_dim("latent width", model.latent_dim(), points.ncols())?;
    let prior = model.prior();
    let rows = map_chunks(exec, points.nrows(), chunk.max(1), |start, end| {
        (start..end)
            .map(|i| gamma_posterior(&prior, &points.row(i).to_vec()))
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Array2::zeros((points.nrows(), model.clusters()));
    let mut i = 0;
    for part in rows {
        for g in part? {
            out.row_mut(i).assign(&Array1::from(g));
            i += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::ExpertKind;
    use crate::model::tests::tiny_config;
    use crate::nn::OutputHead;
    use approx::assert_relative_eq;

    fn tiny_model(seed: u64, kind: ExpertKind) -> PimaModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = PimaModel::new(tiny_config(kind), &mut rng).unwrap();
        let means = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-1.0..1.0));
        m.set_cluster_means(means).unwrap();
        let lay = m.layout().clone();
        for slot in [lay.logits, lay.cluster_log_vars] {
            m.params_mut().tensors[slot].mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        // Off-knot yield strains keep the expert curve differentiable.
        let theta = match kind {
            ExpertKind::Affine => Array2::from_shape_simple_fn((3, 1), || rng.random_range(-2.0..2.0)),
            ExpertKind::StrainHardening => Array2::from_shape_fn((3, 3), |(_, k)| match k {
                0 => rng.random_range(0.5..2.0),
                1 => 0.3 + 0.1 * rng.random::<f64>(),
                _ => rng.random_range(-0.5..0.5),
            }),
        };
        m.set_expert_theta(1, theta).unwrap();
        let lv = m.layout().experts[1].unwrap().log_var;
        m.params_mut().tensors[lv].mapv_inplace(|_| rng.random_range(-0.5..0.5));
        m
    }

    fn tiny_batch(n: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            Array2::from_shape_simple_fn((n, 4), || rng.random_range(0.0..1.0)),
            Array2::from_shape_simple_fn((n, 5), || rng.random_range(0.0..1.0)),
        ]
    }

    #[test]
    fn single_cluster_has_zero_categorical_term() {
        let mut cfg = tiny_config(ExpertKind::Affine);
        cfg.clusters = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = PimaModel::new(cfg, &mut rng).unwrap();
        let b = tiny_batch(3, 1);
        let rows = elbo_closed_form(&m, &b, &standard_normal_rows(3, 2, 0)).unwrap();
        assert!(rows.iter().all(|r| r.categorical == 0.0));
    }

    #[test]
    fn matched_posterior_gives_minus_l_latent_fit() {
        // Zero encoders give N(0, ½ I) after fusing two unit Gaussians; a
        // single modality keeps N(0, I), matching a unit cluster at 0.
        let mut cfg = tiny_config(ExpertKind::Affine);
        cfg.clusters = 1;
        cfg.modalities.truncate(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = PimaModel::new(cfg, &mut rng).unwrap();
        for r in m.layout().encoders[0].clone() {
            m.params_mut().tensors[r].fill(0.0);
        }
        let b = vec![tiny_batch(2, 0).swap_remove(0)];
        let rows = elbo_closed_form(&m, &b, &standard_normal_rows(2, 2, 1)).unwrap();
        for r in rows {
            assert_relative_eq!(r.latent_fit, -2.0, epsilon = 1e-12);
            assert_relative_eq!(r.entropy, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn total_is_sum_of_terms_and_loss_is_additive() {
        let m = tiny_model(5, ExpertKind::StrainHardening);
        let b = tiny_batch(1, 9);
        let e = standard_normal_rows(1, 2, 3);
        let r = elbo_closed_form(&m, &b, &e).unwrap()[0];
        let s: f64 = r.terms().iter().map(|t| t.1).sum();
        assert!((r.total - s).abs() <= 1e-12 * s.abs().max(1.0));
        assert_eq!(batch_loss(&m, &b, &e).unwrap(), -r.total);

        let b2: Vec<Array2<f64>> = b
            .iter()
            .map(|x| ndarray::concatenate![Axis(0), x.view(), x.view()])
            .collect();
        let e2 = ndarray::concatenate![Axis(0), e.view(), e.view()];
        assert_eq!(batch_loss(&m, &b2, &e2).unwrap(), -2.0 * r.total);
        assert!(r.categorical <= 0.0);
    }

    #[test]
    fn gradient_pass_agrees_with_closed_form() {
        let m = tiny_model(1, ExpertKind::Affine);
        let b = tiny_batch(4, 2);
        let e = standard_normal_rows(4, 2, 7);
        let mask = vec![true; m.params().len()];
        let lg = loss_and_gradients(&m, &b, &e, &mask).unwrap();
        assert_relative_eq!(lg.loss, batch_loss(&m, &b, &e).unwrap(), max_relative = 1e-14);
        assert_eq!(lg.gradients.len(), m.params().len());
    }

    #[test]
    fn input_shape_errors() {
        let m = tiny_model(1, ExpertKind::Affine);
        let b = tiny_batch(2, 2);
        assert!(elbo_closed_form(&m, &b, &standard_normal_rows(3, 2, 0)).is_err());
        assert!(elbo_closed_form(&m, &b[..1], &standard_normal_rows(2, 2, 0)).is_err());
    }

    #[test]
    fn monte_carlo_standard_error_scales_with_sqrt_n() {
        let m = tiny_model(3, ExpertKind::Affine);
        let b = tiny_batch(1, 4);
        let a = elbo_monte_carlo(&m, &b, &[0.1, -0.2], 20_000, 1, Exec::default()).unwrap();
        let c = elbo_monte_carlo(&m, &b, &[0.1, -0.2], 40_000, 2, Exec::default()).unwrap();
        let ratio = a.entropy.std_error / c.entropy.std_error;
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn monte_carlo_is_independent_of_exec() {
        let m = tiny_model(3, ExpertKind::Affine);
        let b = tiny_batch(1, 4);
        let p = elbo_monte_carlo(&m, &b, &[0.0, 0.0], 10_000, 5, Exec::Parallel).unwrap();
        let s = elbo_monte_carlo(&m, &b, &[0.0, 0.0], 10_000, 5, Exec::Sequential).unwrap();
        assert_eq!(p, s);
    }

    #[test]
    fn collapsed_posterior_matches_closed_form() {
        let mut m = tiny_model(8, ExpertKind::Affine);
        // Push every encoder's log-variance output to the clamp floor.
        for (i, cfg) in m.config().modalities.clone().iter().enumerate() {
            assert_eq!(cfg.encoder.head, OutputHead::Gaussian);
            let last_bias = m.layout().encoders[i].end - 1;
            let l = m.latent_dim();
            m.params_mut().tensors[last_bias]
                .slice_mut(ndarray::s![.., l..])
                .fill(-40.0);
        }
        let b = tiny_batch(1, 6);
        let e = [0.3, -0.7];
        let cf = elbo_closed_form(&m, &b, &Array2::from_shape_vec((1, 2), e.to_vec()).unwrap())
            .unwrap()[0];
        let mc = elbo_monte_carlo(&m, &b, &e, 100_000, 3, Exec::default()).unwrap();
        for ((name, want), (_, got)) in cf.terms().iter().zip(mc.terms()) {
            if *name == "entropy" {
                assert!((want - got.mean).abs() < 4.0 * got.std_error + 1e-9);
            } else if *name == "recon_dd" || *name == "latent_fit" {
                assert!((want - got.mean).abs() <= 1e-4 * want.abs(), "{name}");
            } else {
                assert!((want - got.mean).abs() < 4.0 * got.std_error + 1e-9, "{name}");
            }
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        for kind in [ExpertKind::Affine, ExpertKind::StrainHardening] {
            let mut m = tiny_model(11, kind);
            let b = tiny_batch(3, 12);
            let e = standard_normal_rows(3, 2, 13);
            let mask = vec![true; m.params().len()];
            let lg = loss_and_gradients(&m, &b, &e, &mask).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for slot in 0..m.params().len() {
                for idx in 0..m.params().tensors[slot].len() {
                    let orig = m.params().tensors[slot].as_slice().unwrap()[idx];
                    m.params_mut().tensors[slot].as_slice_mut().unwrap()[idx] = orig + h;
                    let up = batch_loss(&m, &b, &e).unwrap();
                    m.params_mut().tensors[slot].as_slice_mut().unwrap()[idx] = orig - h;
                    let down = batch_loss(&m, &b, &e).unwrap();
                    m.params_mut().tensors[slot].as_slice_mut().unwrap()[idx] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = lg.gradients[slot].as_slice().unwrap()[idx];
                    let err = (fd - an).abs() / (fd.abs().max(an.abs()) + 1e-6);
                    assert!(err < 1e-4, "{} [{idx}]: fd {fd} vs {an}", m.params().names[slot]);
                    worst = worst.max(err);
                }
            }
            assert!(worst < 1e-4);
        }
    }
}
