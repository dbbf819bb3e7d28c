//! Oracle suite: every closed-form piece of the library checked against an
//! independent computation (Monte Carlo, finite differences, brute force).

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::elbo::{batch_loss, elbo_closed_form, elbo_monte_carlo, loss_and_gradients};
use crate::error::Result;
use crate::exec::{map_indexed, Exec};
use crate::expert::{
    evaluate_expert, moe_mean, moe_variance, weighted_ls_fit, ExpertKind, ExpertParams, ExpertSpec,
};
use crate::gaussian::{gaussian_cross_entropy, kl_diag, poe_fuse, DiagGaussian};
use crate::metrics::{linear_assignment, unsupervised_accuracy};
use crate::model::{GammaMode, ModalityConfig, ModelConfig, PimaModel, Reconstruction};
use crate::nn::{Activation, MlpConfig, OutputHead};
use crate::prior::{em_update_means, latent_quadratic, streaming_em};
use crate::seed;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Instance counts and sample sizes for each check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySizes {
    pub poe_sets: usize,
    pub lemma_instances: usize,
    pub lemma_samples: usize,
    pub elbo_models: usize,
    pub elbo_samples: usize,
    pub gradient_models: usize,
    pub em_trials: usize,
    pub moe_instances: usize,
    pub moe_samples: usize,
    pub assignment_instances: usize,
    pub kl_pairs: usize,
    pub recovery_instances: usize,
}

impl VerifySizes {
    pub fn full() -> Self {
        Self {
            poe_sets: 100,
            lemma_instances: 50,
            lemma_samples: 1_000_000,
            elbo_models: 25,
            elbo_samples: 100_000,
            gradient_models: 10,
            em_trials: 20,
            moe_instances: 20,
            moe_samples: 200_000,
            assignment_instances: 10,
            kl_pairs: 10_000,
            recovery_instances: 10,
        }
    }

    /// A fast configuration for smoke runs.
    pub fn tiny() -> Self {
        Self {
            poe_sets: 10,
            lemma_instances: 4,
            lemma_samples: 20_000,
            elbo_models: 3,
            elbo_samples: 20_000,
            gradient_models: 2,
            em_trials: 3,
            moe_instances: 3,
            moe_samples: 20_000,
            assignment_instances: 3,
            kl_pairs: 500,
            recovery_instances: 3,
        }
    }
}

impl Default for VerifySizes {
    fn default() -> Self {
        Self::full()
    }
}

/// Deliberate defects for checking that the suite notices them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    /// Negates the KL divergence.
    KlSignFlip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub instances: usize,
    /// Largest deviation seen, in the units of `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub note: String,
    pub details: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub sizes: VerifySizes,
    pub fault: Fault,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &str, instances: usize, worst: f64, tolerance: f64, note: impl Into<String>, details: serde_json::Value) -> Check {
    Check {
        name: name.into(),
        passed: worst <= tolerance,
        instances,
        worst,
        tolerance,
        note: note.into(),
        details,
    }
}

fn random_gaussian<R: Rng>(rng: &mut R, dim: usize) -> DiagGaussian {
    let mean = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let var = (0..dim).map(|_| rng.random_range(-2.0f64..1.5).exp()).collect();
    DiagGaussian::new(mean, var).expect("positive variances")
}

/// Fused density is proportional to the product of member densities, and
/// precisions add.
pub fn check_poe(seed: u64, sets: usize) -> Result<Check> {
    let mut rng = seed::rng(seed, "verify.poe", 0);
    let (mut worst_ratio, mut worst_prec): (f64, f64) = (0.0, 0.0);
    for _ in 0..sets {
        let dim = rng.random_range(1..=4);
        let k = rng.random_range(1..=5);
        let members: Vec<DiagGaussian> = (0..k).map(|_| random_gaussian(&mut rng, dim)).collect();
        let fused = poe_fuse(&members)?;
        for j in 0..dim {
            let sum: f64 = members.iter().map(|m| m.precision()[j]).sum();
            worst_prec = worst_prec.max((fused.precision()[j] - sum).abs() / sum);
        }
        let mut ratios = Vec::new();
        for _ in 0..8 {
            let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let prod: f64 = members.iter().map(|m| m.log_density(&z)).sum::<Result<f64>>()?;
            ratios.push(fused.log_density(&z)? - prod);
        }
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        worst_ratio = worst_ratio.max(hi - lo);
    }
    // Express both tolerances on one scale: deviation / tolerance.
    let worst = (worst_ratio / 1e-9).max(worst_prec / 1e-12);
    Ok(check(
        "poe_fusion",
        sets,
        worst,
        1.0,
        "log-ratio spread / 1e-9 and relative precision error / 1e-12",
        json!({"log_ratio_spread": worst_ratio, "precision_rel_error": worst_prec}),
    ))
}

struct Mc {
    mean: f64,
    se: f64,
}

fn mc_stats(sum: f64, sq: f64, n: usize) -> Mc {
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sq / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
    Mc {
        mean,
        se: (var / nf).sqrt(),
    }
}

/// Cross-entropy and entropy against sampling, including which variance
/// ratio orientation the sampled values support.
pub fn check_lemma(seed: u64, instances: usize, samples: usize, exec: Exec) -> Result<Check> {
    let rows = map_indexed(exec, instances, |i| -> Result<serde_json::Value> {
        let mut rng = seed::rng(seed, "verify.lemma", i as u64);
        let dim = rng.random_range(1..=4);
        let f = random_gaussian(&mut rng, dim);
        let g = random_gaussian(&mut rng, dim);
        let (mut s_ce, mut q_ce, mut s_h, mut q_h) = (0.0, 0.0, 0.0, 0.0);
        let mut z = vec![0.0; dim];
        for _ in 0..samples {
            for j in 0..dim {
                z[j] = f.mean()[j] + f.std()[j] * rng.sample::<f64, _>(StandardNormal);
            }
            let lg = g.log_density(&z)?;
            let lf = -f.log_density(&z)?;
            s_ce += lg;
            q_ce += lg * lg;
            s_h += lf;
            q_h += lf * lf;
        }
        let ce = mc_stats(s_ce, q_ce, samples);
        let h = mc_stats(s_h, q_h, samples);
        let exact_ce = gaussian_cross_entropy(&f, &g)?;
        let transposed: f64 = -0.5
            * (0..dim)
                .map(|j| {
                    let d = f.mean()[j] - g.mean()[j];
                    LN_2PI + g.var()[j].ln() + g.var()[j] / f.var()[j] + d * d / g.var()[j]
                })
                .sum::<f64>();
        Ok(json!({
            "dim": dim,
            "cross_entropy_z": (exact_ce - ce.mean) / ce.se,
            "entropy_z": (f.entropy() - h.mean) / h.se,
            "transposed_z": (transposed - ce.mean) / ce.se,
        }))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let z = |r: &serde_json::Value, k: &str| r[k].as_f64().unwrap_or(f64::INFINITY).abs();
    let worst = rows
        .iter()
        .map(|r| z(r, "cross_entropy_z").max(z(r, "entropy_z")))
        .fold(0.0, f64::max);
    let transposed_ok = rows.iter().filter(|r| z(r, "transposed_z") <= 4.0).count();
    Ok(check(
        "gaussian_lemma",
        instances,
        worst,
        4.0,
        format!(
            "standard errors; the transposed ratio σ²_g/σ²_f agrees on {transposed_ok}/{instances} instances (only where the variances nearly coincide)"
        ),
        json!({"instances": rows, "transposed_consistent": transposed_ok}),
    ))
}

/// A small random model: one data-driven and one scientific modality with
/// randomized prior, expert and noise parameters.
pub fn random_tiny_model<R: Rng>(rng: &mut R, kind: ExpertKind, gamma_mode: GammaMode) -> Result<PimaModel> {
    let l = rng.random_range(1..=3);
    let c = rng.random_range(1..=4);
    let dd = rng.random_range(2..=4);
    let t_len = rng.random_range(5..=8);
    let spec = ExpertSpec::linspace(kind, 0.0, 1.0, t_len)?;
    let cfg = ModelConfig {
        latent_dim: l,
        clusters: c,
        gamma_mode,
        modalities: vec![
            ModalityConfig {
                name: "image".into(),
                encoder: MlpConfig::new(dd, &[4], l, Activation::Tanh, OutputHead::Gaussian),
                reconstruction: Reconstruction::DataDriven {
                    decoder: MlpConfig::new(l, &[4], dd, Activation::Tanh, OutputHead::Plain),
                    variance: rng.random_range(0.5..2.0),
                },
            },
            ModalityConfig {
                name: "signal".into(),
                encoder: MlpConfig::new(t_len, &[4], l, Activation::Tanh, OutputHead::Gaussian),
                reconstruction: Reconstruction::Scientific {
                    expert: spec.clone(),
                    learn_variance: true,
                },
            },
        ],
    };
    let mut m = PimaModel::new(cfg, rng)?;
    m.set_cluster_means(Array2::from_shape_simple_fn((c, l), || rng.random_range(-1.0..1.0)))?;
    let lay = m.layout().clone();
    for slot in [lay.logits, lay.cluster_log_vars] {
        m.params_mut().tensors[slot].mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let dt = 1.0 / (t_len - 1) as f64;
    let theta = match kind {
        ExpertKind::Affine => Array2::from_shape_simple_fn((c, 1), || rng.random_range(-2.0..2.0)),
        // Yield strain strictly between knots keeps the curve differentiable.
        ExpertKind::StrainHardening => Array2::from_shape_fn((c, 3), |(_, k)| match k {
            0 => rng.random_range(0.5..2.0),
            1 => (rng.random_range(1..t_len - 2) as f64 + rng.random_range(0.3..0.7)) * dt,
            _ => rng.random_range(-0.5..0.5),
        }),
    };
    m.set_expert_theta(1, theta)?;
    let vars: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5f64..0.5).exp()).collect();
    m.set_expert_variances(1, &vars)?;
    Ok(m)
}

fn random_record<R: Rng>(rng: &mut R, model: &PimaModel, n: usize) -> Vec<Array2<f64>> {
    model
        .config()
        .modalities
        .iter()
        .map(|m| Array2::from_shape_simple_fn((n, m.dim()), || rng.random_range(0.0..1.0)))
        .collect()
}

const KINDS: [ExpertKind; 2] = [ExpertKind::Affine, ExpertKind::StrainHardening];
const GAMMA_MODES: [GammaMode; 2] = [GammaMode::Sample, GammaMode::Mean];

/// Closed-form ELBO terms against Monte-Carlo estimates from canonical
/// log-densities. The data-driven term is a single-sample term, so its
/// average over many noise draws is compared instead.
pub fn check_elbo(seed: u64, models: usize, samples: usize, exec: Exec) -> Result<Check> {
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..models {
        let mut rng = seed::rng(seed, "verify.elbo", i as u64);
        let kind = KINDS[i % 2];
        let mode = GAMMA_MODES[(i / 2) % 2];
        let model = random_tiny_model(&mut rng, kind, mode)?;
        let l = model.latent_dim();
        let rec = random_record(&mut rng, &model, 1);
        let eps0: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
        let cf = elbo_closed_form(&model, &rec, &Array2::from_shape_vec((1, l), eps0.clone()).expect("row"))?[0];
        let mc = elbo_monte_carlo(&model, &rec, &eps0, samples, seed::substream(seed, "verify.elbo.mc", i as u64), exec)?;

        // Average of the single-sample data-driven term.
        let many: Vec<Array2<f64>> = rec
            .iter()
            .map(|x| x.broadcast((samples, x.ncols())).expect("one row").to_owned())
            .collect();
        let eps = Array2::from_shape_simple_fn((samples, l), || rng.sample::<f64, _>(StandardNormal));
        let dd: Vec<f64> = elbo_closed_form(&model, &many, &eps)?.iter().map(|r| r.recon_dd).collect();
        let dd_stats = mc_stats(dd.iter().sum(), dd.iter().map(|v| v * v).sum(), samples);

        let mut terms = serde_json::Map::new();
        for ((name, exact), (_, est)) in cf.terms().iter().zip(mc.terms()) {
            let (target, se) = if *name == "recon_dd" {
                (dd_stats.mean, (dd_stats.se.powi(2) + est.std_error.powi(2)).sqrt())
            } else {
                (*exact, est.std_error)
            };
            let delta = target - est.mean;
            // Terms with no sampling variance must agree to rounding.
            let z = if se > 0.0 {
                delta.abs() / se
            } else if delta.abs() <= 1e-9 * target.abs().max(1.0) {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
            terms.insert((*name).into(), json!({"closed_form": target, "mc": est.mean, "delta": delta, "std_error": se}));
        }
        rows.push(json!({
            "expert": kind.as_str(),
            "gamma_mode": format!("{mode:?}").to_lowercase(),
            "latent_dim": l,
            "clusters": model.clusters(),
            "terms": terms,
        }));
    }
    Ok(check(
        "elbo_closed_form_vs_mc",
        models,
        worst,
        4.0,
        "largest |closed form − MC| in standard errors",
        json!(rows),
    ))
}

/// Tape gradients of the batch loss against central finite differences.
pub fn check_gradients(seed: u64, models: usize) -> Result<Check> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut count = 0usize;
    for i in 0..models {
        let mut rng = seed::rng(seed, "verify.grad", i as u64);
        let mut model = random_tiny_model(&mut rng, KINDS[i % 2], GAMMA_MODES[(i / 2) % 2])?;
        let batch = random_record(&mut rng, &model, 3);
        let eps = Array2::from_shape_simple_fn((3, model.latent_dim()), || rng.sample::<f64, _>(StandardNormal));
        let mask = vec![true; model.params().len()];
        let lg = loss_and_gradients(&model, &batch, &eps, &mask)?;
        for slot in 0..model.params().len() {
            for idx in 0..model.params().tensors[slot].len() {
                let orig = model.params().tensors[slot].as_slice().expect("contiguous")[idx];
                model.params_mut().tensors[slot].as_slice_mut().expect("contiguous")[idx] = orig + h;
                let up = batch_loss(&model, &batch, &eps)?;
                model.params_mut().tensors[slot].as_slice_mut().expect("contiguous")[idx] = orig - h;
                let down = batch_loss(&model, &batch, &eps)?;
                model.params_mut().tensors[slot].as_slice_mut().expect("contiguous")[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = lg.gradients[slot].as_slice().expect("contiguous")[idx];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()) + 1e-6);
                count += 1;
                if err > worst {
                    worst = err;
                    worst_at = format!("model {i}, {}[{idx}]", model.params().names[slot]);
                }
            }
        }
    }
    Ok(check(
        "elbo_gradients",
        models,
        worst,
        1e-4,
        "relative error |fd − tape| / (max(|fd|, |tape|) + 1e-6)",
        json!({"entries": count, "worst_at": worst_at}),
    ))
}

fn random_simplex_rows<R: Rng>(rng: &mut R, n: usize, c: usize) -> Array2<f64> {
    let mut g = Array2::from_shape_simple_fn((n, c), || rng.random_range(0.0f64..1.0).powi(3) + 1e-6);
    for mut row in g.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    g
}

/// Streaming EM against the one-shot update over random partitions, and
/// the EM point as a minimizer of the γ-fixed quadratic.
pub fn check_em(seed: u64, trials: usize) -> Result<Check> {
    let mut rng = seed::rng(seed, "verify.em", 0);
    let (mut worst_stream, mut worst_descent): (f64, f64) = (0.0, 0.0);
    for _ in 0..trials {
        let n = rng.random_range(20..200);
        let c = rng.random_range(1..=5);
        let l = rng.random_range(1..=3);
        let g = random_simplex_rows(&mut rng, n, c);
        let mu = Array2::from_shape_simple_fn((n, l), || rng.random_range(-3.0..3.0));
        let prev = Array2::from_shape_simple_fn((c, l), || rng.random_range(-3.0..3.0));
        let vars = Array2::from_shape_simple_fn((c, l), || rng.random_range(0.2..2.0));
        let batch = em_update_means(g.view(), mu.view(), &prev)?;
        for _ in 0..3 {
            let mut cuts: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..=n)).collect();
            cuts.push(0);
            cuts.push(n);
            cuts.sort_unstable();
            let blocks = cuts.windows(2).map(|w| {
                (
                    g.slice(ndarray::s![w[0]..w[1], ..]),
                    mu.slice(ndarray::s![w[0]..w[1], ..]),
                )
            });
            let streamed = streaming_em(blocks, &prev)?;
            let diff = (&streamed.means - &batch.means).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            worst_stream = worst_stream.max(diff);
        }
        let q_prev = latent_quadratic(g.view(), mu.view(), &prev, &vars);
        let q_em = latent_quadratic(g.view(), mu.view(), &batch.means, &vars);
        worst_descent = worst_descent.max(q_em - q_prev);
        for _ in 0..10 {
            let delta = Array2::from_shape_simple_fn((c, l), || if rng.random::<bool>() { 1e-3 } else { -1e-3 });
            let q = latent_quadratic(g.view(), mu.view(), &(&batch.means + &delta), &vars);
            worst_descent = worst_descent.max(q_em - q);
        }
    }
    let worst = (worst_stream / 1e-10).max(if worst_descent > 1e-9 { f64::INFINITY } else { 0.0 });
    Ok(check(
        "streaming_em",
        trials,
        worst,
        1.0,
        "streamed-vs-batch max difference / 1e-10; infinite if the EM point is beaten",
        json!({"stream_max_abs_diff": worst_stream, "largest_increase": worst_descent}),
    ))
}

/// Mixture-of-experts moments against draws from the mixture.
pub fn check_moe(seed: u64, instances: usize, samples: usize) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut negative = 0usize;
    for i in 0..instances {
        let mut rng = seed::rng(seed, "verify.moe", i as u64);
        let kind = KINDS[i % 2];
        let c = rng.random_range(1..=4);
        let t_len = rng.random_range(5..=10);
        let spec = ExpertSpec::linspace(kind, 0.0, 1.0, t_len)?;
        let theta = match kind {
            ExpertKind::Affine => Array2::from_shape_simple_fn((c, 1), || rng.random_range(-2.0..2.0)),
            ExpertKind::StrainHardening => Array2::from_shape_fn((c, 3), |(_, k)| match k {
                0 => rng.random_range(0.5..2.0),
                1 => rng.random_range(0.2..0.8),
                _ => rng.random_range(-0.5..0.5),
            }),
        };
        let params = ExpertParams::new(&spec, theta)?;
        let mut pi: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= s);
        let sigma2: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..0.5)).collect();
        let mean = moe_mean(&pi, &spec, &params)?;
        let var = moe_variance(&pi, &spec, &params, &sigma2)?;
        negative += var.iter().filter(|v| **v < 0.0).count();
        let curves: Vec<Vec<f64>> = (0..c).map(|k| evaluate_expert(&spec, &params.row(k))).collect::<Result<_>>()?;
        let mut draws = Array2::zeros((samples, t_len));
        for mut row in draws.rows_mut() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = c - 1;
            for (j, p) in pi.iter().enumerate() {
                acc += p;
                if u < acc {
                    k = j;
                    break;
                }
            }
            for n in 0..t_len {
                row[n] = curves[k][n] + sigma2[k].sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let nf = samples as f64;
        let m = draws.mean_axis(Axis(0)).expect("rows");
        for n in 0..t_len {
            let col = draws.column(n);
            let centred: Array1<f64> = col.mapv(|v| v - m[n]);
            let v = centred.mapv(|d| d * d).sum() / (nf - 1.0);
            let m4 = centred.mapv(|d| d.powi(4)).sum() / nf;
            let se_mean = (v / nf).sqrt();
            let se_var = ((m4 - v * v).max(0.0) / nf).sqrt();
            let zm = if se_mean > 0.0 { (mean[n] - m[n]).abs() / se_mean } else { (mean[n] - m[n]).abs() * 1e12 };
            let zv = if se_var > 0.0 { (var[n] - v).abs() / se_var } else { (var[n] - v).abs() * 1e12 };
            worst = worst.max(zm).max(zv);
        }
    }
    let worst = if negative > 0 { f64::INFINITY } else { worst };
    Ok(check(
        "mixture_moments",
        instances,
        worst,
        4.0,
        "largest moment deviation in standard errors; infinite on any negative variance",
        json!({"negative_variances": negative}),
    ))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Optimal assignment and clustering accuracy against exhaustive search.
pub fn check_assignment(seed: u64, instances: usize) -> Result<Check> {
    let mut rng = seed::rng(seed, "verify.assignment", 0);
    let mut mismatches = 0usize;
    for _ in 0..instances {
        let l = rng.random_range(2..=6);
        let n = rng.random_range(20..80);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..l)).collect();
        // Clusters agree with labels part of the time.
        let clusters: Vec<usize> = labels
            .iter()
            .map(|&t| if rng.random::<f64>() < 0.5 { (t + 1) % l } else { rng.random_range(0..l) })
            .collect();
        let got = unsupervised_accuracy(&labels, &clusters)?.accuracy;
        let best = permutations(l)
            .iter()
            .map(|p| labels.iter().zip(&clusters).filter(|(t, c)| p[**c] == **t).count())
            .max()
            .expect("non-empty") as f64
            / n as f64;
        if got != best {
            mismatches += 1;
        }
        let mut relabel: Vec<usize> = (0..l).collect();
        relabel.shuffle(&mut rng);
        let permuted: Vec<usize> = clusters.iter().map(|&c| relabel[c]).collect();
        if unsupervised_accuracy(&labels, &permuted)?.accuracy != got {
            mismatches += 1;
        }
        let cost = Array2::from_shape_simple_fn((l, l), || rng.random_range(0.0..10.0));
        let a = linear_assignment(&cost)?;
        let brute = permutations(l)
            .iter()
            .map(|p| (0..l).map(|r| cost[[r, p[r]]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if (a.total_cost - brute).abs() > 1e-9 * brute.max(1.0) {
            mismatches += 1;
        }
    }
    Ok(check(
        "assignment_brute_force",
        instances,
        mismatches as f64,
        0.0,
        "count of disagreements with exhaustive search or under relabeling",
        json!({}),
    ))
}

/// Non-negativity of the KL divergence, and zero exactly at equality.
pub fn check_kl(seed: u64, pairs: usize, fault: Fault) -> Result<Check> {
    let mut rng = seed::rng(seed, "verify.kl", 0);
    let kl = |q: &DiagGaussian, p: &DiagGaussian| -> Result<f64> {
        let v = kl_diag(q, p)?;
        Ok(if fault == Fault::KlSignFlip { -v } else { v })
    };
    let (mut negative, mut min_distinct, mut max_self): (usize, f64, f64) = (0, f64::INFINITY, 0.0);
    for _ in 0..pairs {
        let dim = rng.random_range(1..=5);
        let q = random_gaussian(&mut rng, dim);
        let p = random_gaussian(&mut rng, dim);
        let d = kl(&q, &p)?;
        if d < 0.0 {
            negative += 1;
        }
        min_distinct = min_distinct.min(d);
        max_self = max_self.max(kl(&q, &q)?.abs());
    }
    let failures = negative + usize::from(max_self > 1e-10) + usize::from(!(min_distinct > 1e-10));
    Ok(check(
        "kl_divergence",
        pairs,
        failures as f64,
        0.0,
        "negative values, non-zero self divergence, or zero between distinct pairs",
        json!({"negative": negative, "min_distinct": min_distinct, "max_self": max_self}),
    ))
}

/// Expert fits on synthetic curves with known parameters.
pub fn check_recovery(seed: u64, instances: usize) -> Result<Check> {
    let mut rng = seed::rng(seed, "verify.recovery", 0);
    let (mut affine_err, mut strain_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..instances {
        let spec = ExpertSpec::linspace(ExpertKind::Affine, 0.0, 1.0, 20)?;
        let slopes: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let data = Array2::from_shape_fn((30, 20), |(d, n)| slopes[d % 3] * spec.t_grid[n]);
        let gammas = Array2::from_shape_fn((30, 3), |(d, c)| f64::from(d % 3 == c));
        let fit = weighted_ls_fit(&spec, data.view(), gammas.view())?;
        for c in 0..3 {
            affine_err = affine_err.max((fit.theta[[c, 0]] - slopes[c]).abs());
        }

        let spec = ExpertSpec::linspace(ExpertKind::StrainHardening, 0.0, 1.0, 100)?;
        let truth: Vec<[f64; 3]> = (0..2)
            .map(|_| {
                let e = rng.random_range(2.0..10.0);
                [e, rng.random_range(0.2..0.7), e * rng.random_range(0.1..0.4)]
            })
            .collect();
        let per = 20;
        let mut data = Array2::zeros((2 * per, 100));
        for d in 0..2 * per {
            let p = truth[d % 2];
            let curve = evaluate_expert(&spec, &p)?;
            let sd = 0.01 * p[0] * p[1];
            for n in 0..100 {
                data[[d, n]] = curve[n] + sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let gammas = Array2::from_shape_fn((2 * per, 2), |(d, c)| f64::from(d % 2 == c));
        let fit = weighted_ls_fit(&spec, data.view(), gammas.view())?;
        for (c, p) in truth.iter().enumerate() {
            for k in 0..3 {
                strain_err = strain_err.max((fit.theta[[c, k]] - p[k]).abs() / p[k].abs());
            }
        }
    }
    let worst = (affine_err / 1e-10).max(strain_err / 0.05);
    Ok(check(
        "expert_recovery",
        instances,
        worst,
        1.0,
        "affine slope error / 1e-10 and strain-hardening relative error / 0.05",
        json!({"affine_max_abs_error": affine_err, "strain_max_rel_error": strain_err}),
    ))
}

/// Runs every check.
pub fn run_verification(seed: u64, sizes: &VerifySizes, fault: Fault, exec: Exec) -> Result<VerifyReport> {
    let checks = vec![
        check_poe(seed, sizes.poe_sets)?,
        check_lemma(seed, sizes.lemma_instances, sizes.lemma_samples, exec)?,
        check_elbo(seed, sizes.elbo_models, sizes.elbo_samples, exec)?,
        check_gradients(seed, sizes.gradient_models)?,
        check_em(seed, sizes.em_trials)?,
        check_moe(seed, sizes.moe_instances, sizes.moe_samples)?,
        check_assignment(seed, sizes.assignment_instances)?,
        check_kl(seed, sizes.kl_pairs, fault)?,
        check_recovery(seed, sizes.recovery_instances)?,
    ];
    for c in &checks {
        log::info!("{} {} (worst {:.3e}, tolerance {:.1e})", c.name, if c.passed { "ok" } else { "FAILED" }, c.worst, c.tolerance);
    }
    Ok(VerifyReport {
        seed,
        sizes: sizes.clone(),
        fault,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_run_passes_and_fault_is_caught() {
        let r = run_verification(1, &VerifySizes::tiny(), Fault::None, Exec::Sequential).unwrap();
        for c in &r.checks {
            assert!(c.passed, "{} worst {} details {}", c.name, c.worst, c.details);
        }
        let bad = check_kl(1, 100, Fault::KlSignFlip).unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn permutations_are_complete() {
        let p = permutations(4);
        assert_eq!(p.len(), 24);
        let mut sorted = p.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 24);
    }
}
