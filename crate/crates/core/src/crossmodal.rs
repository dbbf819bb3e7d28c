//! Unimodal encoders distilled from the fused posterior, cross-modal
//! generation and the Bayesian cluster estimators.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{check_dim, Error, Result};
use crate::exec::{map_chunks, Exec};
use crate::expert::{evaluate_expert, ExpertParams, ExpertSpec};
use crate::gaussian::{kl_diag, DiagGaussian};
use crate::model::{PimaModel, Reconstruction};
use crate::nn::mlp::{forward_tape, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::nn::{encode_batch, AdamConfig, AdamState, MlpConfig, NetParams, Tape};
use crate::prior::{gamma_posterior, MixturePrior, Responsibilities};
use crate::seed;
use crate::trainer::TrainState;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CONTAINER_KIND: &str = "distilled_encoder";

/// Default step size for distilling image encoders.
pub const IMAGE_DISTILL_LR: f64 = 4.398e-5;
/// Default step size for distilling encoders of 1D signals.
pub const SIGNAL_DISTILL_LR: f64 = 4.398e-3;

/// A unimodal Gaussian encoder `q̃(Z|X_i)` trained to stand in for the
/// fused posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledEncoder {
    pub modality: String,
    /// Index of the modality in the multimodal model.
    pub source_index: usize,
    pub config: MlpConfig,
    pub params: NetParams,
}

impl DistilledEncoder {
    /// Copy of the trained model's own encoder for modality `m`.
    pub fn from_model(model: &PimaModel, m: usize) -> Result<Self> {
        if m >= model.modality_count() {
            return Err(Error::invalid(format!("modality index {m} out of range")));
        }
        let mc = &model.config().modalities[m];
        Ok(Self {
            modality: mc.name.clone(),
            source_index: m,
            config: mc.encoder.clone(),
            params: model.encoder_params(m),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Posterior means and variances for a batch of rows.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        encode_batch(&self.config, &self.params.tensors, x)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "modality": self.modality,
            "source_index": self.source_index,
            "config": self.config,
        });
        let mut c = Container::new(CONTAINER_KIND, meta);
        for (i, t) in self.params.tensors.iter().enumerate() {
            c.push(format!("net/{i}"), t.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CONTAINER_KIND {
            return Err(Error::Checkpoint(format!("expected a {CONTAINER_KIND} container, found {}", c.kind)));
        }
        let field = |k: &str| {
            c.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata field {k} is missing")))
        };
        let config: MlpConfig = serde_json::from_value(field("config")?)?;
        config.validate()?;
        let tensors = (0..2 * config.layer_count())
            .map(|i| c.get(&format!("net/{i}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let params = NetParams { tensors };
        params.check_shapes(&config)?;
        Ok(Self {
            modality: serde_json::from_value(field("modality")?)?,
            source_index: serde_json::from_value(field("source_index")?)?,
            config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(q_fused ‖ q̃)`: the distilled posterior covers the fused one.
    #[default]
    FusedToDistilled,
    /// `KL(q̃ ‖ q_fused)`.
    DistilledToFused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` picks [`default_learning_rate`] for the modality.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub direction: KlDirection,
    pub seed: u64,
    #[serde(default)]
    pub exec: Exec,
}

impl DistillConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate: None,
            direction: KlDirection::default(),
            seed,
            exec: Exec::default(),
        }
    }
}

/// Images (data-driven modalities) get the small step size, 1D scientific
/// signals the large one.
pub fn default_learning_rate(model: &PimaModel, m: usize) -> f64 {
    match model.config().modalities[m].reconstruction {
        Reconstruction::Scientific { .. } => SIGNAL_DISTILL_LR,
        Reconstruction::DataDriven { .. } => IMAGE_DISTILL_LR,
    }
}

/// Mean per-record KL before training (`epoch_loss[0]`) and after each
/// epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub modality: String,
    pub learning_rate: f64,
    pub epoch_loss: Vec<f64>,
}

impl DistillReport {
    /// Share of epochs whose loss did not exceed the previous one.
    pub fn monotone_fraction(&self) -> f64 {
        let w: Vec<bool> = self.epoch_loss.windows(2).map(|w| w[1] <= w[0]).collect();
        if w.is_empty() {
            1.0
        } else {
            w.iter().filter(|&&b| b).count() as f64 / w.len() as f64
        }
    }
}

/// Fused posterior means and variances of every record.
pub fn fused_posterior(model: &PimaModel, data: &[Array2<f64>], exec: Exec, chunk: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    model.check_batch(data)?;
    let n = data[0].nrows();
    let l = model.latent_dim();
    let parts = map_chunks(exec, n, chunk.max(1), |start, end| {
        let batch: Vec<Array2<f64>> = data.iter().map(|x| x.slice(s![start..end, ..]).to_owned()).collect();
        model.fuse_all(&batch)
    });
    let (mut mean, mut var) = (Array2::zeros((n, l)), Array2::zeros((n, l)));
    let mut start = 0;
    for p in parts {
        let (m, v) = p?;
        let end = start + m.nrows();
        mean.slice_mut(s![start..end, ..]).assign(&m);
        var.slice_mut(s![start..end, ..]).assign(&v);
        start = end;
    }
    Ok((mean, var))
}

fn row_gaussian(mean: &Array2<f64>, var: &Array2<f64>, i: usize) -> Result<DiagGaussian> {
    DiagGaussian::new(mean.row(i).to_vec(), var.row(i).to_vec())
}

/// Mean per-record KL between the fused targets and the encoder.
pub fn distill_loss(
    encoder: &DistilledEncoder,
    x: ArrayView2<f64>,
    target_mean: &Array2<f64>,
    target_var: &Array2<f64>,
    direction: KlDirection,
) -> Result<f64> {
    check_dim("distill target rows", x.nrows(), target_mean.nrows())?;
    if x.nrows() == 0 {
        return Err(Error::Empty("distillation data"));
    }
    let (mu, var) = encoder.encode(x)?;
    let mut total = 0.0;
    for i in 0..x.nrows() {
        let fused = row_gaussian(target_mean, target_var, i)?;
        let own = row_gaussian(&mu, &var, i)?;
        total += match direction {
            KlDirection::FusedToDistilled => kl_diag(&fused, &own)?,
            KlDirection::DistilledToFused => kl_diag(&own, &fused)?,
        };
    }
    Ok(total / x.nrows() as f64)
}

/// Batch KL and gradients for the encoder tensors.
fn kl_gradients(
    encoder: &DistilledEncoder,
    x: &Array2<f64>,
    target_mean: &Array2<f64>,
    target_var: &Array2<f64>,
    direction: KlDirection,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let l = encoder.latent_dim();
    let n = x.nrows() as f64;
    let mut tape = Tape::new();
    let vars: Vec<_> = encoder
        .params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(format!("net/{i}"), t.clone()))
        .collect();
    let xv = tape.constant(x.clone());
    let h = forward_tape(&encoder.config, &mut tape, &vars, xv);
    let mu = tape.slice_cols(h, 0, l);
    let lv = tape.slice_cols(h, l, l);
    let lv = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
    let tm = tape.constant(target_mean.clone());
    let d = tape.sub(tm, mu);
    let d2 = tape.square(d);
    let per = match direction {
        KlDirection::FusedToDistilled => {
            // var_q/var_p + (μ_q − μ_p)²/var_p + log var_p − log var_q − 1
            let neg = tape.neg(lv);
            let inv = tape.exp(neg);
            let tv = tape.constant(target_var.clone());
            let num = tape.add(tv, d2);
            let a = tape.mul(num, inv);
            let b = tape.add(a, lv);
            let log_tv = tape.constant(target_var.mapv(|v| -v.ln() - 1.0));
            tape.add(b, log_tv)
        }
        KlDirection::DistilledToFused => {
            // var_p/var_q + (μ_p − μ_q)²/var_q + log var_q − log var_p − 1
            let inv_tv = tape.constant(target_var.mapv(f64::recip));
            let vp = tape.exp(lv);
            let num = tape.add(vp, d2);
            let a = tape.mul(num, inv_tv);
            let b = tape.sub(a, lv);
            let log_tv = tape.constant(target_var.mapv(|v| v.ln() - 1.0));
            tape.add(b, log_tv)
        }
    };
    let total = tape.sum_all(per);
    let loss = tape.scale(total, 0.5 / n);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("distillation loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(&encoder.params.tensors)
        .map(|(&v, t)| grads.take(v, t.dim()))
        .collect();
    Ok((value, g))
}

/// Trains a unimodal encoder for modality `m` against the frozen fused
/// posterior of a trained model, starting from the model's own encoder.
pub fn distill(
    state: &TrainState,
    data: &[Array2<f64>],
    m: usize,
    config: &DistillConfig,
) -> Result<(DistilledEncoder, DistillReport)> {
    if state.epoch == 0 {
        return Err(Error::NotTrained);
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let model = &state.model;
    let lr = config.learning_rate.unwrap_or_else(|| default_learning_rate(model, m));
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid("learning_rate must be positive"));
    }
    let mut enc = DistilledEncoder::from_model(model, m)?;
    let (tmean, tvar) = fused_posterior(model, data, config.exec, 1024)?;
    let x = &data[m];
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Empty("distillation data"));
    }
    let mut report = DistillReport {
        modality: enc.modality.clone(),
        learning_rate: lr,
        epoch_loss: vec![distill_loss(&enc, x.view(), &tmean, &tvar, config.direction)?],
    };
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(lr), &enc.params.tensors);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(config.seed, "distill", (m as u64) << 32 | epoch as u64));
        for idx in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), idx);
            let mb = tmean.select(Axis(0), idx);
            let vb = tvar.select(Axis(0), idx);
            let (_, grads) = kl_gradients(&enc, &xb, &mb, &vb, config.direction)?;
            adam.step(&mut enc.params.tensors, &grads, None)?;
        }
        let loss = distill_loss(&enc, x.view(), &tmean, &tvar, config.direction)?;
        log::info!("distill {} epoch {} kl {loss:.6}", enc.modality, epoch + 1);
        report.epoch_loss.push(loss);
    }
    Ok((enc, report))
}

/// Cluster posteriors `p(c|Z = μ̃)` from the distilled encoder's means.
pub fn infer_cluster(encoder: &DistilledEncoder, prior: &MixturePrior, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_dim("encoder latent width", prior.dim(), encoder.latent_dim())?;
    let (mu, _) = encoder.encode(x)?;
    Ok(Responsibilities::from_prior(prior, mu.view())?.into_inner())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateMode {
    /// Decode from the mean of the most probable cluster.
    #[default]
    ClusterMean,
    /// Decode from one reparameterized draw of `q̃(Z|x)`.
    Sampled,
}

/// Output of [`cross_generate`] together with the latent it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub latent: Array2<f64>,
    pub gamma: Array2<f64>,
    pub clusters: Vec<usize>,
    pub output: Array2<f64>,
}

/// Generates modality `target` from inputs of the encoder's modality.
pub fn cross_generate<R: Rng + ?Sized>(
    encoder: &DistilledEncoder,
    model: &PimaModel,
    x: ArrayView2<f64>,
    target: usize,
    mode: GenerateMode,
    rng: &mut R,
) -> Result<Generated> {
    if target >= model.modality_count() {
        return Err(Error::invalid(format!("target modality {target} out of range")));
    }
    if target == encoder.source_index {
        return Err(Error::invalid("target modality must differ from the input modality"));
    }
    let prior = model.prior();
    let (mu, var) = encoder.encode(x)?;
    let latent = match mode {
        GenerateMode::Sampled => {
            let eps = Array2::from_shape_simple_fn(mu.dim(), || rng.sample::<f64, _>(StandardNormal));
            &mu + &(&eps * &var.mapv(f64::sqrt))
        }
        GenerateMode::ClusterMean => mu,
    };
    let g = Responsibilities::from_prior(&prior, latent.view())?;
    let clusters = g.argmax();
    let latent = match mode {
        GenerateMode::ClusterMean => prior.means().select(Axis(0), &clusters),
        GenerateMode::Sampled => latent,
    };
    let output = match model.expert_spec(target) {
        Some(spec) => {
            let params = model.expert_params(target).expect("scientific modality");
            let mut out = Array2::zeros((clusters.len(), spec.len()));
            for (i, &c) in clusters.iter().enumerate() {
                out.row_mut(i).assign(&ndarray::Array1::from(evaluate_expert(spec, &params.row(c))?));
            }
            out
        }
        None => model.decode(target, latent.view())?,
    };
    Ok(Generated {
        latent,
        gamma: g.into_inner(),
        clusters,
        output,
    })
}

fn softmax_log(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `p(c|x) ∝ π_c N(x; E(t; θ_c), σ²_c I)` for a scientific curve.
pub fn bayes_cluster_scientific(
    prior: &MixturePrior,
    spec: &ExpertSpec,
    params: &ExpertParams,
    variances: &[f64],
    x: &[f64],
) -> Result<Vec<f64>> {
    check_dim("expert cluster count", prior.clusters(), params.clusters())?;
    check_dim("expert variance count", prior.clusters(), variances.len())?;
    check_dim("curve length", spec.len(), x.len())?;
    let logw = prior.log_weights();
    let scores = (0..prior.clusters())
        .map(|c| {
            let v = variances[c];
            if !(v > 0.0) {
                return Err(Error::NonPositiveVariance { index: c, value: v });
            }
            let f = evaluate_expert(spec, &params.row(c))?;
            let ss: f64 = x.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(logw[c] - 0.5 * (x.len() as f64 * (LN_2PI + v.ln()) + ss / v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax_log(&scores))
}

/// `p(μ_c|x) ∝ π_c N(x; decode(μ_c), I)` for a data-driven modality `m`.
pub fn bayes_centroid_datadriven(model: &PimaModel, m: usize, x: &[f64]) -> Result<Vec<f64>> {
    let prior = model.prior();
    let decoded = model.decode(m, prior.means().view())?;
    check_dim("input width", decoded.ncols(), x.len())?;
    let logw = prior.log_weights();
    let scores: Vec<f64> = decoded
        .rows()
        .into_iter()
        .zip(&logw)
        .map(|(r, lw)| lw - 0.5 * r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    Ok(softmax_log(&scores))
}

/// Cluster posterior for every row of a scientific modality, through the
/// model's fitted experts.
pub fn bayes_cluster_rows(model: &PimaModel, m: usize, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let spec = model
        .expert_spec(m)
        .ok_or_else(|| Error::invalid("modality has no expert"))?;
    let params = model.expert_params(m).expect("scientific modality");
    let vars = model.expert_variances(m).expect("scientific modality");
    let prior = model.prior();
    let mut out = Array2::zeros((x.nrows(), prior.clusters()));
    for (i, row) in x.rows().into_iter().enumerate() {
        let p = bayes_cluster_scientific(&prior, spec, &params, &vars, &row.to_vec())?;
        out.row_mut(i).assign(&ndarray::Array1::from(p));
    }
    Ok(out)
}

/// Responsibilities at one latent point, re-exported for callers holding a
/// single row.
pub fn cluster_posterior_at(prior: &MixturePrior, z: &[f64]) -> Result<Vec<f64>> {
    gamma_posterior(prior, z)
}

/// 8-bit binary graymap of values in `[0, 1]` (clamped).
pub fn pgm_bytes(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    check_dim("image pixel count", width * height, values.len())?;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, values: &[f64], width: usize, height: usize) -> Result<()> {
    let bytes = pgm_bytes(values, width, height)?;
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::ExpertKind;
    use crate::model::{GammaMode, ModalityConfig, ModelConfig};
    use crate::nn::{Activation, OutputHead};
    use crate::trainer::TrainConfig;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(clusters: usize) -> ModelConfig {
        ModelConfig {
            latent_dim: 2,
            clusters,
            gamma_mode: GammaMode::Sample,
            modalities: vec![
                ModalityConfig {
                    name: "image".into(),
                    encoder: MlpConfig::new(4, &[5], 2, Activation::Tanh, OutputHead::Gaussian),
                    reconstruction: Reconstruction::DataDriven {
                        decoder: MlpConfig::new(2, &[5], 4, Activation::Tanh, OutputHead::Plain),
                        variance: 1.0,
                    },
                },
                ModalityConfig {
                    name: "signal".into(),
                    encoder: MlpConfig::new(6, &[5], 2, Activation::Tanh, OutputHead::Gaussian),
                    reconstruction: Reconstruction::Scientific {
                        expert: ExpertSpec::linspace(ExpertKind::Affine, 0.0, 1.0, 6).unwrap(),
                        learn_variance: true,
                    },
                },
            ],
        }
    }

    fn state(clusters: usize, epoch: usize) -> TrainState {
        let mut s = TrainState::initial(TrainConfig::new(tiny_model(clusters), 1, 4, 1e-3, 3)).unwrap();
        s.epoch = epoch;
        s
    }

    fn data(n: usize) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        vec![
            Array2::from_shape_simple_fn((n, 4), || rng.random::<f64>()),
            Array2::from_shape_simple_fn((n, 6), || rng.random::<f64>()),
        ]
    }

    #[test]
    fn untrained_model_is_rejected() {
        let err = distill(&state(2, 0), &data(8), 0, &DistillConfig::new(1, 4, 0)).unwrap_err();
        assert!(matches!(err, Error::NotTrained));
    }

    #[test]
    fn tape_loss_matches_kl_diag() {
        let s = state(2, 1);
        let d = data(7);
        let enc = DistilledEncoder::from_model(&s.model, 1).unwrap();
        let (tm, tv) = fused_posterior(&s.model, &d, Exec::Sequential, 3).unwrap();
        for dir in [KlDirection::FusedToDistilled, KlDirection::DistilledToFused] {
            let direct = distill_loss(&enc, d[1].view(), &tm, &tv, dir).unwrap();
            let (tape, _) = kl_gradients(&enc, &d[1], &tm, &tv, dir).unwrap();
            assert!((direct - tape).abs() < 1e-10 * direct.abs().max(1.0), "{direct} vs {tape}");
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let s = state(2, 1);
        let d = data(5);
        let enc = DistilledEncoder::from_model(&s.model, 0).unwrap();
        let (tm, tv) = fused_posterior(&s.model, &d, Exec::Sequential, 8).unwrap();
        for dir in [KlDirection::FusedToDistilled, KlDirection::DistilledToFused] {
            let (_, g) = kl_gradients(&enc, &d[0], &tm, &tv, dir).unwrap();
            for (ti, t) in enc.params.tensors.iter().enumerate() {
                for k in [0, t.len() / 2, t.len() - 1] {
                    let h = 1e-6;
                    let mut plus = enc.clone();
                    plus.params.tensors[ti].as_slice_mut().unwrap()[k] += h;
                    let mut minus = enc.clone();
                    minus.params.tensors[ti].as_slice_mut().unwrap()[k] -= h;
                    let fd = (distill_loss(&plus, d[0].view(), &tm, &tv, dir).unwrap()
                        - distill_loss(&minus, d[0].view(), &tm, &tv, dir).unwrap())
                        / (2.0 * h);
                    let an = g[ti].as_slice().unwrap()[k];
                    assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1e-2), "{fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn bayes_scientific_picks_matching_expert() {
        let spec = ExpertSpec::linspace(ExpertKind::Affine, 0.0, 1.0, 10).unwrap();
        let params = ExpertParams::new(&spec, array![[0.0], [5.0]]).unwrap();
        let prior = MixturePrior::standard(2, 2);
        let x = evaluate_expert(&spec, &[5.0]).unwrap();
        let p = bayes_cluster_scientific(&prior, &spec, &params, &[0.1, 0.1], &x).unwrap();
        assert!(p[1] > 0.99);
        let same = ExpertParams::new(&spec, array![[2.0], [2.0]]).unwrap();
        let p = bayes_cluster_scientific(&prior, &spec, &same, &[0.3, 0.3], &x).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_cluster_posteriors_are_one() {
        let s = state(1, 1);
        let d = data(3);
        let enc = DistilledEncoder::from_model(&s.model, 0).unwrap();
        let g = infer_cluster(&enc, &s.model.prior(), d[0].view()).unwrap();
        assert!(g.iter().all(|&v| v == 1.0));
        assert_eq!(bayes_centroid_datadriven(&s.model, 0, &[0.1, 0.2, 0.3, 0.4]).unwrap(), vec![1.0]);
    }

    #[test]
    fn generation_rejects_same_modality() {
        let s = state(2, 1);
        let d = data(3);
        let enc = DistilledEncoder::from_model(&s.model, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(cross_generate(&enc, &s.model, d[0].view(), 0, GenerateMode::ClusterMean, &mut rng).is_err());
        assert!(cross_generate(&enc, &s.model, d[0].view(), 5, GenerateMode::ClusterMean, &mut rng).is_err());
    }

    #[test]
    fn pgm_header_and_clamping() {
        let b = pgm_bytes(&[0.0, 0.5, 1.0, 2.0], 2, 2).unwrap();
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 128, 255, 255]);
        assert!(pgm_bytes(&[0.0], 2, 2).is_err());
    }

    #[test]
    fn container_round_trip() {
        let s = state(2, 1);
        let enc = DistilledEncoder::from_model(&s.model, 1).unwrap();
        let back = DistilledEncoder::from_container(&enc.to_container().unwrap()).unwrap();
        assert_eq!(back, enc);
    }
}
