//! Model configuration and parameter layout: per-modality encoders, data-driven
//! decoders or physics experts, and the mixture prior.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::expert::{ExpertKind, ExpertParams, ExpertSpec};
use crate::gaussian::{VAR_MAX, VAR_MIN};
use crate::nn::mlp::{forward, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::nn::{MlpConfig, NetParams, OutputHead, ParamSet};
use crate::prior::MixturePrior;

/// How a modality is reconstructed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Reconstruction {
    /// Neural decoder `Z → x̂` scored by squared error over `variance`.
    DataDriven {
        decoder: MlpConfig,
        #[serde(default = "one")]
        variance: f64,
    },
    /// Per-cluster physics expert on a fixed grid.
    Scientific {
        expert: ExpertSpec,
        #[serde(default)]
        learn_variance: bool,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    pub encoder: MlpConfig,
    pub reconstruction: Reconstruction,
}

impl ModalityConfig {
    pub fn dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn is_scientific(&self) -> bool {
        matches!(self.reconstruction, Reconstruction::Scientific { .. })
    }

    pub fn expert(&self) -> Option<&ExpertSpec> {
        match &self.reconstruction {
            Reconstruction::Scientific { expert, .. } => Some(expert),
            _ => None,
        }
    }
}

/// Where responsibilities are evaluated inside the ELBO.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// At the reparameterized sample `Z`.
    #[default]
    Sample,
    /// At the fused posterior mean.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub clusters: usize,
    pub modalities: Vec<ModalityConfig>,
    #[serde(default)]
    pub gamma_mode: GammaMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be at least 1"));
        }
        if self.clusters == 0 {
            return Err(Error::invalid("clusters must be at least 1"));
        }
        if self.modalities.is_empty() {
            return Err(Error::Empty("modalities"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::invalid(format!("duplicate modality name {}", m.name)));
            }
            m.encoder.validate()?;
            if m.encoder.head != OutputHead::Gaussian {
                return Err(Error::invalid(format!("encoder {} needs a gaussian head", m.name)));
            }
            check_dim("encoder latent width", self.latent_dim, m.encoder.output_dim())?;
            match &m.reconstruction {
                Reconstruction::DataDriven { decoder, variance } => {
                    decoder.validate()?;
                    if decoder.head != OutputHead::Plain {
                        return Err(Error::invalid(format!("decoder {} needs a plain head", m.name)));
                    }
                    check_dim("decoder latent width", self.latent_dim, decoder.input_dim())?;
                    check_dim("decoder output width", m.dim(), decoder.output_dim())?;
                    if !(*variance > 0.0 && variance.is_finite()) {
                        return Err(Error::invalid("reconstruction variance must be positive"));
                    }
                }
                Reconstruction::Scientific { expert, .. } => {
                    expert.validate()?;
                    check_dim("expert grid length", m.dim(), expert.len())?;
                }
            }
        }
        Ok(())
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown modality {name}")))
    }
}

/// Slot indices into the model's [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub encoders: Vec<std::ops::Range<usize>>,
    pub decoders: Vec<Option<std::ops::Range<usize>>>,
    pub experts: Vec<Option<ExpertSlots>>,
    pub logits: usize,
    pub cluster_means: usize,
    pub cluster_log_vars: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertSlots {
    pub theta: usize,
    pub log_var: usize,
}

/// Which parameter groups Adam may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainability {
    /// Expert θ follows Adam (otherwise it is refit in closed form).
    pub experts: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PimaModel {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

fn build(config: &ModelConfig, mut init: impl FnMut(&str, (usize, usize)) -> Array2<f64>) -> (ParamSet, Layout) {
    let mut ps = ParamSet::default();
    let push_net = |ps: &mut ParamSet, cfg: &MlpConfig, prefix: &str, init: &mut dyn FnMut(&str, (usize, usize)) -> Array2<f64>| {
        let start = ps.len();
        for (name, shape) in cfg.tensor_names(prefix).into_iter().zip(tensor_shapes(cfg)) {
            let t = init(&name, shape);
            ps.push(name, t);
        }
        start..ps.len()
    };
    let mut encoders = Vec::new();
    let mut decoders = Vec::new();
    for m in &config.modalities {
        encoders.push(push_net(&mut ps, &m.encoder, &format!("encoder.{}", m.name), &mut init));
    }
    for m in &config.modalities {
        decoders.push(match &m.reconstruction {
            Reconstruction::DataDriven { decoder, .. } => {
                Some(push_net(&mut ps, decoder, &format!("decoder.{}", m.name), &mut init))
            }
            _ => None,
        });
    }
    let (c, l) = (config.clusters, config.latent_dim);
    let logits = ps.push("prior.logits", init("prior.logits", (1, c)));
    let cluster_means = ps.push("prior.means", init("prior.means", (c, l)));
    let cluster_log_vars = ps.push("prior.log_vars", init("prior.log_vars", (c, l)));
    let experts = config
        .modalities
        .iter()
        .map(|m| {
            m.expert().map(|spec| {
                let tn = format!("expert.{}.theta", m.name);
                let vn = format!("expert.{}.log_var", m.name);
                let theta = ps.push(tn.clone(), init(&tn, (c, spec.kind.parameter_count())));
                let log_var = ps.push(vn.clone(), init(&vn, (c, 1)));
                ExpertSlots { theta, log_var }
            })
        })
        .collect();
    (
        ps,
        Layout {
            encoders,
            decoders,
            experts,
            logits,
            cluster_means,
            cluster_log_vars,
        },
    )
}

fn tensor_shapes(cfg: &MlpConfig) -> Vec<(usize, usize)> {
    cfg.layer_shapes()
        .into_iter()
        .flat_map(|(i, o)| [(i, o), (1, o)])
        .collect()
}

impl PimaModel {
    /// Fresh model: fan-in uniform network weights, zero logits, zero
    /// cluster means, unit cluster and expert variances, neutral experts.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut nets: Vec<Array2<f64>> = Vec::new();
        for m in &config.modalities {
            nets.extend(NetParams::init(&m.encoder, rng).tensors);
        }
        for m in &config.modalities {
            if let Reconstruction::DataDriven { decoder, .. } = &m.reconstruction {
                nets.extend(NetParams::init(decoder, rng).tensors);
            }
        }
        let mut nets = nets.into_iter();
        let experts: Vec<_> = config
            .modalities
            .iter()
            .filter_map(|m| m.expert())
            .map(|s| ExpertParams::initial(s, config.clusters).theta)
            .collect();
        let mut experts = experts.into_iter();
        let (params, layout) = build(&config, |name, shape| {
            if name.starts_with("encoder.") || name.starts_with("decoder.") {
                nets.next().expect("one tensor per network slot")
            } else if name.ends_with(".theta") {
                experts.next().expect("one theta per expert")
            } else {
                Array2::zeros(shape)
            }
        });
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let (expected, layout) = build(&config, |_, shape| Array2::zeros(shape));
        check_dim("parameter tensor count", expected.len(), params.len())?;
        for (i, (name, t)) in expected.names.iter().zip(&expected.tensors).enumerate() {
            if &params.names[i] != name {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is {} but {name} was expected",
                    params.names[i]
                )));
            }
            if params.tensors[i].dim() != t.dim() {
                return Err(Error::Checkpoint(format!("tensor {name} has the wrong shape")));
            }
            if params.tensors[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn clusters(&self) -> usize {
        self.config.clusters
    }

    pub fn modality_count(&self) -> usize {
        self.config.modalities.len()
    }

    /// Slots Adam may update. Cluster means are always EM-owned; expert
    /// variances move only when `learn_variance` is set and experts are
    /// Adam-trained (otherwise they are refit with θ).
    pub fn trainable_mask(&self, t: Trainability) -> Vec<bool> {
        let mut mask = vec![true; self.params.len()];
        mask[self.layout.cluster_means] = false;
        for (m, slots) in self.config.modalities.iter().zip(&self.layout.experts) {
            if let (Some(s), Reconstruction::Scientific { learn_variance, .. }) =
                (slots, &m.reconstruction)
            {
                mask[s.theta] = t.experts;
                mask[s.log_var] = *learn_variance && t.experts;
            }
        }
        mask
    }

    pub fn prior(&self) -> MixturePrior {
        let lv = &self.params.tensors[self.layout.cluster_log_vars];
        MixturePrior::new(
            self.params.tensors[self.layout.logits].row(0).to_vec(),
            self.params.tensors[self.layout.cluster_means].clone(),
            lv.mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp()),
        )
        .expect("prior tensors keep valid shapes")
    }

    pub fn cluster_means(&self) -> &Array2<f64> {
        &self.params.tensors[self.layout.cluster_means]
    }

    pub fn set_cluster_means(&mut self, means: Array2<f64>) -> Result<()> {
        let slot = self.layout.cluster_means;
        if means.dim() != self.params.tensors[slot].dim() {
            return Err(Error::invalid("cluster means have the wrong shape"));
        }
        self.params.tensors[slot] = means;
        Ok(())
    }

    pub fn encoder_tensors(&self, m: usize) -> &[Array2<f64>] {
        &self.params.tensors[self.layout.encoders[m].clone()]
    }

    pub fn encoder_params(&self, m: usize) -> NetParams {
        NetParams {
            tensors: self.encoder_tensors(m).to_vec(),
        }
    }

    pub fn decoder_tensors(&self, m: usize) -> Option<&[Array2<f64>]> {
        self.layout.decoders[m]
            .clone()
            .map(|r| &self.params.tensors[r])
    }

    pub fn expert_spec(&self, m: usize) -> Option<&ExpertSpec> {
        self.config.modalities[m].expert()
    }

    pub fn expert_params(&self, m: usize) -> Option<ExpertParams> {
        let spec = self.expert_spec(m)?;
        let slots = self.layout.experts[m]?;
        Some(ExpertParams {
            kind: spec.kind,
            theta: self.params.tensors[slots.theta].clone(),
        })
    }

    pub fn set_expert_theta(&mut self, m: usize, theta: Array2<f64>) -> Result<()> {
        let slots = self.layout.experts[m]
            .ok_or_else(|| Error::invalid("modality has no expert"))?;
        if theta.dim() != self.params.tensors[slots.theta].dim() {
            return Err(Error::invalid("expert parameters have the wrong shape"));
        }
        self.params.tensors[slots.theta] = theta;
        Ok(())
    }

    pub fn set_expert_variances(&mut self, m: usize, vars: &[f64]) -> Result<()> {
        let slots = self.layout.experts[m]
            .ok_or_else(|| Error::invalid("modality has no expert"))?;
        check_dim("expert variances", self.clusters(), vars.len())?;
        if vars.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("expert variances must be positive"));
        }
        let t = &mut self.params.tensors[slots.log_var];
        for (c, v) in vars.iter().enumerate() {
            t[[c, 0]] = v.ln();
        }
        Ok(())
    }

    /// Per-cluster expert variances `σ̂²_c`.
    pub fn expert_variances(&self, m: usize) -> Option<Vec<f64>> {
        let slots = self.layout.experts[m]?;
        Some(
            self.params.tensors[slots.log_var]
                .iter()
                .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp())
                .collect(),
        )
    }

    /// Keeps Adam-updated expert parameters inside their domain.
    pub fn project_experts(&mut self) {
        for (m, slots) in self.layout.experts.iter().enumerate() {
            let (Some(slots), Some(spec)) = (slots, self.config.modalities[m].expert()) else {
                continue;
            };
            if spec.kind != ExpertKind::StrainHardening {
                continue;
            }
            let span = spec.t_max() - spec.t_min();
            let (lo, hi) = (spec.t_min() + 1e-6 * span, spec.t_max() - 1e-6 * span);
            for mut row in self.params.tensors[slots.theta].rows_mut() {
                row[0] = row[0].max(1e-6);
                row[1] = row[1].clamp(lo, hi);
            }
        }
    }

    /// Unimodal posterior moments for a batch of one modality.
    pub fn encode(&self, m: usize, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        crate::nn::encode_batch(&self.config.modalities[m].encoder, self.encoder_tensors(m), x)
    }

    /// Product-of-experts posterior over the listed modalities.
    pub fn fuse(&self, batch: &[Array2<f64>], which: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        if which.is_empty() {
            return Err(Error::Empty("modalities to fuse"));
        }
        let n = batch[which[0]].nrows();
        let l = self.latent_dim();
        let mut prec = Array2::<f64>::zeros((n, l));
        let mut weighted = Array2::<f64>::zeros((n, l));
        for &m in which {
            check_dim("batch rows", n, batch[m].nrows())?;
            let (mu, var) = self.encode(m, batch[m].view())?;
            let p = var.mapv(f64::recip);
            weighted += &(&mu * &p);
            prec += &p;
        }
        let var = prec.mapv(|p| (1.0 / p).clamp(VAR_MIN, VAR_MAX));
        Ok((&weighted * &var, var))
    }

    /// Fused posterior over every modality.
    pub fn fuse_all(&self, batch: &[Array2<f64>]) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_batch(batch)?;
        let all: Vec<usize> = (0..self.modality_count()).collect();
        self.fuse(batch, &all)
    }

    /// Data-driven decoder means for latent rows.
    pub fn decode(&self, m: usize, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let Reconstruction::DataDriven { decoder, .. } = &self.config.modalities[m].reconstruction
        else {
            return Err(Error::invalid(format!(
                "modality {} has no data-driven decoder",
                self.config.modalities[m].name
            )));
        };
        check_dim("decoder latent width", self.latent_dim(), z.ncols())?;
        let out = forward(decoder, self.decoder_tensors(m).expect("decoder slot"), z);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder activations".into()));
        }
        Ok(out)
    }

    pub fn check_batch(&self, batch: &[Array2<f64>]) -> Result<()> {
        check_dim("modality count", self.modality_count(), batch.len())?;
        let n = batch[0].nrows();
        for (x, m) in batch.iter().zip(&self.config.modalities) {
            check_dim("batch rows", n, x.nrows())?;
            check_dim("modality width", m.dim(), x.ncols())?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("modality {} input", m.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::expert::ExpertKind;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// l=2, C=3, a 4-wide data-driven modality and a 5-point affine one.
    pub(crate) fn tiny_config(kind: ExpertKind) -> ModelConfig {
        let l = 2;
        ModelConfig {
            latent_dim: l,
            clusters: 3,
            gamma_mode: GammaMode::Sample,
            modalities: vec![
                ModalityConfig {
                    name: "image".into(),
                    encoder: MlpConfig::new(4, &[6], l, Activation::Tanh, OutputHead::Gaussian),
                    reconstruction: Reconstruction::DataDriven {
                        decoder: MlpConfig::new(l, &[6], 4, Activation::Tanh, OutputHead::Plain),
                        variance: 1.0,
                    },
                },
                ModalityConfig {
                    name: "signal".into(),
                    encoder: MlpConfig::new(5, &[6], l, Activation::Tanh, OutputHead::Gaussian),
                    reconstruction: Reconstruction::Scientific {
                        expert: ExpertSpec::linspace(kind, 0.0, 1.0, 5).unwrap(),
                        learn_variance: true,
                    },
                },
            ],
        }
    }

    #[test]
    fn layout_round_trips_through_from_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = PimaModel::new(tiny_config(ExpertKind::StrainHardening), &mut rng).unwrap();
        let again = PimaModel::from_params(m.config().clone(), m.params().clone()).unwrap();
        assert_eq!(m, again);
        let mut bad = m.params().clone();
        bad.names.swap(0, 1);
        assert!(PimaModel::from_params(m.config().clone(), bad).is_err());
    }

    #[test]
    fn mask_freezes_means_and_optionally_experts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = PimaModel::new(tiny_config(ExpertKind::Affine), &mut rng).unwrap();
        let mask = m.trainable_mask(Trainability { experts: false });
        let slots = m.layout().experts[1].unwrap();
        assert!(!mask[m.layout().cluster_means]);
        assert!(!mask[slots.theta]);
        assert!(!mask[slots.log_var]);
        let adam = m.trainable_mask(Trainability { experts: true });
        assert!(adam[slots.theta] && adam[slots.log_var]);
    }

    #[test]
    fn fuse_single_modality_is_its_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = PimaModel::new(tiny_config(ExpertKind::Affine), &mut rng).unwrap();
        let x = vec![
            Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 * 0.1),
            Array2::from_shape_fn((3, 5), |(i, j)| (i * j) as f64 * 0.1),
        ];
        let (mu, var) = m.fuse(&x, &[0]).unwrap();
        let (emu, evar) = m.encode(0, x[0].view()).unwrap();
        for (a, b) in mu.iter().zip(emu.iter()) {
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
        for (a, b) in var.iter().zip(evar.iter()) {
            assert!((a - b).abs() <= 1e-15 * b);
        }
    }

    #[test]
    fn config_rejects_mismatched_widths() {
        let mut cfg = tiny_config(ExpertKind::Affine);
        cfg.modalities[1].reconstruction = Reconstruction::Scientific {
            expert: ExpertSpec::linspace(ExpertKind::Affine, 0.0, 1.0, 7).unwrap(),
            learn_variance: false,
        };
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(ExpertKind::Affine);
        cfg.modalities[1].name = "image".into();
        assert!(cfg.validate().is_err());
    }
}
