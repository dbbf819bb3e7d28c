//! Ready-made model configurations for the bundled experiments.

use crate::dataset::unit_grid;
use crate::error::Result;
use crate::expert::{ExpertKind, ExpertSpec};
use crate::model::{GammaMode, ModalityConfig, ModelConfig, Reconstruction};
use crate::nn::{Activation, MlpConfig, OutputHead};
use crate::trainer::{AnchorPolicy, TrainConfig};

/// Image + linear-signal model for multimodal MNIST.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistPreset {
    pub latent_dim: usize,
    pub clusters: usize,
    pub image_pixels: usize,
    pub image_hidden: Vec<usize>,
    pub signal_points: usize,
    pub signal_hidden: Vec<usize>,
    pub image_variance: f64,
}

impl Default for MnistPreset {
    fn default() -> Self {
        Self {
            latent_dim: 3,
            clusters: 10,
            image_pixels: 784,
            image_hidden: vec![128, 64],
            signal_points: 20,
            signal_hidden: vec![64, 64, 64],
            image_variance: 1.0,
        }
    }
}

impl MnistPreset {
    pub fn build(&self) -> Result<ModelConfig> {
        let l = self.latent_dim;
        let mut dec_hidden = self.image_hidden.clone();
        dec_hidden.reverse();
        let cfg = ModelConfig {
            latent_dim: l,
            clusters: self.clusters,
            gamma_mode: GammaMode::Sample,
            modalities: vec![
                ModalityConfig {
                    name: "image".into(),
                    encoder: MlpConfig::new(self.image_pixels, &self.image_hidden, l, Activation::Elu, OutputHead::Gaussian),
                    reconstruction: Reconstruction::DataDriven {
                        decoder: MlpConfig::new(l, &dec_hidden, self.image_pixels, Activation::Elu, OutputHead::Plain),
                        variance: self.image_variance,
                    },
                },
                ModalityConfig {
                    name: "signal".into(),
                    encoder: MlpConfig::new(self.signal_points, &self.signal_hidden, l, Activation::Elu, OutputHead::Gaussian),
                    reconstruction: Reconstruction::Scientific {
                        expert: ExpertSpec::new(ExpertKind::Affine, unit_grid(self.signal_points))?,
                        learn_variance: true,
                    },
                },
            ],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training recipe used for the MNIST runs. On the full 60k training
    /// set an epoch is ~470 Adam steps between EM rounds; at 3e-3 the
    /// encoders drift far enough in the first epoch after the anchor is
    /// released that clusters merge.
    pub fn train_config(&self, epochs: usize, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig::new(self.build()?, epochs, 128, 1e-3, seed))
    }
}

/// Texture image + stress-strain curve model for the lattice-style
/// benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticePreset {
    pub latent_dim: usize,
    pub clusters: usize,
    pub image_side: usize,
    pub curve_points: usize,
    pub hidden: Vec<usize>,
    pub image_variance: f64,
}

impl Default for LatticePreset {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            clusters: 2,
            image_side: 32,
            curve_points: 100,
            hidden: vec![64],
            // 1024 texture pixels at unit variance swamp the cluster terms
            // and the image encoder ends up encoding texture phase.
            image_variance: 100.0,
        }
    }
}

impl LatticePreset {
    pub fn build(&self) -> Result<ModelConfig> {
        let l = self.latent_dim;
        let pixels = self.image_side * self.image_side;
        let cfg = ModelConfig {
            latent_dim: l,
            clusters: self.clusters,
            gamma_mode: GammaMode::Sample,
            modalities: vec![
                ModalityConfig {
                    name: "image".into(),
                    encoder: MlpConfig::new(pixels, &self.hidden, l, Activation::Elu, OutputHead::Gaussian),
                    reconstruction: Reconstruction::DataDriven {
                        decoder: MlpConfig::new(l, &self.hidden, pixels, Activation::Elu, OutputHead::Plain),
                        variance: self.image_variance,
                    },
                },
                ModalityConfig {
                    name: "curve".into(),
                    encoder: MlpConfig::new(self.curve_points, &self.hidden, l, Activation::Elu, OutputHead::Gaussian),
                    reconstruction: Reconstruction::Scientific {
                        expert: ExpertSpec::new(ExpertKind::StrainHardening, unit_grid(self.curve_points))?,
                        learn_variance: true,
                    },
                },
            ],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training recipe for the benchmark. With under a hundred records an
    /// epoch is a handful of steps, so the seeded centers are held until
    /// the encoders have reached them.
    pub fn train_config(&self, epochs: usize, seed: u64) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(self.build()?, epochs, 16, 3e-3, seed);
        cfg.anchor_policy = AnchorPolicy::Held;
        Ok(cfg)
    }
}
