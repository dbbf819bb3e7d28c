use ndarray::{Array2, Axis};
use pima::crossmodal::{
    cross_generate, distill, distill_loss, fused_posterior, infer_cluster, DistillConfig, DistilledEncoder,
    GenerateMode,
};
use pima::dataset::unit_grid;
use pima::exec::Exec;
use pima::expert::{evaluate_expert, ExpertKind, ExpertSpec};
use pima::metrics::unsupervised_accuracy;
use pima::model::{GammaMode, ModalityConfig, ModelConfig, Reconstruction};
use pima::nn::{Activation, MlpConfig, OutputHead};
use pima::prior::Responsibilities;
use pima::trainer::{train, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn separable(n: usize, seed: u64, constant_signal: bool) -> (Vec<Array2<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = unit_grid(20);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut pts = Array2::zeros((n, 2));
    let mut curves = Array2::zeros((n, 20));
    for (i, &c) in labels.iter().enumerate() {
        let centre = if c == 0 { 0.2 } else { 0.8 };
        for j in 0..2 {
            pts[[i, j]] = centre + 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
        let slope = if c == 0 { 0.0 } else { 9.0 };
        for (k, tk) in t.iter().enumerate() {
            curves[[i, k]] = if constant_signal {
                0.5 * tk
            } else {
                (slope * tk + 0.1 * rng.sample::<f64, _>(StandardNormal)) / 9.0
            };
        }
    }
    (vec![pts, curves], labels)
}

fn config(clusters: usize, with_signal: bool) -> ModelConfig {
    let l = 2;
    let mut modalities = vec![ModalityConfig {
        name: "points".into(),
        encoder: MlpConfig::new(2, &[16], l, Activation::Tanh, OutputHead::Gaussian),
        reconstruction: Reconstruction::DataDriven {
            decoder: MlpConfig::new(l, &[16], 2, Activation::Tanh, OutputHead::Plain),
            variance: 0.01,
        },
    }];
    if with_signal {
        modalities.push(ModalityConfig {
            name: "signal".into(),
            encoder: MlpConfig::new(20, &[16], l, Activation::Tanh, OutputHead::Gaussian),
            reconstruction: Reconstruction::Scientific {
                expert: ExpertSpec::new(ExpertKind::Affine, unit_grid(20)).unwrap(),
                learn_variance: true,
            },
        });
    }
    ModelConfig {
        latent_dim: l,
        clusters,
        gamma_mode: GammaMode::Sample,
        modalities,
    }
}

fn trained(model: ModelConfig, data: &[Array2<f64>], epochs: usize) -> TrainState {
    let mut cfg = TrainConfig::new(model, epochs, 32, 1e-2, 3);
    cfg.exec = Exec::Sequential;
    train(cfg, data).unwrap().0
}

fn distill_cfg(epochs: usize, lr: f64) -> DistillConfig {
    let mut c = DistillConfig::new(epochs, 32, 11);
    c.learning_rate = Some(lr);
    c.exec = Exec::Sequential;
    c
}

#[test]
fn self_target_has_zero_kl_before_training() {
    let (data, _) = separable(64, 1, false);
    let points = vec![data[0].clone()];
    let state = trained(config(2, false), &points, 1);
    let (enc, report) = distill(&state, &points, 0, &distill_cfg(0, 1e-3)).unwrap();
    assert!(report.epoch_loss[0].abs() < 1e-6, "{:?}", report.epoch_loss);
    assert_eq!(enc, DistilledEncoder::from_model(&state.model, 0).unwrap());
}

#[test]
fn modality_that_determines_the_posterior_is_matched() {
    let (data, _) = separable(200, 2, true);
    let state = trained(config(2, true), &data, 20);
    let mut cfg = distill_cfg(300, 2e-3);
    cfg.batch_size = 200;
    let (enc, report) = distill(&state, &data, 0, &cfg).unwrap();
    assert!(report.monotone_fraction() >= 0.9, "{:?}", report.epoch_loss);

    let (test, _) = separable(100, 77, true);
    let (target, _) = fused_posterior(&state.model, &test, Exec::Sequential, 64).unwrap();
    let (mu, _) = enc.encode(test[0].view()).unwrap();
    let err = (&mu - &target).mapv(|v| v * v).sum().sqrt();
    let norm = target.mapv(|v| v * v).sum().sqrt();
    assert!(err < 0.05 * norm, "error {err} vs norm {norm}");
}

#[test]
fn distilled_encoders_recover_separable_clusters() {
    let (data, _) = separable(200, 5, false);
    let state = trained(config(2, true), &data, 50);
    let (test, labels) = separable(100, 99, false);
    for (m, epochs, lr) in [(0, 30, 3e-3), (1, 10, 1e-3)] {
        let (enc, report) = distill(&state, &data, m, &distill_cfg(epochs, lr)).unwrap();
        assert!(report.monotone_fraction() >= 0.9, "modality {m}: {:?}", report.epoch_loss);
        let g = Responsibilities::new(infer_cluster(&enc, &state.model.prior(), test[m].view()).unwrap()).unwrap();
        for row in g.view().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        let acc = unsupervised_accuracy(&labels, &g.argmax()).unwrap().accuracy;
        assert!(acc >= 0.99, "modality {m}: accuracy {acc}");
    }
}

#[test]
fn cluster_mean_generation_is_a_function_of_the_cluster() {
    let (data, _) = separable(200, 5, false);
    let state = trained(config(2, true), &data, 10);
    let model = &state.model;
    let enc = DistilledEncoder::from_model(model, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gen = cross_generate(&enc, model, data[0].view(), 1, GenerateMode::ClusterMean, &mut rng).unwrap();
    let spec = model.expert_spec(1).unwrap();
    let params = model.expert_params(1).unwrap();
    for (i, &c) in gen.clusters.iter().enumerate() {
        let expected = evaluate_expert(spec, &params.row(c)).unwrap();
        assert_eq!(gen.output.row(i).to_vec(), expected);
    }

    // image-like target from the signal encoder
    let enc = DistilledEncoder::from_model(model, 1).unwrap();
    let gen = cross_generate(&enc, model, data[1].view(), 0, GenerateMode::ClusterMean, &mut rng).unwrap();
    for (i, &c) in gen.clusters.iter().enumerate() {
        let first = gen.clusters.iter().position(|&k| k == c).unwrap();
        assert_eq!(gen.output.row(i), gen.output.row(first));
        assert_eq!(gen.latent.row(i), model.cluster_means().row(c));
    }
    let sampled = cross_generate(&enc, model, data[1].view(), 0, GenerateMode::Sampled, &mut rng).unwrap();
    assert_eq!(sampled.output.dim(), (200, 2));
    assert_ne!(sampled.latent.index_axis(Axis(0), 0), sampled.latent.index_axis(Axis(0), 2));
}

#[test]
fn distill_loss_rejects_row_mismatch() {
    let (data, _) = separable(10, 1, false);
    let state = trained(config(2, true), &data, 1);
    let enc = DistilledEncoder::from_model(&state.model, 0).unwrap();
    let (m, v) = fused_posterior(&state.model, &data, Exec::Sequential, 4).unwrap();
    let short = data[0].slice(ndarray::s![..5, ..]);
    assert!(distill_loss(&enc, short, &m, &v, Default::default()).is_err());
}
