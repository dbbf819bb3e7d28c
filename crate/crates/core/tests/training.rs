use ndarray::Array2;
use pima::dataset::unit_grid;
use pima::elbo::{evaluate_dataset, fused_means, responsibilities};
use pima::exec::Exec;
use pima::expert::{ExpertKind, ExpertSpec};
use pima::metrics::unsupervised_accuracy;
use pima::model::{GammaMode, ModalityConfig, ModelConfig, Reconstruction};
use pima::nn::{Activation, MlpConfig, OutputHead};
use pima::trainer::{train, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Two clusters: 2-D point clouds around (0.2, 0.2) and (0.8, 0.8), paired
/// with affine curves of slope 0 and 9 (scaled by 1/9).
fn separable(n: usize, seed: u64) -> (Vec<Array2<f64>>, Vec<usize>) {
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
            curves[[i, k]] = (slope * tk + 0.1 * rng.sample::<f64, _>(StandardNormal)) / 9.0;
        }
    }
    (vec![pts, curves], labels)
}

fn separable_config(clusters: usize) -> ModelConfig {
    let l = 2;
    ModelConfig {
        latent_dim: l,
        clusters,
        gamma_mode: GammaMode::Sample,
        modalities: vec![
            ModalityConfig {
                name: "points".into(),
                encoder: MlpConfig::new(2, &[16], l, Activation::Tanh, OutputHead::Gaussian),
                reconstruction: Reconstruction::DataDriven {
                    decoder: MlpConfig::new(l, &[16], 2, Activation::Tanh, OutputHead::Plain),
                    variance: 0.01,
                },
            },
            ModalityConfig {
                name: "signal".into(),
                encoder: MlpConfig::new(20, &[16], l, Activation::Tanh, OutputHead::Gaussian),
                reconstruction: Reconstruction::Scientific {
                    expert: ExpertSpec::new(ExpertKind::Affine, unit_grid(20)).unwrap(),
                    learn_variance: true,
                },
            },
        ],
    }
}

fn cluster_ids(model: &pima::model::PimaModel, data: &[Array2<f64>]) -> Vec<usize> {
    let mu = fused_means(model, data, Exec::Sequential, 256).unwrap();
    let g = responsibilities(model, mu.view(), Exec::Sequential, 256).unwrap();
    g.rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
        .collect()
}

#[test]
fn separable_two_cluster_data_is_recovered() {
    let (data, labels) = separable(200, 5);
    let mut cfg = TrainConfig::new(separable_config(2), 50, 32, 1e-2, 3);
    cfg.exec = Exec::Sequential;
    let (state, history) = train(cfg, &data).unwrap();
    let acc = unsupervised_accuracy(&labels, &cluster_ids(&state.model, &data))
        .unwrap()
        .accuracy;
    assert_eq!(acc, 1.0, "last loss {}", history.epochs.last().unwrap().loss);

    // held-out records from the same generator
    let (test, test_labels) = separable(100, 99);
    let acc = unsupervised_accuracy(&test_labels, &cluster_ids(&state.model, &test))
        .unwrap()
        .accuracy;
    assert!(acc >= 0.99, "held-out accuracy {acc}");
}

/// Full-data loss at fixed noise after each epoch.
fn eval_loss(model: &pima::model::PimaModel, data: &[Array2<f64>]) -> f64 {
    let rows = evaluate_dataset(model, data, 0, Exec::Sequential, 512).unwrap();
    -rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64
}

#[test]
fn single_cluster_loss_decreases_after_warmup() {
    let mut monotone = 0;
    for s in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
        let pts = Array2::from_shape_simple_fn((64, 2), || 0.5 + 0.1 * rng.sample::<f64, _>(StandardNormal));
        let curves = Array2::from_shape_fn((64, 20), |(_, k)| 0.5 * k as f64 / 19.0);
        let data = vec![pts, curves];
        let mut cfg = TrainConfig::new(separable_config(1), 8, 64, 3e-3, s);
        cfg.exec = Exec::Sequential;
        let mut t = Trainer::new(cfg).unwrap();
        t.run_epoch(&data).unwrap();
        let mut losses = vec![eval_loss(&t.state().model, &data)];
        for _ in 1..8 {
            t.run_epoch(&data).unwrap();
            losses.push(eval_loss(&t.state().model, &data));
        }
        if losses.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 19, "{monotone}/20 seeds monotone");
}
