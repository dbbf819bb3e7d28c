//! Training loop: per-epoch responsibilities, streaming EM for the cluster
//! centers, expert refits and Adam over shuffled batches. Checkpoints and
//! per-epoch history.

use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::elbo::{fused_means, loss_and_gradients_with_gamma, responsibilities, ElboBreakdown};
use crate::error::{check_dim, Error, Result};
use crate::exec::Exec;
use crate::metrics::linear_assignment;
use crate::expert::{fit_cluster, fit_cluster_variance};
use crate::model::{ModelConfig, PimaModel, Reconstruction, Trainability};
use crate::nn::{AdamConfig, AdamState, ParamSet};
use crate::prior::{em_update_means, kmeans, latent_quadratic, Responsibilities, StreamingEm};
use crate::seed;

const CHECKPOINT_KIND: &str = "train_state";

const KMEANS_ITERATIONS: usize = 100;
const KMEANS_RESTARTS: usize = 10;

/// The anchor is released once, with centers at the partition's member
/// means, this share of records is assigned to its anchor cluster and the
/// mean largest responsibility reaches it too.
const ANCHOR_AGREEMENT: f64 = 0.9;

/// Per-axis RMS distance of seeded cluster means from their centroid.
const SEED_SPREAD: f64 = 5.0;

/// Latent starting points for the partition's clusters: k-means centroids
/// of the fused means, matched to the partition so that each cluster gets
/// the centroid nearest its members' mean, then rescaled to `SEED_SPREAD`.
/// Freshly initialized encoders put every record near the origin, so the
/// raw centroids alone would leave the clusters on top of each other.
fn spread_centers<R: rand::Rng + ?Sized>(
    mu: &Array2<f64>,
    assign: &[usize],
    clusters: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let (sites, _) = kmeans(mu.view(), clusters, KMEANS_ITERATIONS, KMEANS_RESTARTS, rng)?;
    let member_means = StreamingEm::new(clusters, mu.ncols());
    let mut em = member_means;
    em.push(Responsibilities::one_hot(assign, clusters)?.view(), mu.view())?;
    let means = em.finish(&sites)?.means;
    let cost = Array2::from_shape_fn((clusters, clusters), |(c, j)| {
        means.row(c).iter().zip(sites.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    });
    let matched = linear_assignment(&cost)?;
    let mut out = Array2::zeros(sites.dim());
    for (c, j) in matched.columns.iter().enumerate() {
        out.row_mut(c).assign(&sites.row(j.expect("square cost")));
    }
    let centre = out.mean_axis(Axis(0)).expect("at least one cluster");
    out -= &centre;
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        out *= SEED_SPREAD / rms;
    }
    out += &centre;
    Ok(out)
}

/// Space in which the initial partition is computed: the scientific
/// modalities side by side, or the fused means when there are none.
fn seeding_features(model: &PimaModel, data: &[Array2<f64>], mu: &Array2<f64>) -> Array2<f64> {
    let sci: Vec<_> = (0..model.modality_count())
        .filter(|&m| model.expert_spec(m).is_some())
        .map(|m| data[m].view())
        .collect();
    if sci.is_empty() {
        mu.clone()
    } else {
        ndarray::concatenate(Axis(1), &sci).expect("aligned rows")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertRefit {
    /// Weighted least squares (and, with `learn_variance`, the matching
    /// noise variance) after each EM step; Adam leaves both alone.
    #[default]
    ClosedFormPerEpoch,
    /// θ is an ordinary Adam parameter.
    Adam,
}

/// How the initial partition hands over to the model's own
/// responsibilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// EM keeps moving the centers to the partition's member means and the
    /// anchor lasts exactly `anchor_epochs`. Suits many Adam steps per
    /// epoch.
    #[default]
    Tracking,
    /// The seeded centers stay put as targets for the encoders, and the
    /// anchor is released once the model's own assignments agree with it.
    /// Suits small data sets, where a few epochs are only a handful of
    /// steps.
    Held,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub expert_refit: ExpertRefit,
    /// Epochs of encoder/decoder training before the k-means partition
    /// that seeds cluster centers and experts.
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    /// Epochs, starting right after warm-up, in which the initial k-means
    /// partition stands in for the responsibilities. A minimum under
    /// [`AnchorPolicy::Held`].
    #[serde(default = "default_anchor")]
    pub anchor_epochs: usize,
    /// Upper bound under [`AnchorPolicy::Held`].
    #[serde(default = "default_anchor_max")]
    pub anchor_max_epochs: usize,
    #[serde(default)]
    pub anchor_policy: AnchorPolicy,
    #[serde(default)]
    pub exec: Exec,
    /// Row chunk for the data-wide passes.
    #[serde(default = "default_chunk")]
    pub eval_chunk: usize,
}

fn default_warmup() -> usize {
    0
}

fn default_anchor() -> usize {
    3
}

fn default_anchor_max() -> usize {
    100
}

fn default_chunk() -> usize {
    1024
}

impl TrainConfig {
    pub fn new(model: ModelConfig, epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            model,
            epochs,
            batch_size,
            learning_rate,
            seed,
            expert_refit: ExpertRefit::default(),
            warmup_epochs: default_warmup(),
            anchor_epochs: default_anchor(),
            anchor_max_epochs: default_anchor_max(),
            anchor_policy: AnchorPolicy::default(),
            exec: Exec::default(),
            eval_chunk: default_chunk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }

    fn trainability(&self) -> Trainability {
        Trainability {
            experts: self.expert_refit == ExpertRefit::Adam,
        }
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: PimaModel,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Cluster centers have been seeded from the data.
    pub seeded: bool,
    /// Initial k-means partition of the training records while it is in
    /// use.
    pub anchor: Option<Vec<usize>>,
}

impl TrainState {
    pub fn initial(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, "init", 0);
        let model = PimaModel::new(config.model.clone(), &mut rng)?;
        let adam = AdamState::new(
            AdamConfig::with_learning_rate(config.learning_rate),
            &model.params().tensors,
        );
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            seeded: false,
            anchor: None,
        })
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-record loss over the Adam pass.
    pub loss: f64,
    /// Mean per-record ELBO terms over the Adam pass.
    pub terms: ElboBreakdown,
    /// `Σ_d γ_cd` from the responsibility pass.
    pub occupancy: Vec<f64>,
    pub empty_clusters: Vec<usize>,
    /// γ-fixed latent quadratic before and after the EM step; absent
    /// during warm-up.
    pub em_quadratic: Option<(f64, f64)>,
    /// Clusters whose closed-form expert refit failed and kept their
    /// previous parameters.
    pub refit_fallbacks: Vec<usize>,
    /// Responsibilities were the fixed anchor partition.
    #[serde(default)]
    pub anchored: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub struct Trainer {
    state: TrainState,
}

fn rows(data: &[Array2<f64>], idx: &[usize]) -> Vec<Array2<f64>> {
    data.iter().map(|x| x.select(Axis(0), idx)).collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Ok(Self {
            state: TrainState::initial(config)?,
        })
    }

    pub fn from_state(state: TrainState) -> Result<Self> {
        state.config.validate()?;
        Ok(Self { state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// Runs one epoch. On a non-finite loss the state is rolled back to
    /// the start of the epoch and the error is returned.
    pub fn run_epoch(&mut self, data: &[Array2<f64>]) -> Result<EpochRecord> {
        let snapshot = self.state.clone();
        let out = self.epoch_inner(data);
        if out.is_err() {
            self.state = snapshot;
        }
        out
    }

    fn epoch_inner(&mut self, data: &[Array2<f64>]) -> Result<EpochRecord> {
        let st = &mut self.state;
        let cfg = st.config.clone();
        st.model.check_batch(data)?;
        let n = data[0].nrows();
        if n == 0 {
            return Err(Error::Empty("training data"));
        }
        let epoch = st.epoch;
        let warm = epoch < cfg.warmup_epochs;

        // (1) responsibilities at the fused means, or the anchor partition
        let mu = fused_means(&st.model, data, cfg.exec, cfg.eval_chunk)?;
        let seeding = !warm && !st.seeded;
        if seeding {
            let mut rng = seed::rng(cfg.seed, "kmeans", 0);
            let feats = seeding_features(&st.model, data, &mu);
            let (_, assign) = kmeans(feats.view(), st.model.clusters(), KMEANS_ITERATIONS, KMEANS_RESTARTS, &mut rng)?;
            st.model.set_cluster_means(spread_centers(&mu, &assign, st.model.clusters(), &mut rng)?)?;
            st.anchor = Some(assign);
            st.seeded = true;
        }
        let mut own = None;
        if let Some(a) = &st.anchor {
            check_dim("anchor partition length", n, a.len())?;
            let held = epoch - cfg.warmup_epochs;
            if cfg.anchor_policy == AnchorPolicy::Tracking && held >= cfg.anchor_epochs.max(1) {
                st.anchor = None;
            } else if held >= cfg.anchor_epochs.max(1) {
                let one_hot = Responsibilities::one_hot(a, st.model.clusters())?;
                let mut trial = st.model.clone();
                trial.set_cluster_means(em_update_means(one_hot.view(), mu.view(), st.model.cluster_means())?.means)?;
                let g = Responsibilities::new(responsibilities(&trial, mu.view(), cfg.exec, cfg.eval_chunk)?)?;
                let agree = g.argmax().iter().zip(a).filter(|(x, y)| x == y).count() as f64 / n as f64;
                let confidence = g.view().rows().into_iter().map(|r| r.fold(0.0f64, |m, &v| m.max(v))).sum::<f64>() / n as f64;
                let ready = agree >= ANCHOR_AGREEMENT && confidence >= ANCHOR_AGREEMENT;
                if ready || held >= cfg.anchor_max_epochs.max(cfg.anchor_epochs) {
                    log::debug!("anchor released at epoch {epoch}: agreement {agree:.3}, confidence {confidence:.3}");
                    st.anchor = None;
                    own = Some(responsibilities(&st.model, mu.view(), cfg.exec, cfg.eval_chunk)?);
                }
            }
        }
        let fixed_gamma = st.anchor.is_some();
        let gamma = match (&st.anchor, own) {
            (Some(a), _) => Responsibilities::one_hot(a, st.model.clusters())?.into_inner(),
            (None, Some(g)) => g,
            (None, None) => responsibilities(&st.model, mu.view(), cfg.exec, cfg.eval_chunk)?,
        };
        let occupancy = gamma.sum_axis(Axis(0)).to_vec();

        // (2) streaming EM over the batches
        let mut empty_clusters = Vec::new();
        let mut em_quadratic = None;
        let centers_held = fixed_gamma && cfg.anchor_policy == AnchorPolicy::Held;
        if !warm && !seeding && !centers_held {
            let vars = st.model.prior().vars().clone();
            let before = latent_quadratic(gamma.view(), mu.view(), st.model.cluster_means(), &vars);
            let mut em = StreamingEm::new(st.model.clusters(), st.model.latent_dim());
            for start in (0..n).step_by(cfg.batch_size) {
                let end = (start + cfg.batch_size).min(n);
                em.push(gamma.slice(s![start..end, ..]), mu.slice(s![start..end, ..]))?;
            }
            let up = em.finish(st.model.cluster_means())?;
            let after = latent_quadratic(gamma.view(), mu.view(), &up.means, &vars);
            st.model.set_cluster_means(up.means)?;
            empty_clusters = up.empty_clusters;
            em_quadratic = Some((before, after));
        }

        // (3) closed-form expert refit
        let mut refit_fallbacks = Vec::new();
        if cfg.expert_refit == ExpertRefit::ClosedFormPerEpoch {
            for m in 0..st.model.modality_count() {
                let (Some(spec), Some(mut params)) = (st.model.expert_spec(m).cloned(), st.model.expert_params(m))
                else {
                    continue;
                };
                let learn_variance = matches!(
                    st.model.config().modalities[m].reconstruction,
                    Reconstruction::Scientific { learn_variance: true, .. }
                );
                let mut vars = st.model.expert_variances(m).expect("expert modality");
                for c in 0..st.model.clusters() {
                    let w = gamma.column(c);
                    let row = match fit_cluster(&spec, data[m].view(), w) {
                        Ok(row) if spec.check_params(&row).is_ok() => row,
                        _ => {
                            refit_fallbacks.push(c);
                            continue;
                        }
                    };
                    if learn_variance {
                        if let Ok(v) = fit_cluster_variance(&spec, data[m].view(), w, &row) {
                            vars[c] = v;
                        }
                    }
                    params.theta.row_mut(c).assign(&ndarray::Array1::from(row));
                }
                st.model.set_expert_theta(m, params.theta)?;
                st.model.set_expert_variances(m, &vars)?;
            }
        }

        // (4) Adam over shuffled batches
        let mask = st.model.trainable_mask(cfg.trainability());
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(cfg.seed, "shuffle", epoch as u64));
        let mut noise = seed::rng(cfg.seed, "reparam", epoch as u64);
        let mut loss = 0.0;
        let mut terms = ElboBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            let batch = rows(data, idx);
            let eps = Array2::from_shape_simple_fn((idx.len(), st.model.latent_dim()), || {
                noise.sample::<f64, _>(StandardNormal)
            });
            let g = fixed_gamma.then(|| gamma.select(Axis(0), idx));
            let lg = loss_and_gradients_with_gamma(&st.model, &batch, &eps, &mask, g.as_ref())?;
            if !lg.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            st.adam.step(&mut st.model.params_mut().tensors, &lg.gradients, Some(&mask))?;
            st.model.project_experts();
            loss += lg.loss;
            terms.accumulate(&lg.breakdown);
        }
        if st.model.params().tensors.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        st.epoch += 1;
        Ok(EpochRecord {
            epoch,
            loss: loss / n as f64,
            terms: terms.scaled(1.0 / n as f64),
            occupancy,
            empty_clusters,
            em_quadratic,
            refit_fallbacks,
            anchored: fixed_gamma,
        })
    }

    /// Runs until `config.epochs` epochs are complete.
    pub fn run(&mut self, data: &[Array2<f64>], history: &mut TrainHistory) -> Result<()> {
        while self.state.epoch < self.state.config.epochs {
            let r = self.run_epoch(data)?;
            log::info!("epoch {} loss {:.6}", r.epoch, r.loss);
            history.epochs.push(r);
        }
        Ok(())
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(config: TrainConfig, data: &[Array2<f64>]) -> Result<(TrainState, TrainHistory)> {
    let mut trainer = Trainer::new(config)?;
    let mut history = TrainHistory::default();
    trainer.run(data, &mut history)?;
    Ok((trainer.into_state(), history))
}

pub fn state_to_container(state: &TrainState) -> Result<Container> {
    let meta = serde_json::json!({
        "config": state.config,
        "epoch": state.epoch,
        "seeded": state.seeded,
        "adam_config": state.adam.config,
        "adam_step": state.adam.step,
    });
    let mut c = Container::new(CHECKPOINT_KIND, meta);
    let ps = state.model.params();
    for (name, t) in ps.names.iter().zip(&ps.tensors) {
        c.push(format!("param/{name}"), t.clone());
    }
    for (name, t) in ps.names.iter().zip(&state.adam.first) {
        c.push(format!("adam.first/{name}"), t.clone());
    }
    for (name, t) in ps.names.iter().zip(&state.adam.second) {
        c.push(format!("adam.second/{name}"), t.clone());
    }
    if let Some(a) = &state.anchor {
        c.push("anchor", Array2::from_shape_fn((a.len(), 1), |(i, _)| a[i] as f64));
    }
    Ok(c)
}

pub fn state_from_container(c: &Container) -> Result<TrainState> {
    if c.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} container, found {}", c.kind)));
    }
    let field = |k: &str| {
        c.metadata
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("metadata field {k} is missing")))
    };
    let config: TrainConfig = serde_json::from_value(field("config")?)?;
    let epoch: usize = serde_json::from_value(field("epoch")?)?;
    let seeded: bool = serde_json::from_value(field("seeded")?)?;
    let adam_config: AdamConfig = serde_json::from_value(field("adam_config")?)?;
    let adam_step: u64 = serde_json::from_value(field("adam_step")?)?;

    // Names come from a freshly laid-out model so every slot is required.
    let names = PimaModel::new(config.model.clone(), &mut seed::rng(0, "layout", 0))?
        .params()
        .names
        .clone();
    let mut params = ParamSet::default();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for name in &names {
        params.push(name.clone(), c.get(&format!("param/{name}"))?.clone());
        first.push(c.get(&format!("adam.first/{name}"))?.clone());
        second.push(c.get(&format!("adam.second/{name}"))?.clone());
    }
    for (p, (a, b)) in params.tensors.iter().zip(first.iter().zip(&second)) {
        if p.dim() != a.dim() || p.dim() != b.dim() {
            return Err(Error::Checkpoint("optimizer moments do not match parameter shapes".into()));
        }
    }
    let model = PimaModel::from_params(config.model.clone(), params)?;
    let anchor = match c.get("anchor") {
        Ok(t) => Some(t.iter().map(|&v| v as usize).collect()),
        Err(Error::MissingTensor(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(TrainState {
        config,
        model,
        adam: AdamState {
            config: adam_config,
            step: adam_step,
            first,
            second,
        },
        epoch,
        seeded,
        anchor,
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    state_to_container(state)?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    state_from_container(&Container::load(path)?)
}
