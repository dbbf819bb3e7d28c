//! End-to-end pieces shared by the command line and the acceptance runs:
//! validation-selected training and accuracy scoring.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::crossmodal::{infer_cluster, DistilledEncoder};
use crate::dataset::AffineMap;
use crate::elbo::{evaluate_dataset, fused_means, responsibilities};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::expert::ExpertKind;
use crate::metrics::{band_score, matrix_csv, unsupervised_accuracy, Band};
use crate::model::PimaModel;
use crate::prior::Responsibilities;
use crate::seed;
use crate::trainer::{EpochRecord, TrainConfig, TrainState, Trainer};

/// Accuracy of hard cluster assignments against labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub accuracy: f64,
    /// Banding of the misclassified mass in the label-ordered confusion
    /// matrix.
    pub band_score: f64,
    /// Rows are true labels, columns mapped cluster labels. Records in
    /// clusters left without a label are not counted.
    pub confusion: Array2<u64>,
    pub mapping: Vec<Option<usize>>,
}

impl Scored {
    pub fn confusion_csv(&self) -> String {
        matrix_csv(&self.confusion)
    }
}

pub fn score(labels: &[usize], gammas: &Responsibilities, band: Band) -> Result<Scored> {
    let r = unsupervised_accuracy(labels, &gammas.argmax())?;
    let confusion = r.mapped_confusion();
    Ok(Scored {
        accuracy: r.accuracy,
        band_score: band_score(&confusion, band)?,
        confusion,
        mapping: r.mapping,
    })
}

/// γ at the fused posterior mean.
pub fn multimodal_gammas(model: &PimaModel, data: &[Array2<f64>], exec: Exec, chunk: usize) -> Result<Responsibilities> {
    let mu = fused_means(model, data, exec, chunk)?;
    Responsibilities::new(responsibilities(model, mu.view(), exec, chunk)?)
}

/// γ from a single modality through a distilled encoder.
pub fn distilled_gammas(encoder: &DistilledEncoder, model: &PimaModel, x: ArrayView2<f64>) -> Result<Responsibilities> {
    if encoder.latent_dim() != model.latent_dim() {
        return Err(Error::DimensionMismatch {
            context: "encoder latent dimension",
            expected: model.latent_dim(),
            got: encoder.latent_dim(),
        });
    }
    Responsibilities::new(infer_cluster(encoder, &model.prior(), x)?)
}

/// Mean per-record negative ELBO with noise fixed by `seed`.
pub fn validation_loss(model: &PimaModel, data: &[Array2<f64>], seed: u64, exec: Exec) -> Result<f64> {
    let rows = evaluate_dataset(model, data, seed, exec, 512)?;
    let total: f64 = rows.iter().map(|r| r.total).sum();
    Ok(-total / rows.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedEpoch {
    #[serde(flatten)]
    pub record: EpochRecord,
    pub validation_loss: Option<f64>,
}

pub struct SelectedRun {
    pub best: TrainState,
    pub best_epoch: usize,
    pub last: TrainState,
    pub history: Vec<SelectedEpoch>,
}

/// Trains for `config.epochs` epochs, keeping the state with the lowest
/// validation loss. Without validation data the last state is the best.
/// `on_epoch` sees each finished epoch.
pub fn train_selected(
    config: TrainConfig,
    train: &[Array2<f64>],
    validation: Option<&[Array2<f64>]>,
    mut on_epoch: impl FnMut(&SelectedEpoch, &TrainState),
) -> Result<SelectedRun> {
    let val_seed = seed::substream(config.seed, "validation", 0);
    let exec = config.exec;
    let mut trainer = Trainer::new(config)?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, TrainState)> = None;
    while trainer.state().epoch < trainer.state().config.epochs {
        let record = trainer.run_epoch(train)?;
        let validation_loss = validation
            .map(|v| validation_loss(&trainer.state().model, v, val_seed, exec))
            .transpose()?;
        let entry = SelectedEpoch { record, validation_loss };
        log::info!(
            "epoch {} loss {:.6} validation {}",
            entry.record.epoch,
            entry.record.loss,
            validation_loss.map_or("-".into(), |v| format!("{v:.6}"))
        );
        on_epoch(&entry, trainer.state());
        let key = validation_loss.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| key <= *b) {
            best = Some((key, entry.record.epoch, trainer.state().clone()));
        }
        history.push(entry);
    }
    let last = trainer.into_state();
    let (_, best_epoch, best) = best.unwrap_or_else(|| (0.0, last.epoch, last.clone()));
    Ok(SelectedRun {
        best,
        best_epoch,
        last,
        history,
    })
}

/// Fitted expert parameters of modality `m` mapped back to raw data units.
/// Slopes scale with the normalization; breakpoints on the grid do not.
pub fn raw_expert_params(model: &PimaModel, m: usize, map: &AffineMap) -> Result<Array2<f64>> {
    let params = model
        .expert_params(m)
        .ok_or_else(|| Error::invalid(format!("modality {m} has no expert decoder")))?;
    let mut theta = params.theta.clone();
    let slopes: &[usize] = match params.kind {
        ExpertKind::Affine => &[0],
        ExpertKind::StrainHardening => &[0, 2],
    };
    for &k in slopes {
        theta.column_mut(k).mapv_inplace(|v| v * map.scale);
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_assignments_score_one() {
        let g = Responsibilities::one_hot(&[2, 0, 1, 1], 3).unwrap();
        let s = score(&[0, 1, 2, 2], &g, Band::Linear).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.band_score, 1.0);
        assert_eq!(s.confusion, array![[1, 0, 0], [0, 1, 0], [0, 0, 2]]);
    }

    #[test]
    fn surplus_clusters_drop_out_of_the_confusion() {
        let g = Responsibilities::one_hot(&[0, 1, 2, 3], 4).unwrap();
        let s = score(&[0, 0, 1, 1], &g, Band::Linear).unwrap();
        assert_eq!(s.accuracy, 0.5);
        assert_eq!(s.confusion.sum(), 2);
    }
}
