use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use pima::crossmodal::{cross_generate, distill, write_pgm, DistillConfig, DistilledEncoder};
use pima::dataset::{MultimodalDataset, SplitTag};
use pima::exec::Exec;
use pima::experiment::{distilled_gammas, multimodal_gammas, score, train_selected, Scored};
use pima::metrics::unsupervised_accuracy;
use pima::model::PimaModel;
use pima::trainer::{load_checkpoint, save_checkpoint, TrainState};
use pima::verify::{run_verification, Fault, VerifySizes};
use pima::{seed, Error};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{self, Loaded, RunConfig, Selection, Splits};
use crate::error::CliError;

const CHUNK: usize = 1024;

/// Flags shared by the config-driven commands.
pub struct Common {
    pub config: Loaded,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Common {
    fn run_config(&self) -> RunConfig {
        let mut c = self.config.config.clone();
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.out.clone().unwrap_or_else(|| self.config.config.out_dir.clone());
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }

    fn checkpoint(&self, given: Option<&Path>) -> Result<PathBuf, CliError> {
        Ok(match given {
            Some(p) => p.to_path_buf(),
            None => self.out_dir()?.join("best.pima"),
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let to_io = |e: csv::Error| CliError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    w.write_record(header).map_err(to_io)?;
    for row in rows {
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn matrix_rows(m: &Array2<f64>) -> impl Iterator<Item = Vec<String>> + '_ {
    m.rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| std::iter::once(i.to_string()).chain(r.iter().map(|v| v.to_string())).collect())
}

fn columns(prefix: &str, n: usize) -> Vec<String> {
    std::iter::once("record".to_string())
        .chain((0..n).map(|j| format!("{prefix}{j}")))
        .collect()
}

fn unix_seconds(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Wall-clock fields, kept apart so the rest of a metrics file is
/// reproducible.
fn timestamps(started: SystemTime, clock: Instant) -> Value {
    json!({
        "started_unix": unix_seconds(started),
        "finished_unix": unix_seconds(SystemTime::now()),
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
    })
}

fn labels(data: &MultimodalDataset) -> Result<&[usize], CliError> {
    data.eval_labels()
        .map(|l| l.as_slice())
        .ok_or_else(|| CliError::Config("the data carries no labels to score against".into()))
}

fn scored_json(s: &Scored) -> Value {
    json!({
        "accuracy": s.accuracy,
        "band_score": s.band_score,
        "mapping": s.mapping,
    })
}

fn check_model_data(model: &PimaModel, data: &MultimodalDataset) -> Result<(), CliError> {
    model.check_batch(data.features())?;
    Ok(())
}

fn distilled_path(out: &Path, modality: &str) -> PathBuf {
    out.join(format!("distilled-{modality}.pima"))
}

pub fn train(common: &Common) -> Result<(), CliError> {
    let cfg = common.run_config();
    let out = common.out_dir()?;
    let splits = config::load_data(&cfg)?;
    let tc = config::train_config(&cfg, &splits.train)?;
    let exec = tc.exec;
    let validation = match cfg.train.selection {
        Selection::ValidationLoss => splits.val.as_ref().map(|v| v.features()),
        Selection::TrainingLoss => Some(splits.train.features()),
        Selection::Final => None,
    };
    log::info!(
        "training on {} records, selecting on {}",
        splits.train.len(),
        validation.map_or("the final epoch".to_string(), |v| format!("{} records", v[0].nrows()))
    );

    let history_path = out.join("history.jsonl");
    let file = File::create(&history_path).map_err(|e| CliError::io(&history_path, e))?;
    let mut history = BufWriter::new(file);
    let mut write_failure = None;
    let started = SystemTime::now();
    let clock = Instant::now();
    let run = train_selected(tc, splits.train.features(), validation, |entry, _| {
        if write_failure.is_some() {
            return;
        }
        let line = serde_json::to_string(entry).map(|s| s + "\n");
        let res = match line {
            Ok(s) => history.write_all(s.as_bytes()).and_then(|_| history.flush()),
            Err(e) => Err(e.into()),
        };
        write_failure = res.err();
    })?;
    if let Some(e) = write_failure {
        return Err(CliError::io(&history_path, e));
    }

    save_checkpoint(&run.best, out.join("best.pima"))?;
    save_checkpoint(&run.last, out.join("final.pima"))?;

    let mut accuracy = serde_json::Map::new();
    for (tag, data) in [(SplitTag::Train, Some(&splits.train)), (SplitTag::Val, splits.val.as_ref())] {
        if let Some(data) = data.filter(|d| d.eval_labels().is_some()) {
            let g = multimodal_gammas(&run.best.model, data.features(), exec, CHUNK)?;
            let s = score(labels(data)?, &g, cfg.evaluate.band)?;
            accuracy.insert(tag.as_str().into(), json!(s.accuracy));
        }
    }
    let last = run.history.last();
    let metrics = json!({
        "command": "train",
        "seed": cfg.seed,
        "epochs": run.history.len(),
        "records": {
            "train": splits.train.len(),
            "val": splits.val.as_ref().map(|v| v.len()),
        },
        "selection": cfg.train.selection,
        "best_epoch": run.best_epoch,
        "best_validation_loss": run.history.iter().find(|e| e.record.epoch == run.best_epoch).and_then(|e| e.validation_loss),
        "final_loss": last.map(|e| e.record.loss),
        "final_validation_loss": last.and_then(|e| e.validation_loss),
        "selected_model_accuracy": accuracy,
        "timestamps": timestamps(started, clock),
    });
    write_json(&out.join("metrics.json"), &metrics)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn load_state(path: &Path, data: &Splits) -> Result<TrainState, CliError> {
    let state = load_checkpoint(path)?;
    check_model_data(&state.model, &data.train)?;
    Ok(state)
}

pub fn distill_cmd(common: &Common, checkpoint: Option<&Path>, modality: Option<&str>) -> Result<(), CliError> {
    let cfg = common.run_config();
    let out = common.out_dir()?;
    let ckpt = common.checkpoint(checkpoint)?;
    let splits = config::load_data(&cfg)?;
    let state = load_state(&ckpt, &splits)?;
    let model_cfg = state.model.config();
    let targets: Vec<usize> = match modality {
        Some(name) => vec![model_cfg.modality_index(name)?],
        None => (0..model_cfg.modalities.len()).collect(),
    };
    let data = &splits.train;
    let exec = state.config.exec;
    let fused = multimodal_gammas(&state.model, data.features(), exec, CHUNK)?.argmax();
    for m in targets {
        let name = model_cfg.modalities[m].name.clone();
        let mut dc = DistillConfig::new(cfg.distill.epochs, cfg.distill.batch_size, cfg.seed);
        dc.learning_rate = cfg.distill.learning_rate;
        dc.exec = exec;
        let started = SystemTime::now();
        let clock = Instant::now();
        let (enc, report) = distill(&state, data.features(), m, &dc)?;
        enc.save(distilled_path(&out, &name))?;
        let g = distilled_gammas(&enc, &state.model, data.features()[m].view())?;
        let agreement = unsupervised_accuracy(&fused, &g.argmax())?.accuracy;
        let accuracy = match data.eval_labels() {
            Some(l) => Some(score(l.as_slice(), &g, cfg.evaluate.band)?.accuracy),
            None => None,
        };
        let metrics = json!({
            "command": "distill",
            "seed": cfg.seed,
            "checkpoint": ckpt.file_name().map(|f| f.to_string_lossy()),
            "modality": name,
            "epochs": dc.epochs,
            "report": report,
            "train_accuracy": accuracy,
            "train_agreement_with_multimodal": agreement,
            "timestamps": timestamps(started, clock),
        });
        write_json(&out.join(format!("distill-{name}.json")), &metrics)?;
        log::info!("modality {name}: agreement with the fused clusters {agreement:.4}");
    }
    Ok(())
}

pub fn evaluate(
    common: &Common,
    checkpoint: Option<&Path>,
    split: SplitTag,
    modality: Option<&str>,
    distilled: &[PathBuf],
) -> Result<(), CliError> {
    let cfg = common.run_config();
    let out = common.out_dir()?;
    let splits = config::load_data(&cfg)?;
    let state = load_state(&common.checkpoint(checkpoint)?, &splits)?;
    let model = &state.model;
    let data = splits.get(split)?;
    let labels = labels(data)?;
    let dir = out.join(format!("evaluate-{}", split.as_str()));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;

    let g = multimodal_gammas(model, data.features(), state.config.exec, CHUNK)?;
    let multimodal = score(labels, &g, cfg.evaluate.band)?;
    write_text(&dir.join("confusion-multimodal.csv"), &multimodal.confusion_csv())?;

    let only = modality.map(|n| model.config().modality_index(n)).transpose()?;
    let mut encoders = Vec::new();
    for p in distilled {
        encoders.push(DistilledEncoder::load(p)?);
    }
    if distilled.is_empty() {
        for (m, mc) in model.config().modalities.iter().enumerate() {
            let p = distilled_path(&out, &mc.name);
            if only.is_none_or(|o| o == m) && p.exists() {
                encoders.push(DistilledEncoder::load(&p)?);
            }
        }
    }
    let mut cross = serde_json::Map::new();
    for enc in encoders.iter().filter(|e| only.is_none_or(|o| o == e.source_index)) {
        let m = model.config().modality_index(&enc.modality)?;
        let g = distilled_gammas(enc, model, data.features()[m].view())?;
        let s = score(labels, &g, cfg.evaluate.band)?;
        write_text(&dir.join(format!("confusion-{}.csv", enc.modality)), &s.confusion_csv())?;
        log::info!("{} split, {} cross-modal accuracy {:.4}", split.as_str(), enc.modality, s.accuracy);
        cross.insert(enc.modality.clone(), scored_json(&s));
    }
    log::info!("{} split, multimodal accuracy {:.4}", split.as_str(), multimodal.accuracy);
    let metrics = json!({
        "command": "evaluate",
        "split": split,
        "records": data.len(),
        "band": cfg.evaluate.band,
        "multimodal": scored_json(&multimodal),
        "cross_modal": cross,
    });
    write_json(&dir.join("metrics.json"), &metrics)
}

pub fn generate(
    common: &Common,
    checkpoint: Option<&Path>,
    split: SplitTag,
    source: &str,
    target: Option<&str>,
    distilled: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = common.run_config();
    let out = common.out_dir()?;
    let splits = config::load_data(&cfg)?;
    let state = load_state(&common.checkpoint(checkpoint)?, &splits)?;
    let model = &state.model;
    let mc = model.config();
    let src = mc.modality_index(source)?;
    let target_name = match target.or(cfg.generate.target.as_deref()) {
        Some(t) => t.to_string(),
        None if mc.modalities.len() == 2 => mc.modalities[1 - src].name.clone(),
        None => return Err(Error::InvalidArgument("name a target modality".into()).into()),
    };
    let tgt = mc.modality_index(&target_name)?;
    let enc_path = distilled.map(Path::to_path_buf).unwrap_or_else(|| distilled_path(&out, source));
    let encoder = if enc_path.exists() || distilled.is_some() {
        DistilledEncoder::load(&enc_path)?
    } else {
        log::warn!("no distilled encoder at {}, using the model's own encoder", enc_path.display());
        DistilledEncoder::from_model(model, src)?
    };
    if encoder.source_index != src {
        let msg = format!("encoder at {} reads modality {}", enc_path.display(), encoder.modality);
        return Err(Error::InvalidArgument(msg).into());
    }

    let data = splits.get(split)?;
    let n = cfg.generate.records.min(data.len());
    let rows: Vec<usize> = (0..n).collect();
    let x = data.features()[src].select(ndarray::Axis(0), &rows);
    let mut rng = seed::rng(cfg.seed, "generate", 0);
    let gen = cross_generate(&encoder, model, x.view(), tgt, cfg.generate.mode, &mut rng)?;

    let dir = out.join(format!("generate-{source}-to-{target_name}-{}", split.as_str()));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let l = gen.latent.ncols();
    write_csv(&dir.join("latent.csv"), &columns("z", l), matrix_rows(&gen.latent))?;
    write_csv(&dir.join("gamma.csv"), &columns("c", gen.gamma.ncols()), matrix_rows(&gen.gamma))?;
    let target_data = &data.modalities()[tgt];
    match (&mc.modalities[tgt].expert(), &target_data.t_grid) {
        (Some(_), Some(t)) => {
            let map = target_data.normalization;
            let header = ["record", "cluster", "t", "value"].map(String::from);
            let rows = gen.output.rows().into_iter().enumerate().flat_map(|(i, r)| {
                let c = gen.clusters[i];
                r.iter()
                    .zip(t)
                    .map(move |(v, tk)| vec![i.to_string(), c.to_string(), tk.to_string(), map.invert(*v).to_string()])
                    .collect::<Vec<_>>()
            });
            write_csv(&dir.join("curves.csv"), &header, rows)?;
        }
        _ => {
            let width = gen.output.ncols();
            let side = (width as f64).sqrt().round() as usize;
            if side * side == width {
                for (i, r) in gen.output.rows().into_iter().enumerate() {
                    let values: Vec<f64> = r.to_vec();
                    write_pgm(dir.join(format!("image-{i:04}.pgm")), &values, side, side)?;
                }
            } else {
                write_csv(&dir.join("outputs.csv"), &columns("x", width), matrix_rows(&gen.output))?;
            }
        }
    }
    let summary = json!({
        "command": "generate",
        "seed": cfg.seed,
        "split": split,
        "source": source,
        "target": target_name,
        "mode": cfg.generate.mode,
        "records": n,
        "clusters": gen.clusters,
    });
    write_json(&dir.join("generate.json"), &summary)?;
    log::info!("wrote {}", dir.display());
    Ok(())
}

pub fn verify(seed: u64, sizes: VerifySizes, fault: Fault, out: Option<&Path>) -> Result<(), CliError> {
    let report = run_verification(seed, &sizes, fault, Exec::Parallel)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            write_json(&dir.join("verify.json"), &report)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
