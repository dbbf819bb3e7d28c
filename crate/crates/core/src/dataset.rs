//! Multimodal datasets: IDX parsing, synthetic modalities, the lattice-style
//! benchmark, normalization and seeded splits.
//!
//! Ground-truth labels live in [`EvalLabels`], which training code never
//! receives: trainers take `&[Array2<f64>]` feature blocks only.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{check_dim, Error, Result};
use crate::expert::{evaluate_at, ExpertKind};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// `normalized = (raw − offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub offset: f64,
    pub scale: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        offset: 0.0,
        scale: 1.0,
    };

    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.scale
    }

    pub fn invert(&self, normalized: f64) -> f64 {
        normalized * self.scale + self.offset
    }

    /// Global min-max map onto `[0, 1]`.
    pub fn min_max(x: &Array2<f64>) -> Self {
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { hi - lo } else { 1.0 };
        AffineMap { offset: lo, scale }
    }

    /// Scale-only map dividing by the largest magnitude. Keeps zero at zero,
    /// which the origin-anchored expert models rely on.
    pub fn max_abs(x: &Array2<f64>) -> Self {
        let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        AffineMap {
            offset: 0.0,
            scale: if m > 0.0 { m } else { 1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityData {
    pub name: String,
    /// N×dim, normalized.
    pub values: Array2<f64>,
    /// Independent-variable grid for scientific modalities.
    pub t_grid: Option<Vec<f64>>,
    pub normalization: AffineMap,
}

/// Ground-truth class labels, kept apart from the features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalLabels(Vec<usize>);

impl EvalLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ORDER: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            _ => Err(Error::invalid(format!("unknown split {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    modalities: Vec<ModalityData>,
    features: Vec<Array2<f64>>,
    labels: Option<EvalLabels>,
    tags: Option<Vec<SplitTag>>,
    /// Generator notes (class parameters, separation audit, ...).
    pub metadata: serde_json::Value,
}

impl MultimodalDataset {
    pub fn new(modalities: Vec<ModalityData>, labels: Option<Vec<usize>>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::Empty("dataset modalities"));
        }
        let n = modalities[0].values.nrows();
        for m in &modalities {
            check_dim("modality record count", n, m.values.nrows())?;
            if let Some(t) = &m.t_grid {
                check_dim("t_grid length", m.values.ncols(), t.len())?;
            }
        }
        if let Some(l) = &labels {
            check_dim("label count", n, l.len())?;
        }
        let features = modalities.iter().map(|m| m.values.clone()).collect();
        Ok(Self {
            modalities,
            features,
            labels: labels.map(EvalLabels),
            tags: None,
            metadata: serde_json::Value::Null,
        })
    }

    pub fn len(&self) -> usize {
        self.features[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature blocks in modality order; this is all training sees.
    pub fn features(&self) -> &[Array2<f64>] {
        &self.features
    }

    pub fn modalities(&self) -> &[ModalityData] {
        &self.modalities
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::invalid(format!("dataset has no modality {name}")))
    }

    pub fn eval_labels(&self) -> Option<&EvalLabels> {
        self.labels.as_ref()
    }

    pub fn tags(&self) -> Option<&[SplitTag]> {
        self.tags.as_deref()
    }

    /// Records at `indices`, in that order, with labels and tags carried
    /// along.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("record {bad} out of range")));
        }
        let modalities = self
            .modalities
            .iter()
            .map(|m| ModalityData {
                values: m.values.select(Axis(0), indices),
                ..m.clone()
            })
            .collect();
        let mut out = Self::new(
            modalities,
            self.labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l.0[i]).collect()),
        )?;
        out.tags = self
            .tags
            .as_ref()
            .map(|t| indices.iter().map(|&i| t[i]).collect());
        out.metadata = self.metadata.clone();
        Ok(out)
    }

    /// Seeded partition into train/val/test by `fractions` (one to three
    /// entries in that order). Counts are rounded and the last split takes
    /// the remainder.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Self> {
        if fractions.is_empty() || fractions.len() > 3 {
            return Err(Error::invalid("split takes one to three fractions"));
        }
        if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must be non-negative and sum to 1"));
        }
        let n = self.len();
        let mut counts: Vec<usize> = fractions.iter().map(|f| (f * n as f64).round() as usize).collect();
        let head: usize = counts[..counts.len() - 1].iter().sum();
        if head > n {
            return Err(Error::invalid("split fractions exceed the record count"));
        }
        *counts.last_mut().expect("non-empty") = n - head;
        if counts.contains(&0) {
            return Err(Error::Empty("split"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut tags = vec![SplitTag::Train; n];
        let mut pos = 0;
        for (k, &count) in counts.iter().enumerate() {
            for &i in &order[pos..pos + count] {
                tags[i] = SplitTag::ORDER[k];
            }
            pos += count;
        }
        let mut out = self.clone();
        out.tags = Some(tags);
        Ok(out)
    }

    /// Records tagged `tag`, in original order.
    pub fn part(&self, tag: SplitTag) -> Result<Self> {
        let tags = self
            .tags
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset has not been split"))?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| tags[i] == tag).collect();
        if idx.is_empty() {
            return Err(Error::Empty("split part"));
        }
        self.select(&idx)
    }

    /// Serializes features, labels, tags and maps into a [`Container`].
    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "schema_version": DATASET_SCHEMA_VERSION,
            "modalities": self.modalities.iter().map(|m| serde_json::json!({
                "name": m.name,
                "t_grid": m.t_grid,
                "normalization": m.normalization,
            })).collect::<Vec<_>>(),
            "tags": self.tags,
            "has_labels": self.labels.is_some(),
            "generator": self.metadata,
        });
        let mut c = Container::new("dataset", meta);
        for m in &self.modalities {
            c.push(format!("modality.{}", m.name), m.values.clone());
        }
        if let Some(l) = &self.labels {
            c.push(
                "eval.labels",
                Array2::from_shape_fn((l.len(), 1), |(i, _)| l.0[i] as f64),
            );
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "dataset" {
            return Err(Error::Checkpoint(format!("expected a dataset, found {}", c.kind)));
        }
        let version = c.metadata["schema_version"].as_u64().unwrap_or(0) as u32;
        if version != DATASET_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DATASET_SCHEMA_VERSION,
            });
        }
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            t_grid: Option<Vec<f64>>,
            normalization: AffineMap,
        }
        let entries: Vec<Entry> = serde_json::from_value(c.metadata["modalities"].clone())?;
        let modalities = entries
            .into_iter()
            .map(|e| {
                Ok(ModalityData {
                    values: c.get(&format!("modality.{}", e.name))?.clone(),
                    name: e.name,
                    t_grid: e.t_grid,
                    normalization: e.normalization,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = if c.metadata["has_labels"].as_bool().unwrap_or(false) {
            Some(c.get("eval.labels")?.iter().map(|v| *v as usize).collect())
        } else {
            None
        };
        let mut out = Self::new(modalities, labels)?;
        out.tags = serde_json::from_value(c.metadata["tags"].clone())?;
        out.metadata = c.metadata["generator"].clone();
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// `t,value` rows for one curve.
pub fn curve_csv(t: &[f64], values: &[f64]) -> String {
    let mut out = String::from("t,value\n");
    for (a, b) in t.iter().zip(values) {
        out.push_str(&format!("{a},{b}\n"));
    }
    out
}

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Images scaled to `[0, 1]`, one flattened row each, with their rows and
/// columns.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub images: Array2<f64>,
    pub rows: usize,
    pub cols: usize,
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    if bytes.len() < 16 {
        return Err(idx_err(path, "header is truncated"));
    }
    let magic = read_u32(bytes, 0);
    if magic != 0x0000_0803 {
        return Err(idx_err(path, format!("bad image magic {magic:#010x}")));
    }
    let (n, rows, cols) = (
        read_u32(bytes, 4) as usize,
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
    );
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| idx_err(path, "dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(idx_err(
            path,
            format!("header declares {need} pixels but only {} are present", payload.len()),
        ));
    }
    let images = Array2::from_shape_fn((n, rows * cols), |(i, j)| {
        payload[i * rows * cols + j] as f64 / 255.0
    });
    Ok(IdxImages { images, rows, cols })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 8 {
        return Err(idx_err(path, "header is truncated"));
    }
    let magic = read_u32(bytes, 0);
    if magic != 0x0000_0801 {
        return Err(idx_err(path, format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4) as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(idx_err(
            path,
            format!("header declares {n} labels but only {} are present", payload.len()),
        ));
    }
    Ok(payload[..n].iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image file and its label file.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<(IdxImages, Vec<usize>)> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lb = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let images = parse_idx_images(&ib, ip)?;
    let labels = parse_idx_labels(&lb, lp)?;
    if images.images.nrows() != labels.len() {
        return Err(idx_err(
            lp,
            format!("{} labels for {} images", labels.len(), images.images.nrows()),
        ));
    }
    Ok((images, labels))
}

/// Evenly spaced grid on `[0, 1]`.
pub fn unit_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Raw synthetic curves `X[d, n] = label_d · t_n + ε` with per-point noise,
/// before normalization.
pub fn synth_modality2_raw<R: Rng + ?Sized>(
    labels: &[usize],
    noise_var: f64,
    n_points: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if !(noise_var >= 0.0) {
        return Err(Error::invalid("noise variance must be non-negative"));
    }
    if n_points < 2 {
        return Err(Error::invalid("at least two points per curve"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::invalid(format!("label {bad} outside 0..=9")));
    }
    let t = unit_grid(n_points);
    let noise = Normal::new(0.0, noise_var.sqrt()).expect("finite sd");
    Ok(Array2::from_shape_fn((labels.len(), n_points), |(d, n)| {
        labels[d] as f64 * t[n] + noise.sample(rng)
    }))
}

/// Synthetic scientific modality for labelled data, normalized by its
/// largest magnitude.
pub fn synth_modality2<R: Rng + ?Sized>(
    labels: &[usize],
    noise_var: f64,
    n_points: usize,
    rng: &mut R,
) -> Result<ModalityData> {
    let raw = synth_modality2_raw(labels, noise_var, n_points, rng)?;
    let map = AffineMap::max_abs(&raw);
    Ok(ModalityData {
        name: "signal".into(),
        values: raw.mapv(|v| map.apply(v)),
        t_grid: Some(unit_grid(n_points)),
        normalization: map,
    })
}

/// Multimodal MNIST: raw images plus the synthetic signal.
pub fn multimodal_mnist<R: Rng + ?Sized>(
    images: &IdxImages,
    labels: &[usize],
    noise_var: f64,
    n_points: usize,
    rng: &mut R,
) -> Result<MultimodalDataset> {
    let image = ModalityData {
        name: "image".into(),
        values: images.images.clone(),
        t_grid: None,
        normalization: AffineMap {
            offset: 0.0,
            scale: 255.0,
        },
    };
    let signal = synth_modality2(labels, noise_var, n_points, rng)?;
    MultimodalDataset::new(vec![image, signal], Some(labels.to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub n_per_class: usize,
    /// `(E_e, t_y, E_p)` per class in raw units.
    pub class_params: [[f64; 3]; 2],
    pub curve_points: usize,
    pub curve_noise_sd: f64,
    /// Relative per-record jitter of the class parameters.
    pub param_jitter: f64,
    pub image_side: usize,
    /// Phase/amplitude jitter of the textures, 0 disables it.
    pub texture_jitter: f64,
    pub image_noise_sd: f64,
    pub random_flips: bool,
    pub quadrant_crops: bool,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            n_per_class: 46,
            class_params: [[10.0, 0.3, 1.0], [6.0, 0.55, 2.5]],
            curve_points: 100,
            curve_noise_sd: 0.05,
            param_jitter: 0.02,
            image_side: 32,
            texture_jitter: 1.0,
            image_noise_sd: 0.05,
            random_flips: false,
            quadrant_crops: false,
        }
    }
}

fn texture(class: usize, side: usize, phase: f64, amp: f64, x: usize, y: usize) -> f64 {
    let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
    let tau = std::f64::consts::TAU;
    let pattern = match class {
        0 => (tau * 3.0 * v + phase).sin(),
        _ => (tau * 4.0 * u + phase).sin() * (tau * 4.0 * v + phase).sin(),
    };
    0.5 + 0.45 * amp * pattern
}

/// Two-class surrogate for the lattice experiment: strain-hardening curves
/// paired with procedural textures.
pub fn synth_lattice_benchmark<R: Rng + ?Sized>(
    config: &LatticeConfig,
    rng: &mut R,
) -> Result<MultimodalDataset> {
    if config.n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let side = config.image_side;
    let t = unit_grid(config.curve_points);
    let n = 2 * config.n_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let curve_noise = Normal::new(0.0, config.curve_noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let pixel_noise = Normal::new(0.0, config.image_noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let mut curves = Array2::zeros((n, t.len()));
    let mut images = Array2::zeros((n, side * side));
    for (d, &class) in labels.iter().enumerate() {
        let base = config.class_params[class];
        let mut p = base;
        for k in [0, 2] {
            p[k] = base[k] * (1.0 + config.param_jitter * rng.random_range(-1.0..1.0));
        }
        p[1] = base[1] * (1.0 + config.param_jitter * rng.random_range(-1.0..1.0));
        let e = evaluate_at(ExpertKind::StrainHardening, &p, &t);
        for (k, v) in e.iter().enumerate() {
            curves[[d, k]] = v + curve_noise.sample(rng);
        }
        let phase = config.texture_jitter * rng.random_range(0.0..std::f64::consts::TAU);
        let amp = 1.0 - 0.3 * config.texture_jitter * rng.random::<f64>();
        let mut img = Array2::from_shape_fn((side, side), |(y, x)| {
            texture(class, side, phase, amp, x, y) + pixel_noise.sample(rng)
        });
        if config.random_flips {
            if rng.random::<bool>() {
                img.invert_axis(Axis(0));
            }
            if rng.random::<bool>() {
                img.invert_axis(Axis(1));
            }
        }
        if config.quadrant_crops {
            let (qy, qx) = (rng.random_range(0..2) * side / 2, rng.random_range(0..2) * side / 2);
            let crop = img.slice(s![qy..qy + side / 2, qx..qx + side / 2]).to_owned();
            img = Array2::from_shape_fn((side, side), |(y, x)| crop[[y / 2, x / 2]]);
        }
        images
            .row_mut(d)
            .assign(&Array1::from_iter(img.iter().map(|v| v.clamp(0.0, 1.0))));
    }
    let audit = separation_audit(&curves, &labels);
    let map = AffineMap::max_abs(&curves);
    let curves = curves.mapv(|v| map.apply(v));
    let mut ds = MultimodalDataset::new(
        vec![
            ModalityData {
                name: "image".into(),
                values: images,
                t_grid: None,
                normalization: AffineMap::IDENTITY,
            },
            ModalityData {
                name: "curve".into(),
                values: curves,
                t_grid: Some(t),
                normalization: map,
            },
        ],
        Some(labels),
    )?;
    ds.metadata = serde_json::json!({
        "generator": "lattice_surrogate",
        "config": config,
        "separation_ratio": audit,
    });
    Ok(ds)
}

/// Mean within-class per-point variance over the mean squared gap between
/// class-mean curves.
pub fn separation_audit(curves: &Array2<f64>, labels: &[usize]) -> f64 {
    let class_rows = |c: usize| -> Vec<usize> { (0..labels.len()).filter(|&i| labels[i] == c).collect() };
    let (a, b) = (class_rows(0), class_rows(1));
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let ma = curves.select(Axis(0), &a).mean_axis(Axis(0)).expect("rows");
    let mb = curves.select(Axis(0), &b).mean_axis(Axis(0)).expect("rows");
    let gap = (&ma - &mb).mapv(|v| v * v).mean().expect("points");
    let within = |rows: &[usize], m: &Array1<f64>| -> f64 {
        rows.iter()
            .map(|&i| (&curves.row(i) - m).mapv(|v| v * v).mean().expect("points"))
            .sum::<f64>()
            / rows.len() as f64
    };
    0.5 * (within(&a, &ma) + within(&b, &mb)) / gap
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = vec![];
        for v in [0x803u32, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn idx_single_zero_image() {
        let b = idx_images(1, 2, 2, &[0, 0, 0, 0]);
        let img = parse_idx_images(&b, Path::new("mem")).unwrap();
        assert_eq!(img.images, Array2::<f64>::zeros((1, 4)));
        assert_eq!((img.rows, img.cols), (2, 2));
    }

    #[test]
    fn idx_errors() {
        let p = Path::new("mem");
        assert!(matches!(parse_idx_images(&idx_images(3, 2, 2, &[0; 8]), p), Err(Error::Idx { .. })));
        let mut bad = idx_images(1, 1, 1, &[255]);
        bad[3] = 0x01;
        assert!(parse_idx_images(&bad, p).is_err());
        let mut lab = vec![];
        lab.extend_from_slice(&0x801u32.to_be_bytes());
        lab.extend_from_slice(&5u32.to_be_bytes());
        lab.extend_from_slice(&[1, 2]);
        assert!(parse_idx_labels(&lab, p).is_err());
        lab.extend_from_slice(&[3, 4, 5]);
        assert_eq!(parse_idx_labels(&lab, p).unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_idx_images(&idx_images(1, 1, 1, &[255]), p).unwrap().images[[0, 0]], 1.0);
    }

    #[test]
    fn modality2_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raw = synth_modality2_raw(&[0, 9], 0.0, 20, &mut rng).unwrap();
        assert!(raw.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(raw[[1, 19]], 9.0);
        assert!(synth_modality2_raw(&[10], 0.0, 20, &mut rng).is_err());
        assert!(synth_modality2_raw(&[1], -1.0, 20, &mut rng).is_err());
        let m = synth_modality2(&[0, 9], 0.0, 20, &mut rng).unwrap();
        assert_eq!(m.values[[1, 19]], 1.0);
        assert_eq!(m.normalization.invert(m.values[[1, 10]]), raw[[1, 10]]);
    }

    #[test]
    fn split_counts_and_determinism() {
        let m = ModalityData {
            name: "x".into(),
            values: Array2::from_shape_fn((60_000, 1), |(i, _)| i as f64),
            t_grid: None,
            normalization: AffineMap::IDENTITY,
        };
        let ds = MultimodalDataset::new(vec![m], Some((0..60_000).collect())).unwrap();
        let s = ds.split(&[0.9, 0.1], 1).unwrap();
        assert_eq!(s.part(SplitTag::Train).unwrap().len(), 54_000);
        let val = s.part(SplitTag::Val).unwrap();
        assert_eq!(val.len(), 6_000);
        // alignment: feature fingerprint equals the label
        for (x, l) in val.features()[0].column(0).iter().zip(val.eval_labels().unwrap().as_slice()) {
            assert_eq!(*x as usize, *l);
        }
        assert_eq!(s, ds.split(&[0.9, 0.1], 1).unwrap());
        assert_ne!(s.tags(), ds.split(&[0.9, 0.1], 2).unwrap().tags());
        assert_eq!(ds.split(&[1.0], 0).unwrap().part(SplitTag::Train).unwrap().len(), 60_000);
        assert!(ds.select(&[0]).unwrap().split(&[0.5, 0.5], 0).is_err());
    }

    #[test]
    fn lattice_without_noise_repeats_records() {
        let cfg = LatticeConfig {
            n_per_class: 2,
            curve_noise_sd: 0.0,
            param_jitter: 0.0,
            texture_jitter: 0.0,
            image_noise_sd: 0.0,
            ..LatticeConfig::default()
        };
        let ds = synth_lattice_benchmark(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = ds.features();
        for m in 0..2 {
            assert_eq!(f[m].row(0), f[m].row(2));
            assert_eq!(f[m].row(1), f[m].row(3));
            assert_ne!(f[m].row(0), f[m].row(1));
        }
    }

    #[test]
    fn lattice_default_scale_and_separation() {
        let ds = synth_lattice_benchmark(&LatticeConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ds.len(), 92);
        assert!(ds.metadata["separation_ratio"].as_f64().unwrap() < 0.1);
    }

    #[test]
    fn container_round_trip_keeps_everything() {
        let ds = synth_lattice_benchmark(
            &LatticeConfig {
                n_per_class: 3,
                ..LatticeConfig::default()
            },
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap()
        .split(&[0.5, 0.5], 4)
        .unwrap();
        let back = MultimodalDataset::from_container(&ds.to_container().unwrap()).unwrap();
        assert_eq!(back, ds);
    }
}
