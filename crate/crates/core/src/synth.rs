//! Deterministic synthetic multi-label spectrogram corpus with a
//! controllable train/test distribution shift.
//!
//! Each class is an oriented chirp ridge: a Gaussian-profile line in the
//! time-frequency plane whose base row and slope are class-specific. An
//! instance superposes one to three class patterns on background noise and
//! carries the matching multi-hot label. The test split can be shifted:
//! louder noise, per-instance jitter of the pattern rows, and a swap from
//! white to spatially correlated background texture. Everything is a pure
//! function of the config and seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corpus import: {0}")]
    Import(String),
}

/// Test-split shift knobs. Neutral values (1.0, 0.0, false) make train and
/// test identically distributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    /// Multiplies the background noise level on the test split.
    pub noise_multiplier: f64,
    /// Std (rows) of per-instance jitter on pattern base rows, test only.
    pub frequency_jitter: f64,
    /// Swap white background noise for correlated texture on the test split.
    pub swap_background: bool,
}

impl ShiftConfig {
    pub fn neutral() -> Self {
        Self {
            noise_multiplier: 1.0,
            frequency_jitter: 0.0,
            swap_background: false,
        }
    }
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            noise_multiplier: 2.0,
            frequency_jitter: 1.5,
            swap_background: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub probability: f64,
    /// 2 or 3 components.
    pub max_components: usize,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            probability: 0.8,
            max_components: 3,
        }
    }
}

/// Z-score constants applied to every generated instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    pub mean: f64,
    pub std: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        // Centers the raw signal and scales it so the evaluation epsilon
        // grid spans negligible (0.001) to pattern-erasing (0.2)
        // perturbations relative to the ridge amplitude.
        Self { mean: 0.2, std: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_classes: usize,
    pub train_instances: usize,
    pub val_instances: usize,
    pub test_instances: usize,
    /// (h, w, c); c must be 1.
    pub input_shape: (usize, usize, usize),
    pub shift: ShiftConfig,
    pub mixup: MixupConfig,
    pub nocall_probability: f64,
    pub normalization: NormalizationConfig,
    /// Background noise level on the train split.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            train_instances: 600,
            val_instances: 150,
            test_instances: 300,
            input_shape: (32, 64, 1),
            shift: ShiftConfig::default(),
            mixup: MixupConfig::default(),
            nocall_probability: 0.075,
            normalization: NormalizationConfig::default(),
            noise_std: 0.30,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let (h, w, c) = self.input_shape;
        if c != 1 {
            return Err(DataError::InvalidConfig("channel count must be 1".into()));
        }
        if self.num_classes == 0 {
            return Err(DataError::InvalidConfig("num_classes must be >= 1".into()));
        }
        if h < 2 * self.num_classes || w < 8 {
            return Err(DataError::InvalidConfig(format!(
                "input {h}x{w} too small to place {} class patterns",
                self.num_classes
            )));
        }
        for (name, n) in [
            ("train", self.train_instances),
            ("val", self.val_instances),
            ("test", self.test_instances),
        ] {
            if n < self.num_classes {
                return Err(DataError::InvalidConfig(format!(
                    "{name} split of {n} cannot cover {} classes",
                    self.num_classes
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.mixup.probability)
            || !(0.0..=1.0).contains(&self.nocall_probability)
        {
            return Err(DataError::InvalidConfig("probabilities must be in [0,1]".into()));
        }
        if !(2..=3).contains(&self.mixup.max_components) {
            return Err(DataError::InvalidConfig(
                "mixup.max_components must be 2 or 3".into(),
            ));
        }
        if !(self.normalization.std > 0.0) {
            return Err(DataError::InvalidConfig("normalization std must be > 0".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(DataError::InvalidConfig("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Base row and slope (rows per column) of a class ridge.
    fn pattern_geometry(&self, class: usize) -> (f64, f64) {
        let (h, _, _) = self.input_shape;
        let k = self.num_classes as f64;
        let unit = (class as f64 + 0.5) / k - 0.5;
        let base_row = h as f64 * (class as f64 + 0.5) / k;
        let slope = 0.5 * unit;
        (base_row, slope)
    }
}

/// One labeled instance: standardized input tensor plus multi-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramInstance {
    pub id: String,
    pub input: Tensor,
    pub labels: Vec<f64>,
    /// Generator bookkeeping: (class, amplitude, row jitter) per component.
    pub components: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub train: Vec<SpectrogramInstance>,
    pub val: Vec<SpectrogramInstance>,
    pub test: Vec<SpectrogramInstance>,
    pub config: CorpusConfig,
}

impl LabeledCorpus {
    pub fn split(&self, split: Split) -> &[SpectrogramInstance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// (x - mean) / std elementwise.
pub fn standardize(x: &Tensor, norm: &NormalizationConfig) -> Tensor {
    let mean = norm.mean;
    let inv = 1.0 / norm.std;
    x.map(|v| (v - mean) * inv)
}

fn white_background(cfg: &CorpusConfig, rng: &mut Rng, level: f64) -> Vec<f64> {
    let (h, w, _) = cfg.input_shape;
    (0..h * w).map(|_| rng.normal() * level).collect()
}

/// Spatially correlated background: coarse normal grid, bilinear upsampled,
/// rescaled to the requested level.
fn textured_background(cfg: &CorpusConfig, rng: &mut Rng, level: f64) -> Vec<f64> {
    let (h, w, _) = cfg.input_shape;
    let gh = (h / 4).max(2);
    let gw = (w / 4).max(2);
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.normal()).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let fr = r as f64 * (gh - 1) as f64 / (h - 1) as f64;
            let fc = c as f64 * (gw - 1) as f64 / (w - 1) as f64;
            let (r0, c0) = (fr.floor() as usize, fc.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(gh - 1), (c0 + 1).min(gw - 1));
            let (tr, tc) = (fr - r0 as f64, fc - c0 as f64);
            let top = grid[r0 * gw + c0] * (1.0 - tc) + grid[r0 * gw + c1] * tc;
            let bottom = grid[r1 * gw + c0] * (1.0 - tc) + grid[r1 * gw + c1] * tc;
            out[r * w + c] = top * (1.0 - tr) + bottom * tr;
        }
    }
    // Interpolation shrinks variance; rescale to the target level.
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / out.len() as f64;
    let scale = if var > 0.0 { level / var.sqrt() } else { 0.0 };
    for v in &mut out {
        *v = (*v - mean) * scale;
    }
    out
}

fn background_for(cfg: &CorpusConfig, split: Split, rng: &mut Rng) -> Vec<f64> {
    let shifted = split == Split::Test;
    let level = if shifted {
        cfg.noise_std * cfg.shift.noise_multiplier
    } else {
        cfg.noise_std
    };
    if shifted && cfg.shift.swap_background {
        textured_background(cfg, rng, level)
    } else {
        white_background(cfg, rng, level)
    }
}

/// Smooth per-column frequency wiggle: a few random sinusoids over the time
/// axis, unit variance in expectation.
fn wiggle_profile(width: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out = vec![0.0; width];
    let harmonics = 3;
    for k in 1..=harmonics {
        let amp = rng.normal() / (harmonics as f64).sqrt();
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        for (col, v) in out.iter_mut().enumerate() {
            let t = col as f64 / width as f64;
            *v += amp * (std::f64::consts::TAU * k as f64 * t + phase).sin();
        }
    }
    out
}

fn add_ridge(
    cfg: &CorpusConfig,
    canvas: &mut [f64],
    class: usize,
    amp: f64,
    jitter: f64,
    wiggle: Option<&[f64]>,
) {
    let (h, w, _) = cfg.input_shape;
    let (base_row, slope) = cfg.pattern_geometry(class);
    let sigma = 2.2;
    let denom = 2.0 * sigma * sigma;
    for col in 0..w {
        let bend = wiggle.map_or(0.0, |prof| prof[col]);
        let center = base_row + jitter + bend + slope * (col as f64 - w as f64 / 2.0);
        for row in 0..h {
            let dist = row as f64 - center;
            let g = (-dist * dist / denom).exp();
            if g > 1e-6 {
                canvas[row * w + col] += amp * g;
            }
        }
    }
}

fn generate_instance(
    cfg: &CorpusConfig,
    split: Split,
    index: usize,
) -> Result<SpectrogramInstance, DataError> {
    let (h, w, _) = cfg.input_shape;
    let mut rng = Rng::derive(cfg.seed, &[split.index(), index as u64]);
    let mut canvas = background_for(cfg, split, &mut rng);

    let k = cfg.num_classes;
    let n_components = 1 + rng.below(3).min(k - 1).min(2);
    // Round-robin first class guarantees every class appears in each split.
    let mut classes = vec![index % k];
    while classes.len() < n_components {
        let candidate = rng.below(k);
        if !classes.contains(&candidate) {
            classes.push(candidate);
        }
    }
    let jitter_std = if split == Split::Test {
        cfg.shift.frequency_jitter
    } else {
        0.0
    };
    let mut labels = vec![0.0; k];
    let mut components = Vec::with_capacity(classes.len());
    for &class in &classes {
        let amp = rng.uniform(0.8, 1.2);
        // The test-split frequency jitter both offsets the whole ridge and
        // bends it along the time axis.
        let (jitter, wiggle) = if jitter_std > 0.0 {
            let offset = rng.normal() * jitter_std;
            let mut profile = wiggle_profile(cfg.input_shape.1, &mut rng);
            for v in &mut profile {
                *v *= jitter_std;
            }
            (offset, Some(profile))
        } else {
            (0.0, None)
        };
        add_ridge(cfg, &mut canvas, class, amp, jitter, wiggle.as_deref());
        labels[class] = 1.0;
        components.push((class, amp, jitter));
    }

    let raw = Tensor::new(vec![h, w, 1], canvas)?;
    let input = standardize(&raw, &cfg.normalization);
    Ok(SpectrogramInstance {
        id: format!("{}-{index:04}", split.name()),
        input,
        labels,
        components,
    })
}

/// Generates the three splits deterministically from the config.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<LabeledCorpus, DataError> {
    cfg.validate()?;
    let make = |split: Split, count: usize| -> Result<Vec<SpectrogramInstance>, DataError> {
        (0..count).map(|i| generate_instance(cfg, split, i)).collect()
    };
    Ok(LabeledCorpus {
        train: make(Split::Train, cfg.train_instances)?,
        val: make(Split::Val, cfg.val_instances)?,
        test: make(Split::Test, cfg.test_instances)?,
        config: cfg.clone(),
    })
}

/// Multi-label mixup with hard label assignment: with the given probability
/// per instance, average 2..max_components inputs uniformly and union their
/// label vectors.
pub fn mixup_multilabel(
    batch: &[SpectrogramInstance],
    probability: f64,
    max_components: usize,
    seed: u64,
) -> Vec<SpectrogramInstance> {
    let mut rng = Rng::derive(seed, &[0x6d69_7875]);
    let n = batch.len();
    let mut out = Vec::with_capacity(n);
    for (i, instance) in batch.iter().enumerate() {
        if n < 2 || rng.next_f64() >= probability {
            out.push(instance.clone());
            continue;
        }
        let extras = 1 + if max_components >= 3 { rng.below(2) } else { 0 };
        let mut picked = vec![i];
        while picked.len() < 1 + extras && picked.len() < n {
            let j = rng.below(n);
            if !picked.contains(&j) {
                picked.push(j);
            }
        }
        let weight = 1.0 / picked.len() as f64;
        let mut data = vec![0.0; instance.input.len()];
        let mut labels = vec![0.0; instance.labels.len()];
        for &j in &picked {
            for (acc, v) in data.iter_mut().zip(batch[j].input.data()) {
                *acc += v * weight;
            }
            for (l, &lv) in labels.iter_mut().zip(&batch[j].labels) {
                if lv == 1.0 {
                    *l = 1.0;
                }
            }
        }
        out.push(SpectrogramInstance {
            id: instance.id.clone(),
            input: Tensor::from_parts(instance.input.shape().to_vec(), data),
            labels,
            components: instance.components.clone(),
        });
    }
    out
}

/// With the given probability per instance, replace the input with pure
/// background noise and the labels with the all-zero vector.
pub fn inject_nocall(
    batch: &[SpectrogramInstance],
    probability: f64,
    seed: u64,
    cfg: &CorpusConfig,
) -> Vec<SpectrogramInstance> {
    let mut rng = Rng::derive(seed, &[0x6e6f_6361]);
    batch
        .iter()
        .map(|instance| {
            if rng.next_f64() >= probability {
                return instance.clone();
            }
            let noise = white_background(cfg, &mut rng, cfg.noise_std);
            let raw = Tensor::from_parts(instance.input.shape().to_vec(), noise);
            SpectrogramInstance {
                id: instance.id.clone(),
                input: standardize(&raw, &cfg.normalization),
                labels: vec![0.0; instance.labels.len()],
                components: Vec::new(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Corpus export/import: a directory with `corpus.json` (the config),
// `manifest.csv` (id, split, labels, generator parameters) and one tensor
// file per instance (`CHIRPTEN1` magic, u64 LE dims, f64 LE data).
// ---------------------------------------------------------------------------

const TEN_MAGIC: &[u8; 9] = b"CHIRPTEN1";

fn write_tensor(path: &Path, t: &Tensor) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(t.len() * 8 + 64);
    buf.extend_from_slice(TEN_MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn read_tensor(path: &Path) -> Result<Tensor, DataError> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < TEN_MAGIC.len() + 8 || &raw[..TEN_MAGIC.len()] != TEN_MAGIC {
        return Err(DataError::Import(format!("bad tensor file {}", path.display())));
    }
    let mut pos = TEN_MAGIC.len();
    let u64_at = |p: &mut usize| -> Result<u64, DataError> {
        if *p + 8 > raw.len() {
            return Err(DataError::Import("truncated tensor file".into()));
        }
        let v = u64::from_le_bytes(raw[*p..*p + 8].try_into().unwrap());
        *p += 8;
        Ok(v)
    };
    let ndim = u64_at(&mut pos)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u64_at(&mut pos)? as usize);
    }
    let len: usize = shape.iter().product();
    if raw.len() != pos + len * 8 {
        return Err(DataError::Import("tensor length mismatch".into()));
    }
    let mut data = Vec::with_capacity(len);
    for i in 0..len {
        data.push(f64::from_le_bytes(
            raw[pos + i * 8..pos + (i + 1) * 8].try_into().unwrap(),
        ));
    }
    Ok(Tensor::new(shape, data)?)
}

fn labels_to_bits(labels: &[f64]) -> String {
    labels
        .iter()
        .map(|&l| if l == 1.0 { '1' } else { '0' })
        .collect()
}

fn components_to_field(components: &[(usize, f64, f64)]) -> String {
    components
        .iter()
        .map(|(k, amp, jit)| format!("{k}:{amp}:{jit}"))
        .collect::<Vec<_>>()
        .join("|")
}

pub fn export_corpus(corpus: &LabeledCorpus, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let config_json = serde_json::to_string_pretty(&corpus.config)
        .map_err(|e| DataError::Import(format!("config serialization: {e}")))?;
    fs::write(dir.join("corpus.json"), config_json)?;
    let mut manifest = String::from("id,split,labels,components\n");
    for split in [Split::Train, Split::Val, Split::Test] {
        for instance in corpus.split(split) {
            manifest.push_str(&format!(
                "{},{},{},{}\n",
                instance.id,
                split.name(),
                labels_to_bits(&instance.labels),
                components_to_field(&instance.components),
            ));
            write_tensor(&dir.join(format!("{}.bin", instance.id)), &instance.input)?;
        }
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

pub fn import_corpus(dir: &Path) -> Result<LabeledCorpus, DataError> {
    let config: CorpusConfig = serde_json::from_str(
        &fs::read_to_string(dir.join("corpus.json"))
            .map_err(|e| DataError::Import(format!("corpus.json: {e}")))?,
    )
    .map_err(|e| DataError::Import(format!("corpus.json parse: {e}")))?;
    let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut splits: BTreeMap<&str, Vec<SpectrogramInstance>> = BTreeMap::new();
    for (line_no, line) in manifest.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(DataError::Import(format!("manifest line {line_no} malformed")));
        }
        let labels: Vec<f64> = parts[2]
            .chars()
            .map(|c| if c == '1' { 1.0 } else { 0.0 })
            .collect();
        let components = parse_components(parts[3], line_no)?;
        let input = read_tensor(&dir.join(format!("{}.bin", parts[0])))?;
        splits.entry(match parts[1] {
            "train" => "train",
            "val" => "val",
            "test" => "test",
            other => {
                return Err(DataError::Import(format!("unknown split `{other}`")));
            }
        })
        .or_default()
        .push(SpectrogramInstance {
            id: parts[0].to_string(),
            input,
            labels,
            components,
        });
    }
    Ok(LabeledCorpus {
        train: splits.remove("train").unwrap_or_default(),
        val: splits.remove("val").unwrap_or_default(),
        test: splits.remove("test").unwrap_or_default(),
        config,
    })
}

fn parse_components(field: &str, line_no: usize) -> Result<Vec<(usize, f64, f64)>, DataError> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split('|')
        .map(|part| {
            let bits: Vec<&str> = part.split(':').collect();
            if bits.len() != 3 {
                return Err(DataError::Import(format!(
                    "manifest line {line_no}: bad component `{part}`"
                )));
            }
            Ok((
                bits[0]
                    .parse()
                    .map_err(|_| DataError::Import(format!("line {line_no}: class")))?,
                bits[1]
                    .parse()
                    .map_err(|_| DataError::Import(format!("line {line_no}: amp")))?,
                bits[2]
                    .parse()
                    .map_err(|_| DataError::Import(format!("line {line_no}: jitter")))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            train_instances: 40,
            val_instances: 12,
            test_instances: 20,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_class_has_a_positive_in_every_split() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            for class in 0..corpus.config.num_classes {
                let hit = corpus
                    .split(split)
                    .iter()
                    .any(|i| i.labels[class] == 1.0);
                assert!(hit, "class {class} missing in {}", split.name());
            }
        }
    }

    #[test]
    fn labels_match_placed_components() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        for instance in corpus.train.iter().chain(&corpus.test) {
            for (class, label) in instance.labels.iter().enumerate() {
                let placed = instance.components.iter().any(|(k, _, _)| *k == class);
                assert_eq!(*label == 1.0, placed, "instance {}", instance.id);
            }
        }
    }

    #[test]
    fn label_marginals_near_expected_rate() {
        // Components are uniform over {1,2,3}, classes uniform: expected
        // positive rate 2/K per class.
        let cfg = CorpusConfig {
            train_instances: 1000,
            val_instances: 12,
            test_instances: 12,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let k = cfg.num_classes;
        let expected = 2.0 / k as f64;
        for class in 0..k {
            let rate = corpus
                .train
                .iter()
                .filter(|i| i.labels[class] == 1.0)
                .count() as f64
                / corpus.train.len() as f64;
            assert!(
                (rate - expected).abs() <= 0.2 * expected,
                "class {class} rate {rate}, expected {expected}"
            );
        }
    }

    #[test]
    fn too_small_shape_is_config_error() {
        let cfg = CorpusConfig {
            input_shape: (8, 64, 1),
            ..CorpusConfig::default()
        };
        assert!(matches!(
            generate_corpus(&cfg),
            Err(DataError::InvalidConfig(_))
        ));
    }

    #[test]
    fn standardize_centering_and_inverse() {
        let norm = NormalizationConfig { mean: -13.369, std: 13.162 };
        let x = Tensor::new(vec![2], vec![-13.369, -0.207]).unwrap();
        let z = standardize(&x, &norm);
        assert_eq!(z.data()[0], 0.0);
        assert!((z.data()[1] - 1.0).abs() < 1e-3);
        // Invert: x = z * std + mean.
        for (orig, std) in x.data().iter().zip(z.data()) {
            let back = std * norm.std + norm.mean;
            assert!((back - orig).abs() < 1e-12);
        }
    }

    #[test]
    fn mixup_probability_zero_is_identity() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        let out = mixup_multilabel(&corpus.train[..8], 0.0, 3, 5);
        assert_eq!(out, corpus.train[..8].to_vec());
    }

    #[test]
    fn mixup_unions_labels_and_averages_inputs() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        let batch = &corpus.train[..8];
        let out = mixup_multilabel(batch, 1.0, 3, 42);
        assert_eq!(out.len(), batch.len());
        for (i, mixed) in out.iter().enumerate() {
            // Union semantics: original labels all survive.
            for (a, b) in batch[i].labels.iter().zip(&mixed.labels) {
                assert!(*b >= *a);
            }
            // Reconstruct the mean from candidate component sets.
            let mut matched = false;
            'outer: for j in 0..batch.len() {
                for kk in 0..batch.len() {
                    for set in [vec![i, j], vec![i, j, kk]] {
                        let wt = 1.0 / set.len() as f64;
                        let mut acc = vec![0.0; mixed.input.len()];
                        for &m in &set {
                            for (a, v) in acc.iter_mut().zip(batch[m].input.data()) {
                                *a += v * wt;
                            }
                        }
                        if acc
                            .iter()
                            .zip(mixed.input.data())
                            .all(|(a, b)| (a - b).abs() < 1e-12)
                        {
                            matched = true;
                            break 'outer;
                        }
                    }
                }
            }
            assert!(matched, "mixed input is not a uniform mean of components");
        }
    }

    #[test]
    fn nocall_probability_extremes() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        let batch = &corpus.train[..10];
        let untouched = inject_nocall(batch, 0.0, 7, &corpus.config);
        assert_eq!(untouched, batch.to_vec());
        let replaced = inject_nocall(batch, 1.0, 7, &corpus.config);
        for instance in &replaced {
            assert!(instance.labels.iter().all(|&l| l == 0.0));
        }
    }

    #[test]
    fn nocall_removes_band_energy() {
        let cfg = small_cfg();
        let corpus = generate_corpus(&cfg).unwrap();
        let batch = &corpus.train[..10];
        let replaced = inject_nocall(batch, 1.0, 7, &cfg);
        let (h, w, _) = cfg.input_shape;
        // Pattern instances carry visibly more energy in their class band
        // than the nocall replacements do anywhere.
        for (orig, no) in batch.iter().zip(&replaced) {
            let band_mean = |t: &Tensor, class: usize| {
                let (base, _) = cfg.pattern_geometry(class);
                let lo = (base as isize - 2).max(0) as usize;
                let hi = ((base as usize) + 2).min(h - 1);
                let mut total = 0.0;
                let mut count = 0;
                for r in lo..=hi {
                    for c in 0..w {
                        total += t.data()[r * w + c];
                        count += 1;
                    }
                }
                total / count as f64
            };
            let class = orig.components[0].0;
            assert!(
                band_mean(&orig.input, class) > band_mean(&no.input, class) + 0.2,
                "nocall retained band energy"
            );
        }
    }

    #[test]
    fn export_import_round_trip() {
        let dir = std::env::temp_dir().join(format!("chirplab-corpus-{}", std::process::id()));
        let cfg = CorpusConfig {
            train_instances: 8,
            val_instances: 6,
            test_instances: 6,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        export_corpus(&corpus, &dir).unwrap();
        let back = import_corpus(&dir).unwrap();
        assert_eq!(corpus, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn shifted_test_split_is_louder() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        let energy = |instances: &[SpectrogramInstance]| {
            instances
                .iter()
                .map(|i| i.input.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                / instances.len() as f64
        };
        assert!(energy(&corpus.test) > 1.5 * energy(&corpus.train));
    }
}
