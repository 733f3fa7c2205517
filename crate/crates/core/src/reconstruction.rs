//! The two reconstruction networks and their training loops.
//!
//! The main model maps (noise-masked slice, structural guide) to the clean
//! slice. The init model sees only the guide and restores the whole slice;
//! it drives the first refinement iteration, when the mask covers the brain.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::Slice;
use crate::error::{check_dims, Error, Result};
use crate::frequency::{structural_guide, DEFAULT_RADIUS};
use crate::nn::{Adam, FeatureMap, Network, UNet, UNetSpec};
use crate::plane::Plane;
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::spatial_masking::{apply_mask, sample_training_mask, MaskSamplerConfig};

const MAGIC: &[u8; 8] = b"ITMSKCK\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Main,
    Init,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Main => "main",
            ModelKind::Init => "init",
        }
    }

    pub fn input_channels(self) -> usize {
        match self {
            ModelKind::Main => 2,
            ModelKind::Init => 1,
        }
    }
}

/// Brain intensity statistics of the training slices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for NormalizationStats {
    fn default() -> Self {
        NormalizationStats { mean: 0.0, std: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Only `"adam"` is supported.
    pub optimizer: String,
    pub radius: f64,
    pub sampler: MaskSamplerConfig,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only the final model.
    pub checkpoint_every: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// When false the main model's guide channel is zeroed, in training and
    /// at inference.
    pub guided: bool,
    /// Predict a correction to the first input plane (the masked slice for
    /// the main model, the guide for the init model) instead of the slice.
    pub residual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            optimizer: "adam".into(),
            radius: DEFAULT_RADIUS,
            sampler: MaskSamplerConfig::default(),
            validation_fraction: 0.1,
            seed: 0,
            checkpoint_every: 10,
            base_channels: 16,
            depth: 4,
            guided: true,
            residual: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !self.optimizer.eq_ignore_ascii_case("adam") {
            return bad(format!("unsupported optimizer {:?}", self.optimizer));
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return bad(format!("radius {} must be >= 0", self.radius));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation fraction {} must lie in (0, 1)", self.validation_fraction));
        }
        if self.base_channels == 0 || self.depth == 0 {
            return bad("network dimensions must be positive".into());
        }
        self.sampler.validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn arch(&self, kind: ModelKind) -> UNetSpec {
        UNetSpec {
            in_channels: kind.input_channels(),
            base_channels: self.base_channels,
            depth: self.depth,
            residual: self.residual,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
}

/// Per-epoch losses; serialized as one JSON object per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    fn push(&mut self, epoch: usize, split: &str, loss: f64) {
        self.records.push(LogRecord {
            epoch,
            split: split.into(),
            loss,
        });
    }

    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.loss).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: ModelKind,
    radius: f64,
    guided: bool,
    normalization: NormalizationStats,
    arch: UNetSpec,
    scalar: String,
    param_count: usize,
    config_digest: String,
}

/// A trained (or freshly initialized) reconstruction network.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionModel<T> {
    kind: ModelKind,
    radius: f64,
    guided: bool,
    normalization: NormalizationStats,
    config_digest: String,
    net: UNet<T>,
}

impl<T: Scalar> ReconstructionModel<T> {
    /// Randomly initialized model for `kind` with the architecture in `config`.
    pub fn untrained(kind: ModelKind, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, &[0x1417, kind as u64]);
        Ok(ReconstructionModel {
            kind,
            radius: config.radius,
            guided: config.guided || kind == ModelKind::Init,
            normalization: NormalizationStats::default(),
            config_digest: config.digest(),
            net: UNet::new(config.arch(kind), &mut rng)?,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Flat network parameters.
    pub fn params(&self) -> &[T] {
        self.net.params()
    }

    pub fn guided(&self) -> bool {
        self.guided
    }

    pub fn normalization(&self) -> NormalizationStats {
        self.normalization
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    pub fn network(&self) -> &UNet<T> {
        &self.net
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::ModelKind {
                expected: kind.name(),
                found: self.kind.name(),
            })
        }
    }

    /// The high-frequency guide this model was trained with.
    pub fn guide(&self, slice: &Plane<T>) -> Result<Plane<T>> {
        structural_guide(slice, self.radius)
    }

    fn input(&self, masked: Option<&Plane<T>>, guide: &Plane<T>) -> Result<FeatureMap<T>> {
        let zero;
        let guide = if self.guided {
            guide
        } else {
            zero = Plane::zeros(guide.height(), guide.width());
            &zero
        };
        let planes: Vec<&Plane<T>> = match masked {
            Some(m) => vec![m, guide],
            None => vec![guide],
        };
        padded_input(&planes, self.net.size_multiple())
    }

    fn predict(&self, input: &FeatureMap<T>, dims: (usize, usize)) -> Result<Plane<T>> {
        let out = self.net.forward(input)?;
        let out = crop(&out, input.width, dims)?;
        if !out.is_finite() {
            return Err(Error::Internal("network produced non-finite output".into()));
        }
        Ok(out)
    }

    /// `x' = f(masked, guide)` for the main model.
    pub fn reconstruct(&self, masked: &Plane<T>, guide: &Plane<T>) -> Result<Plane<T>> {
        self.expect_kind(ModelKind::Main)?;
        check_dims(masked.dims(), guide.dims())?;
        masked.ensure_finite()?;
        guide.ensure_finite()?;
        let input = self.input(Some(masked), guide)?;
        self.predict(&input, masked.dims())
    }

    /// `x' = f_init(guide)` for the init model.
    pub fn reconstruct_init(&self, guide: &Plane<T>) -> Result<Plane<T>> {
        self.expect_kind(ModelKind::Init)?;
        guide.ensure_finite()?;
        let input = self.input(None, guide)?;
        self.predict(&input, guide.dims())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CheckpointHeader {
            kind: self.kind,
            radius: self.radius,
            guided: self.guided,
            normalization: self.normalization,
            arch: self.net.spec(),
            scalar: T::NAME.into(),
            param_count: self.net.param_count(),
            config_digest: self.config_digest.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(16 + header.len() + self.net.param_count() * 8);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        T::to_le_bytes_vec(self.net.params(), &mut bytes);
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; parameters stored at a different precision are converted.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not an itermask checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint format version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        let params: Vec<T> = match header.scalar.as_str() {
            "f32" => decode::<f32, T>(payload, header.param_count),
            "f64" => decode::<f64, T>(payload, header.param_count),
            other => return Err(Error::Unsupported(format!("scalar type {other}"))),
        }
        .ok_or_else(|| corrupt("parameter payload has the wrong length"))?;
        if header.arch.in_channels != header.kind.input_channels() {
            return Err(corrupt("architecture does not match model kind"));
        }
        let net = UNet::from_params(header.arch, params).map_err(|e| corrupt(&e.to_string()))?;
        if params_non_finite(&net) {
            return Err(corrupt("non-finite parameters"));
        }
        Ok(ReconstructionModel {
            kind: header.kind,
            radius: header.radius,
            guided: header.guided,
            normalization: header.normalization,
            config_digest: header.config_digest,
            net,
        })
    }
}

fn params_non_finite<T: Scalar>(net: &UNet<T>) -> bool {
    net.params().iter().any(|v| !v.is_finite())
}

fn decode<S: Scalar, T: Scalar>(payload: &[u8], count: usize) -> Option<Vec<T>> {
    let width = std::mem::size_of::<S>();
    if payload.len() != count * width {
        return None;
    }
    let values = S::from_le_bytes_slice(payload)?;
    Some(values.into_iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect())
}

/// Stacks planes into a feature map, zero padding bottom and right up to
/// a multiple of `multiple`.
fn padded_input<T: Scalar>(planes: &[&Plane<T>], multiple: usize) -> Result<FeatureMap<T>> {
    let (h, w) = planes[0].dims();
    for p in planes {
        check_dims((h, w), p.dims())?;
    }
    let ph = h.div_ceil(multiple).max(1) * multiple;
    let pw = w.div_ceil(multiple).max(1) * multiple;
    let mut fm = FeatureMap::zeros(planes.len(), ph, pw);
    for (c, p) in planes.iter().enumerate() {
        let src = p.as_slice();
        let dst = &mut fm.data[c * ph * pw..(c + 1) * ph * pw];
        for y in 0..h {
            dst[y * pw..y * pw + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    Ok(fm)
}

fn crop<T: Scalar>(data: &[T], padded_width: usize, (h, w): (usize, usize)) -> Result<Plane<T>> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend_from_slice(&data[y * padded_width..y * padded_width + w]);
    }
    Plane::from_vec(h, w, out)
}

fn padded_target<T: Scalar>(plane: &Plane<T>, multiple: usize) -> Result<Vec<T>> {
    Ok(padded_input(&[plane], multiple)?.data)
}

struct Prepared<'a, T> {
    slice: &'a Slice<T>,
    guide: Plane<T>,
    target: Vec<T>,
}

fn prepare<'a, T: Scalar>(
    slices: &'a [Slice<T>],
    model: &ReconstructionModel<T>,
) -> Result<Vec<Prepared<'a, T>>> {
    let mut out = Vec::with_capacity(slices.len());
    for s in slices {
        out.push(Prepared {
            slice: s,
            guide: model.guide(&s.pixels)?,
            target: padded_target(&s.pixels, model.net.size_multiple())?,
        });
    }
    Ok(out)
}

fn check_training_set<T: Scalar>(slices: &[Slice<T>]) -> Result<NormalizationStats> {
    let Some(first) = slices.first() else {
        return Err(Error::invalid("training set is empty"));
    };
    let (mut mean, mut std) = (0.0, 0.0);
    for s in slices {
        check_dims(first.dims(), s.dims())?;
        s.check_normalized()?;
        let (m, d) = crate::data_io::brain_stats(&s.pixels, &s.brain_mask)?;
        mean += m;
        std += d;
    }
    let n = slices.len() as f64;
    Ok(NormalizationStats {
        mean: mean / n,
        std: std / n,
    })
}

// stream tags for seed derivation
const TAG_SPLIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_SAMPLE: u64 = 3;
const TAG_VALIDATION: u64 = 4;

/// Deterministic train/validation split of `n` items. With a single item
/// both splits hold it.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut rng_for(seed, &[TAG_SPLIT]));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

impl<T: Scalar> ReconstructionModel<T> {
    /// Builds the network input and target for one training sample.
    fn sample(&self, p: &Prepared<'_, T>, sampler: &MaskSamplerConfig, seed: u64, key: &[u64]) -> Result<FeatureMap<T>> {
        match self.kind {
            ModelKind::Init => self.input(None, &p.guide),
            ModelKind::Main => {
                let mut rng = rng_for(seed, key);
                let mask = sample_training_mask(&p.slice.brain_mask, sampler, &mut rng)?;
                let masked = apply_mask(&p.slice.pixels, &mask, &mut rng)?;
                self.input(Some(&masked), &p.guide)
            }
        }
    }

    fn validation_loss(&self, val: &[Prepared<'_, T>], config: &TrainConfig) -> Result<f64> {
        let mut total = 0.0;
        for (i, p) in val.iter().enumerate() {
            let input = self.sample(p, &config.sampler, config.seed, &[TAG_VALIDATION, i as u64])?;
            let out = self.net.forward(&input)?;
            let n = out.len() as f64;
            total += out
                .iter()
                .zip(&p.target)
                .map(|(&o, &t)| (o - t).to_f64_lossy().powi(2))
                .sum::<f64>()
                / n;
        }
        Ok(total / val.len() as f64)
    }
}

/// Trains a model of `kind`. `on_epoch` runs after every epoch with the
/// 1-based epoch number; use it for checkpoints or progress output.
pub fn train<T: Scalar>(
    kind: ModelKind,
    slices: &[Slice<T>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ReconstructionModel<T>, &TrainingLog) -> Result<()>,
) -> Result<(ReconstructionModel<T>, TrainingLog)> {
    config.validate()?;
    let normalization = check_training_set(slices)?;
    let mut model = ReconstructionModel::untrained(kind, config)?;
    model.normalization = normalization;

    let (train_idx, val_idx) = split_indices(slices.len(), config.validation_fraction, config.seed);
    let prepared = prepare(slices, &model)?;
    let val: Vec<Prepared<'_, T>> = val_idx
        .iter()
        .map(|&i| Prepared {
            slice: prepared[i].slice,
            guide: prepared[i].guide.clone(),
            target: prepared[i].target.clone(),
        })
        .collect();

    let mut log = TrainingLog::default();
    log.push(0, "validation", model.validation_loss(&val, config)?);

    let n_params = model.net.param_count();
    let mut adam = Adam::<T>::new(n_params, config.learning_rate);
    let mut grads = vec![T::zero(); n_params];
    let mut batch_grads = vec![T::zero(); n_params];
    let mut order = train_idx.clone();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng_for(config.seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            batch_grads.iter_mut().for_each(|g| *g = T::zero());
            for &i in batch {
                let p = &prepared[i];
                let input = model.sample(p, &config.sampler, config.seed, &[TAG_SAMPLE, epoch as u64, i as u64])?;
                grads.iter_mut().for_each(|g| *g = T::zero());
                let loss = model.net.loss_and_grad(&input, &p.target, &mut grads)?;
                epoch_loss += loss.to_f64_lossy();
                for (b, &g) in batch_grads.iter_mut().zip(&grads) {
                    *b += g;
                }
            }
            let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
            batch_grads.iter_mut().for_each(|g| *g *= scale);
            adam.step(model.net.params_mut(), &batch_grads);
        }
        if params_non_finite(&model.net) {
            return Err(Error::Internal(format!("training diverged in epoch {epoch}")));
        }
        log.push(epoch, "train", epoch_loss / order.len() as f64);
        log.push(epoch, "validation", model.validation_loss(&val, config)?);
        tracing::debug!(epoch, kind = kind.name(), loss = log.records.last().map(|r| r.loss), "epoch done");
        on_epoch(epoch, &model, &log)?;
    }
    Ok((model, log))
}

/// Trains the main model on healthy slices.
pub fn train_main<T: Scalar>(slices: &[Slice<T>], config: &TrainConfig) -> Result<(ReconstructionModel<T>, TrainingLog)> {
    train(ModelKind::Main, slices, config, |_, _, _| Ok(()))
}

/// Trains the init model (guide in, whole slice out) on healthy slices.
pub fn train_init<T: Scalar>(slices: &[Slice<T>], config: &TrainConfig) -> Result<(ReconstructionModel<T>, TrainingLog)> {
    train(ModelKind::Init, slices, config, |_, _, _| Ok(()))
}
