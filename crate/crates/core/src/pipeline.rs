//! End-to-end phantom experiment: synthesize data, train, calibrate,
//! segment, score, and optionally run the ablations and the threshold sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{init_error_pool, main_error_pool, sensitivity_sweep_tau, SweepRow};
use crate::data_io::{generate_phantom, LabeledSlice, PhantomSpec, Slice};
use crate::error::{Error, Result};
use crate::evaluation::{best_iteration_oracle, dice, ssim_excluding_anomaly, ImageMetrics, MetricsReport};
use crate::mask::SpatialMask;
use crate::reconstruction::{split_indices, train, ModelKind, ReconstructionModel, TrainConfig, TrainingLog};
use crate::refinement::{run_refinement, single_step_segmentation, RefinementConfig, TerminationReason};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub healthy_count: usize,
    pub lesion_count: usize,
    /// Healthy phantom `i` uses seed `healthy_seed + i`.
    pub healthy_seed: u64,
    pub lesion_seed: u64,
    pub train: TrainConfig,
    /// Epoch override for the init model; `None` uses `train.epochs`.
    pub init_epochs: Option<usize>,
    pub refinement: RefinementConfig,
    pub calibration_percentile: f64,
    pub calibration_seed: u64,
    /// Also train the unguided main model and score both ablations.
    pub ablations: bool,
    /// Calibration percentiles for the threshold sweep; empty skips it.
    pub sweep_percentiles: Vec<f64>,
    /// Calibration percentiles tried by the best-iteration oracle.
    pub oracle_percentiles: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            phantom: PhantomSpec::default(),
            healthy_count: 500,
            lesion_count: 100,
            healthy_seed: 10_000,
            lesion_seed: 900_000,
            train: TrainConfig::default(),
            init_epochs: None,
            refinement: RefinementConfig::default(),
            calibration_percentile: 80.0,
            calibration_seed: 7,
            ablations: true,
            sweep_percentiles: vec![60.0, 70.0, 80.0, 90.0],
            oracle_percentiles: vec![50.0, 60.0, 70.0, 80.0, 90.0, 95.0, 98.0],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        self.refinement.validate()?;
        if self.healthy_count < 2 || self.lesion_count == 0 {
            return Err(Error::Config("need at least 2 healthy and 1 lesion phantom".into()));
        }
        if self.train.radius != self.refinement.radius {
            return Err(Error::Config(format!(
                "train radius {} differs from refinement radius {}",
                self.train.radius, self.refinement.radius
            )));
        }
        for &p in self.sweep_percentiles.iter().chain(&self.oracle_percentiles).chain([&self.calibration_percentile]) {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::Config(format!("percentile {p} outside (0, 100]")));
            }
        }
        Ok(())
    }

    fn init_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.init_epochs.unwrap_or(self.train.epochs),
            ..self.train.clone()
        }
    }

    fn unguided_train(&self) -> TrainConfig {
        TrainConfig {
            guided: false,
            ..self.train.clone()
        }
    }
}

pub fn healthy_phantoms<T: Scalar>(config: &ExperimentConfig) -> Result<Vec<Slice<T>>> {
    (0..config.healthy_count)
        .map(|i| {
            let spec = config.phantom.with_lesion(false).with_seed(config.healthy_seed + i as u64);
            Ok(generate_phantom::<T>(&spec)?.slice)
        })
        .collect()
}

pub fn lesion_phantoms<T: Scalar>(config: &ExperimentConfig) -> Result<Vec<LabeledSlice<T>>> {
    (0..config.lesion_count)
        .map(|i| generate_phantom::<T>(&config.phantom.with_lesion(true).with_seed(config.lesion_seed + i as u64)))
        .collect()
}

/// Trained models for one experiment.
#[derive(Clone, Debug)]
pub struct TrainedModels<T> {
    pub init: ReconstructionModel<T>,
    pub main: ReconstructionModel<T>,
    /// Main model trained with a zeroed guide, for the ablation.
    pub unguided: Option<ReconstructionModel<T>>,
    pub logs: Vec<(String, TrainingLog)>,
}

pub fn train_models<T: Scalar>(
    config: &ExperimentConfig,
    healthy: &[Slice<T>],
    mut progress: impl FnMut(&str, usize, &TrainingLog),
) -> Result<TrainedModels<T>> {
    let mut logs = Vec::new();
    let (init, log) = train(ModelKind::Init, healthy, &config.init_train(), |e, _, l| {
        progress("init", e, l);
        Ok(())
    })?;
    logs.push(("init".to_string(), log));
    let (main, log) = train(ModelKind::Main, healthy, &config.train, |e, _, l| {
        progress("main", e, l);
        Ok(())
    })?;
    logs.push(("main".to_string(), log));
    let unguided = if config.ablations {
        let (m, log) = train(ModelKind::Main, healthy, &config.unguided_train(), |e, _, l| {
            progress("main-unguided", e, l);
            Ok(())
        })?;
        logs.push(("main-unguided".to_string(), log));
        Some(m)
    } else {
        None
    };
    Ok(TrainedModels {
        init,
        main,
        unguided,
        logs,
    })
}

/// Outcome of the full pipeline on one lesion image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub id: String,
    pub segmentation: SpatialMask,
    pub iterations: usize,
    pub termination: Option<TerminationReason>,
    pub dice: f64,
    pub ssim: f64,
    pub oracle_dice: f64,
    pub oracle_iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationScores {
    /// Dice of the single-step init-model prediction.
    pub single_step: Vec<f64>,
    pub single_step_tau: f64,
    /// Dice of the refinement with the unguided main model.
    pub unguided: Vec<f64>,
    pub unguided_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub tau: f64,
    pub images: Vec<ImageOutcome>,
    pub report: MetricsReport,
    pub ablations: Option<AblationScores>,
    pub sweep: Vec<SweepRow>,
}

impl ExperimentResult {
    pub fn mean_dice(&self) -> f64 {
        mean(self.images.iter().map(|i| i.dice))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.images.iter().map(|i| i.ssim))
    }
}

pub fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Calibrates, segments and scores `lesions` with already trained models.
pub fn evaluate_models<T: Scalar>(
    config: &ExperimentConfig,
    models: &TrainedModels<T>,
    healthy: &[Slice<T>],
    lesions: &[LabeledSlice<T>],
) -> Result<ExperimentResult> {
    let (_, val_idx) = split_indices(healthy.len(), config.train.validation_fraction, config.train.seed);
    let validation: Vec<Slice<T>> = val_idx.iter().map(|&i| healthy[i].clone()).collect();

    let pool = main_error_pool(&validation, &models.main, &config.train.sampler, config.calibration_seed)?;
    let tau = pool.tau_at(config.calibration_percentile)?;
    let refinement = RefinementConfig {
        tau,
        ..config.refinement.clone()
    };
    let oracle_taus: Vec<f64> = config
        .oracle_percentiles
        .iter()
        .map(|&p| pool.tau_at(p))
        .collect::<Result<_>>()?;

    let mut images = Vec::with_capacity(lesions.len());
    let mut metrics = Vec::with_capacity(lesions.len());
    for item in lesions {
        let trace = run_refinement(&item.slice, &models.main, &models.init, &refinement)?;
        let seg = trace.final_segmentation.clone();
        let oracle = best_iteration_oracle(&trace, &item.lesion_mask, &oracle_taus)?;
        let ssim = ssim_excluding_anomaly(
            &item.slice.pixels,
            &trace.last().reconstruction,
            &item.lesion_mask,
            &item.slice.brain_mask,
        )?;
        let mut m = ImageMetrics::compute(item.slice.subject_id.clone(), &seg, &item.lesion_mask)?;
        m.ssim = Some(ssim);
        m.oracle_dice = Some(100.0 * oracle.dice);
        metrics.push(m);
        images.push(ImageOutcome {
            id: item.slice.subject_id.clone(),
            dice: dice(&seg, &item.lesion_mask)?,
            segmentation: seg,
            iterations: trace.states.len(),
            termination: trace.termination_reason,
            ssim,
            oracle_dice: oracle.dice,
            oracle_iteration: oracle.iteration,
        });
    }

    let ablations = match &models.unguided {
        Some(unguided) => {
            let init_pool = init_error_pool(&validation, &models.init)?;
            let single_step_tau = init_pool.tau_at(config.calibration_percentile)?;
            let upool = main_error_pool(&validation, unguided, &config.train.sampler, config.calibration_seed)?;
            let unguided_tau = upool.tau_at(config.calibration_percentile)?;
            let ucfg = RefinementConfig {
                tau: unguided_tau,
                ..config.refinement.clone()
            };
            let mut single_step = Vec::with_capacity(lesions.len());
            let mut unguided_dice = Vec::with_capacity(lesions.len());
            for item in lesions {
                let (seg, _) = single_step_segmentation(&item.slice, &models.init, single_step_tau)?;
                single_step.push(dice(&seg, &item.lesion_mask)?);
                let trace = run_refinement(&item.slice, unguided, &models.init, &ucfg)?;
                unguided_dice.push(dice(&trace.final_segmentation, &item.lesion_mask)?);
            }
            Some(AblationScores {
                single_step,
                single_step_tau,
                unguided: unguided_dice,
                unguided_tau,
            })
        }
        None => None,
    };

    let sweep = sensitivity_sweep_tau(
        lesions,
        &models.main,
        &models.init,
        &pool,
        &config.sweep_percentiles,
        &config.refinement,
    )?;

    Ok(ExperimentResult {
        tau,
        images,
        report: MetricsReport::new(metrics),
        ablations,
        sweep,
    })
}

/// Generates the data, trains every model and evaluates.
pub fn run_experiment<T: Scalar>(
    config: &ExperimentConfig,
    progress: impl FnMut(&str, usize, &TrainingLog),
) -> Result<(TrainedModels<T>, ExperimentResult)> {
    config.validate()?;
    let healthy = healthy_phantoms::<T>(config)?;
    let lesions = lesion_phantoms::<T>(config)?;
    let models = train_models(config, &healthy, progress)?;
    let result = evaluate_models(config, &models, &healthy, &lesions)?;
    Ok((models, result))
}
