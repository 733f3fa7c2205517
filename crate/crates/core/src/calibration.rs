//! Threshold selection from healthy validation errors, and sensitivity sweeps.

use serde::{Deserialize, Serialize};

use crate::data_io::{LabeledSlice, Slice};
use crate::error::{Error, Result};
use crate::evaluation::dice;
use crate::reconstruction::{train_init, ModelKind, ReconstructionModel, TrainConfig};
use crate::refinement::{error_map, run_refinement, single_step_segmentation, RefinementConfig};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::spatial_masking::{apply_mask, sample_training_mask, MaskSamplerConfig};

/// Percentile with linear interpolation between order statistics
/// (rank `p / 100 * (n - 1)`), the NumPy default.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Per-slice percentile of that slice's own masked errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePercentile {
    pub subject_id: String,
    pub slice_index: usize,
    pub pixel_count: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub tau: f64,
    pub source_percentile: f64,
    pub sample_count: usize,
    pub per_image: Vec<ImagePercentile>,
    /// Pooled error at every integer percentile 0..=100, for mapping between
    /// thresholds and percentiles later.
    #[serde(default)]
    pub percentile_table: Vec<f64>,
}

impl CalibrationResult {
    /// Threshold at `pct`, interpolated from the percentile table.
    pub fn tau_at(&self, pct: f64) -> Result<f64> {
        if self.percentile_table.len() != 101 {
            return Err(Error::invalid("calibration has no percentile table"));
        }
        if !(0.0..=100.0).contains(&pct) {
            return Err(Error::invalid(format!("percentile {pct} outside [0, 100]")));
        }
        let lo = pct.floor() as usize;
        let hi = pct.ceil() as usize;
        let (a, b) = (self.percentile_table[lo], self.percentile_table[hi]);
        let tau = a + (b - a) * (pct - lo as f64);
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("percentile {pct} maps to threshold {tau}")));
        }
        Ok(tau)
    }

    /// Fraction of pooled healthy errors below `tau`, as a percentile.
    pub fn percentile_of(&self, tau: f64) -> Option<f64> {
        let t = &self.percentile_table;
        if t.len() != 101 {
            return None;
        }
        if tau <= t[0] {
            return Some(0.0);
        }
        let k = t.iter().rposition(|&v| v <= tau)?;
        if k == 100 {
            return Some(100.0);
        }
        let span = t[k + 1] - t[k];
        let frac = if span > 0.0 { (tau - t[k]) / span } else { 0.0 };
        Some(k as f64 + frac)
    }
}

/// Pooled reconstruction errors from healthy slices.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorPool {
    sorted: Vec<f64>,
    per_image: Vec<(String, usize, Vec<f64>)>,
}

impl ErrorPool {
    fn from_images(per_image: Vec<(String, usize, Vec<f64>)>) -> Result<Self> {
        let mut sorted: Vec<f64> = per_image.iter().flat_map(|(_, _, v)| v.iter().copied()).collect();
        if sorted.is_empty() {
            return Err(Error::invalid("calibration pool is empty"));
        }
        if sorted.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        sorted.sort_by(f64::total_cmp);
        Ok(ErrorPool { sorted, per_image })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.sorted
    }

    /// The pooled percentile; fails when it is not a usable positive threshold.
    pub fn tau_at(&self, pct: f64) -> Result<f64> {
        if !(0.0..=100.0).contains(&pct) {
            return Err(Error::invalid(format!("percentile {pct} outside [0, 100]")));
        }
        let tau = percentile_sorted(&self.sorted, pct);
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("percentile {pct} of the pool is {tau}, not a positive threshold")));
        }
        Ok(tau)
    }

    pub fn calibrate(&self, pct: f64) -> Result<CalibrationResult> {
        let tau = self.tau_at(pct)?;
        let per_image = self
            .per_image
            .iter()
            .filter(|(_, _, v)| !v.is_empty())
            .map(|(id, idx, v)| ImagePercentile {
                subject_id: id.clone(),
                slice_index: *idx,
                pixel_count: v.len(),
                value: percentile(v, pct).expect("nonempty and finite"),
            })
            .collect();
        Ok(CalibrationResult {
            tau,
            source_percentile: pct,
            sample_count: self.sorted.len(),
            per_image,
            percentile_table: (0..=100).map(|p| percentile_sorted(&self.sorted, p as f64)).collect(),
        })
    }
}

const TAG_CALIBRATION: u64 = 0xCA1;

/// Masks each healthy slice the way training does, reconstructs it with the
/// main model and pools the errors under the mask. Slice `i` draws its mask
/// and noise from `(seed, i)`.
pub fn main_error_pool<T: Scalar>(
    healthy: &[Slice<T>],
    main: &ReconstructionModel<T>,
    sampler: &MaskSamplerConfig,
    seed: u64,
) -> Result<ErrorPool> {
    if main.kind() != ModelKind::Main {
        return Err(Error::ModelKind {
            expected: "main",
            found: main.kind().name(),
        });
    }
    let mut per_image = Vec::with_capacity(healthy.len());
    for (i, s) in healthy.iter().enumerate() {
        let mut rng = rng_for(seed, &[TAG_CALIBRATION, i as u64]);
        let mask = sample_training_mask(&s.brain_mask, sampler, &mut rng)?;
        let masked = apply_mask(&s.pixels, &mask, &mut rng)?;
        let recon = main.reconstruct(&masked, &main.guide(&s.pixels)?)?;
        let e = error_map(&recon, &s.pixels, &mask)?;
        let values = mask.indices().map(|j| e.as_slice()[j].to_f64_lossy()).collect();
        per_image.push((s.subject_id.clone(), s.slice_index, values));
    }
    ErrorPool::from_images(per_image)
}

/// Init-model errors over the whole brain of each healthy slice.
pub fn init_error_pool<T: Scalar>(healthy: &[Slice<T>], init: &ReconstructionModel<T>) -> Result<ErrorPool> {
    let mut per_image = Vec::with_capacity(healthy.len());
    for s in healthy {
        let recon = init.reconstruct_init(&init.guide(&s.pixels)?)?;
        let e = error_map(&recon, &s.pixels, &s.brain_mask)?;
        let values = s.brain_mask.indices().map(|j| e.as_slice()[j].to_f64_lossy()).collect();
        per_image.push((s.subject_id.clone(), s.slice_index, values));
    }
    ErrorPool::from_images(per_image)
}

/// `tau` at the requested percentile of pooled masked errors on healthy data.
pub fn calibrate_tau<T: Scalar>(
    healthy_validation: &[Slice<T>],
    main: &ReconstructionModel<T>,
    pct: f64,
    sampler: &MaskSamplerConfig,
    seed: u64,
) -> Result<CalibrationResult> {
    main_error_pool(healthy_validation, main, sampler, seed)?.calibrate(pct)
}

/// Threshold for single-step predictions of the init model.
pub fn calibrate_init_tau<T: Scalar>(
    healthy_validation: &[Slice<T>],
    init: &ReconstructionModel<T>,
    pct: f64,
) -> Result<CalibrationResult> {
    init_error_pool(healthy_validation, init)?.calibrate(pct)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Percentile or radius, depending on the sweep.
    pub setting: f64,
    pub tau: f64,
    pub mean_dice: f64,
    pub count: usize,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean Dice of the full refinement for each calibration percentile.
pub fn sensitivity_sweep_tau<T: Scalar>(
    eval_set: &[LabeledSlice<T>],
    main: &ReconstructionModel<T>,
    init: &ReconstructionModel<T>,
    pool: &ErrorPool,
    percentiles: &[f64],
    config: &RefinementConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(percentiles.len());
    for &pct in percentiles {
        let tau = pool.tau_at(pct)?;
        let cfg = RefinementConfig { tau, ..config.clone() };
        let mut dices = Vec::with_capacity(eval_set.len());
        for item in eval_set {
            let trace = run_refinement(&item.slice, main, init, &cfg)?;
            dices.push(dice(&trace.final_segmentation, &item.lesion_mask)?);
        }
        rows.push(SweepRow {
            setting: pct,
            tau,
            mean_dice: mean(&dices),
            count: dices.len(),
        });
    }
    Ok(rows)
}

/// Trains an init model per radius on `healthy` (its own validation split
/// supplies the threshold at `pct`) and scores single-step segmentations.
pub fn sensitivity_sweep_radius<T: Scalar>(
    eval_set: &[LabeledSlice<T>],
    healthy: &[Slice<T>],
    budget: &TrainConfig,
    radii: &[f64],
    pct: f64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(radii.len());
    for &radius in radii {
        let cfg = TrainConfig { radius, ..budget.clone() };
        let (init, _) = train_init(healthy, &cfg)?;
        let (_, val) = crate::reconstruction::split_indices(healthy.len(), cfg.validation_fraction, cfg.seed);
        let val: Vec<Slice<T>> = val.iter().map(|&i| healthy[i].clone()).collect();
        let tau = calibrate_init_tau(&val, &init, pct)?.tau;
        let mut dices = Vec::with_capacity(eval_set.len());
        for item in eval_set {
            let (seg, _) = single_step_segmentation(&item.slice, &init, tau)?;
            dices.push(dice(&seg, &item.lesion_mask)?);
        }
        rows.push(SweepRow {
            setting: radius,
            tau,
            mean_dice: mean(&dices),
            count: dices.len(),
        });
    }
    Ok(rows)
}
