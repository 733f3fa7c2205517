//! Iterative mask refinement.
//!
//! Iteration 1 reconstructs the whole slice from its structural guide with
//! the init model; its error map unmasks the lowest-error fraction of the
//! brain. Every later iteration fills the current mask with fresh noise,
//! reconstructs with the main model and keeps only pixels whose error is at
//! least `tau`. The loop ends when the mask stops shrinking meaningfully,
//! becomes empty, or hits the iteration bound.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::percentile;
use crate::data_io::{error_heatmap, mask_image, save_png, Slice};
use crate::error::{check_dims, Error, Result};
use crate::frequency::{structural_guide, DEFAULT_RADIUS};
use crate::mask::SpatialMask;
use crate::plane::Plane;
use crate::reconstruction::{ModelKind, ReconstructionModel};
use crate::scalar::Scalar;
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    /// Error threshold separating confidently normal pixels.
    pub tau: f64,
    /// Percentile of the first error map below which brain pixels are unmasked.
    pub first_shrink_percentile: f64,
    /// Stop once an iteration removes less than this fraction of the brain.
    pub termination_fraction: f64,
    /// Bound on main-model passes.
    pub max_iterations: usize,
    pub radius: f64,
    /// Keys the per-iteration noise.
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            tau: 1.0,
            first_shrink_percentile: 40.0,
            termination_fraction: 0.01,
            max_iterations: 50,
            radius: DEFAULT_RADIUS,
            seed: 0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        validate_tau(self.tau)?;
        let p = self.first_shrink_percentile;
        if !(p > 0.0 && p < 100.0) {
            return Err(Error::invalid(format!("first shrink percentile {p} must lie in (0, 100)")));
        }
        let f = self.termination_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::invalid(format!("termination fraction {f} must lie in (0, 1)")));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be >= 1"));
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid(format!("radius {} must be >= 0", self.radius)));
        }
        Ok(())
    }
}

fn validate_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("tau must be positive and finite, got {tau}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Converged,
    EmptyMask,
    MaxIterations,
}

/// One refinement iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationState<T> {
    /// 1-based iteration index.
    pub index: usize,
    pub mask: SpatialMask,
    /// Network input: the guide at iteration 1, the noise-filled slice after.
    pub input: Plane<T>,
    pub reconstruction: Plane<T>,
    /// `|reconstruction - slice|` inside `mask`, zero elsewhere.
    pub error_map: Plane<T>,
    /// Threshold that produced `mask` from the previous iteration, if any.
    pub shrink_tau: Option<f64>,
}

/// Per-pixel `|reconstruction - original|` restricted to `mask`.
pub fn error_map<T: Scalar>(reconstruction: &Plane<T>, original: &Plane<T>, mask: &SpatialMask) -> Result<Plane<T>> {
    check_dims(reconstruction.dims(), original.dims())?;
    check_dims(original.dims(), mask.dims())?;
    let mut out = Plane::zeros(original.height(), original.width());
    let (r, o) = (reconstruction.as_slice(), original.as_slice());
    let dst = out.as_mut_slice();
    for i in mask.indices() {
        dst[i] = (r[i] - o[i]).abs();
    }
    Ok(out)
}

/// `mask AND (error >= tau)`.
pub fn shrink_mask<T: Scalar>(mask: &SpatialMask, error_map: &Plane<T>, tau: f64) -> Result<SpatialMask> {
    validate_tau(tau)?;
    check_dims(mask.dims(), error_map.dims())?;
    let (h, w) = mask.dims();
    let tau = T::from_f64_lossy(tau);
    Ok(SpatialMask::from_fn(h, w, |y, x| mask.get(y, x) && error_map.get(y, x) >= tau))
}

/// Keeps brain pixels whose error is at least the given percentile of the
/// error over the brain; ties with the threshold stay masked.
pub fn initial_shrink<T: Scalar>(e1: &Plane<T>, brain_mask: &SpatialMask, pct: f64) -> Result<SpatialMask> {
    check_dims(e1.dims(), brain_mask.dims())?;
    if brain_mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let values: Vec<f64> = brain_mask.indices().map(|i| e1.as_slice()[i].to_f64_lossy()).collect();
    let threshold = percentile(&values, pct)?;
    let (h, w) = brain_mask.dims();
    Ok(SpatialMask::from_fn(h, w, |y, x| {
        brain_mask.get(y, x) && e1.get(y, x).to_f64_lossy() >= threshold
    }))
}

/// True when the area removed between `prev` and `next` is below
/// `fraction * brain_area`.
pub fn has_converged(prev: &SpatialMask, next: &SpatialMask, brain_area: usize, fraction: f64) -> bool {
    let removed = prev.area().saturating_sub(next.area()) as f64;
    removed < fraction * brain_area as f64
}

/// `slice` with the masked pixels replaced by standard-normal noise keyed
/// by `(seed, iteration)`.
pub fn masked_input<T: Scalar>(slice: &Plane<T>, mask: &SpatialMask, seed: u64, iteration: usize) -> Result<Plane<T>> {
    check_dims(slice.dims(), mask.dims())?;
    let mut rng = rng_for(seed, &[0x4e01_5e, iteration as u64]);
    let mut out = slice.clone();
    let dst = out.as_mut_slice();
    for i in mask.indices() {
        let n: f64 = StandardNormal.sample(&mut rng);
        dst[i] = T::from_f64_lossy(n);
    }
    Ok(out)
}

/// Checks that a main/init model pair fits a refinement configuration.
pub fn check_models<T: Scalar>(
    main: &ReconstructionModel<T>,
    init: &ReconstructionModel<T>,
    config: &RefinementConfig,
) -> Result<()> {
    if main.kind() != ModelKind::Main {
        return Err(Error::ModelKind {
            expected: "main",
            found: main.kind().name(),
        });
    }
    if init.kind() != ModelKind::Init {
        return Err(Error::ModelKind {
            expected: "init",
            found: init.kind().name(),
        });
    }
    for m in [main, init] {
        if (m.radius() - config.radius).abs() > 1e-9 {
            return Err(Error::ModelMismatch(format!(
                "{} model was trained with radius {}, refinement uses {}",
                m.kind().name(),
                m.radius(),
                config.radius
            )));
        }
    }
    let (a, b) = (main.normalization(), init.normalization());
    if (a.mean - b.mean).abs() > 0.1 || (a.std - b.std).abs() > 0.1 {
        return Err(Error::ModelMismatch(format!(
            "normalization differs between models: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

/// A refinement in progress. Holds no model references, so it can be
/// advanced step by step, rolled back and re-stepped with a new `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementRun<T> {
    pixels: Plane<T>,
    brain_mask: SpatialMask,
    guide: Plane<T>,
    config: RefinementConfig,
    states: Vec<IterationState<T>>,
    termination: Option<TerminationReason>,
}

impl<T: Scalar> RefinementRun<T> {
    /// Runs iteration 1 (init model, whole brain) and iteration 2 (main
    /// model on the percentile-shrunk mask).
    pub fn start(
        slice: &Slice<T>,
        main: &ReconstructionModel<T>,
        init: &ReconstructionModel<T>,
        config: RefinementConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_models(main, init, &config)?;
        slice.check_normalized()?;
        let x = &slice.pixels;
        let brain = slice.brain_mask.clone();
        let guide = structural_guide(x, config.radius)?;

        let recon1 = init.reconstruct_init(&guide)?;
        let e1 = error_map(&recon1, x, &brain)?;
        let m2 = initial_shrink(&e1, &brain, config.first_shrink_percentile)?;
        let mut run = RefinementRun {
            pixels: x.clone(),
            brain_mask: brain.clone(),
            guide: guide.clone(),
            config,
            states: vec![IterationState {
                index: 1,
                mask: brain,
                input: guide,
                reconstruction: recon1,
                error_map: e1,
                shrink_tau: None,
            }],
            termination: None,
        };
        let s2 = run.iterate(main, m2, None)?;
        run.states.push(s2);
        Ok(run)
    }

    fn iterate(&self, main: &ReconstructionModel<T>, mask: SpatialMask, tau: Option<f64>) -> Result<IterationState<T>> {
        let index = self.states.len() + 1;
        let input = masked_input(&self.pixels, &mask, self.config.seed, index)?;
        let reconstruction = main.reconstruct(&input, &self.guide)?;
        let error_map = error_map(&reconstruction, &self.pixels, &mask)?;
        Ok(IterationState {
            index,
            mask,
            input,
            reconstruction,
            error_map,
            shrink_tau: tau,
        })
    }

    pub fn config(&self) -> &RefinementConfig {
        &self.config
    }

    pub fn tau(&self) -> f64 {
        self.config.tau
    }

    pub fn states(&self) -> &[IterationState<T>] {
        &self.states
    }

    pub fn last(&self) -> &IterationState<T> {
        self.states.last().expect("a run always holds two states")
    }

    pub fn termination(&self) -> Option<TerminationReason> {
        self.termination
    }

    pub fn is_terminated(&self) -> bool {
        self.termination.is_some()
    }

    pub fn pixels(&self) -> &Plane<T> {
        &self.pixels
    }

    pub fn brain_mask(&self) -> &SpatialMask {
        &self.brain_mask
    }

    pub fn guide(&self) -> &Plane<T> {
        &self.guide
    }

    /// Applies to subsequent steps only.
    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        validate_tau(tau)?;
        self.config.tau = tau;
        Ok(())
    }

    /// Advances one iteration. Returns the termination reason once the loop
    /// has ended; stepping a terminated run is an error.
    pub fn step(&mut self, main: &ReconstructionModel<T>) -> Result<Option<TerminationReason>> {
        if self.is_terminated() {
            return Err(Error::Terminated);
        }
        if self.states.len() > self.config.max_iterations {
            self.termination = Some(TerminationReason::MaxIterations);
            return Ok(self.termination);
        }
        let last = self.last();
        let next = shrink_mask(&last.mask, &last.error_map, self.config.tau)?;
        if next.is_empty() {
            self.termination = Some(TerminationReason::EmptyMask);
            return Ok(self.termination);
        }
        if has_converged(&last.mask, &next, self.brain_mask.area(), self.config.termination_fraction) {
            self.termination = Some(TerminationReason::Converged);
            return Ok(self.termination);
        }
        let state = self.iterate(main, next, Some(self.config.tau))?;
        self.states.push(state);
        Ok(None)
    }

    /// Steps until termination.
    pub fn run_to_end(&mut self, main: &ReconstructionModel<T>) -> Result<TerminationReason> {
        loop {
            if let Some(reason) = self.termination {
                return Ok(reason);
            }
            self.step(main)?;
        }
    }

    /// Truncates to iterations `1..=max(iteration, 2)` and clears termination.
    pub fn rollback(&mut self, iteration: usize) -> Result<()> {
        if iteration == 0 || iteration > self.states.len() {
            return Err(Error::OutOfRange(format!(
                "iteration {iteration} not in 1..={}",
                self.states.len()
            )));
        }
        self.states.truncate(iteration.max(2));
        self.termination = None;
        Ok(())
    }

    /// `mask_t AND (error_t >= tau)` at a 1-based iteration.
    pub fn segmentation_at(&self, iteration: usize, tau: f64) -> Result<SpatialMask> {
        let state = iteration
            .checked_sub(1)
            .and_then(|i| self.states.get(i))
            .ok_or_else(|| Error::OutOfRange(format!("iteration {iteration} not in 1..={}", self.states.len())))?;
        shrink_mask(&state.mask, &state.error_map, tau)
    }

    pub fn final_segmentation(&self) -> SpatialMask {
        self.segmentation_at(self.states.len(), self.config.tau)
            .expect("tau validated and states nonempty")
    }

    pub fn to_trace(&self) -> RefinementTrace<T> {
        RefinementTrace {
            states: self.states.clone(),
            termination_reason: self.termination,
            final_segmentation: self.final_segmentation(),
            config: self.config.clone(),
        }
    }
}

/// Record of a refinement run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace<T> {
    pub states: Vec<IterationState<T>>,
    /// `None` only for runs exported before termination.
    pub termination_reason: Option<TerminationReason>,
    pub final_segmentation: SpatialMask,
    pub config: RefinementConfig,
}

impl<T: Scalar> RefinementTrace<T> {
    pub fn last(&self) -> &IterationState<T> {
        self.states.last().expect("trace is nonempty")
    }

    pub fn mask_areas(&self) -> Vec<usize> {
        self.states.iter().map(|s| s.mask.area()).collect()
    }

    /// `mask AND (error >= tau)` at a 1-based iteration.
    pub fn segmentation_at(&self, iteration: usize, tau: f64) -> Result<SpatialMask> {
        let state = iteration
            .checked_sub(1)
            .and_then(|i| self.states.get(i))
            .ok_or_else(|| Error::OutOfRange(format!("iteration {iteration} not in 1..={}", self.states.len())))?;
        shrink_mask(&state.mask, &state.error_map, tau)
    }
}

/// One more `tau` threshold on the last iteration's error map.
pub fn final_segmentation<T: Scalar>(trace: &RefinementTrace<T>, tau: f64) -> Result<SpatialMask> {
    if trace.states.is_empty() {
        return Err(Error::invalid("trace is empty"));
    }
    trace.segmentation_at(trace.states.len(), tau)
}

/// Runs the full loop and attaches the final segmentation.
pub fn run_refinement<T: Scalar>(
    slice: &Slice<T>,
    main: &ReconstructionModel<T>,
    init: &ReconstructionModel<T>,
    config: &RefinementConfig,
) -> Result<RefinementTrace<T>> {
    let mut run = RefinementRun::start(slice, main, init, config.clone())?;
    run.run_to_end(main)?;
    Ok(run.to_trace())
}

/// Single-step prediction: threshold the init model's whole-brain error.
pub fn single_step_segmentation<T: Scalar>(
    slice: &Slice<T>,
    init: &ReconstructionModel<T>,
    tau: f64,
) -> Result<(SpatialMask, Plane<T>)> {
    let guide = init.guide(&slice.pixels)?;
    let recon = init.reconstruct_init(&guide)?;
    let e = error_map(&recon, &slice.pixels, &slice.brain_mask)?;
    Ok((shrink_mask(&slice.brain_mask, &e, tau)?, recon))
}

#[derive(Serialize)]
struct ManifestIteration {
    index: usize,
    mask_area: usize,
    shrink_tau: Option<f64>,
    error_max: f64,
    mask: String,
    error_map: String,
}

#[derive(Serialize)]
struct TraceManifest<'a> {
    config: &'a RefinementConfig,
    termination_reason: Option<TerminationReason>,
    brain_area: usize,
    final_segmentation_area: usize,
    final_segmentation: &'a str,
    iterations: Vec<ManifestIteration>,
}

/// Writes per-iteration mask and error-map PNGs plus `manifest.json`.
/// Error maps share one color scale across iterations.
pub fn export_trace<T: Scalar>(trace: &RefinementTrace<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vmax = trace
        .states
        .iter()
        .flat_map(|s| s.error_map.as_slice().iter().map(|v| v.to_f64_lossy()))
        .fold(0.0, f64::max);
    let mut iterations = Vec::with_capacity(trace.states.len());
    for s in &trace.states {
        let mask = format!("iter_{:03}_mask.png", s.index);
        let error = format!("iter_{:03}_error.png", s.index);
        save_png(mask_image(&s.mask), dir.join(&mask))?;
        save_png(error_heatmap(&s.error_map, vmax), dir.join(&error))?;
        iterations.push(ManifestIteration {
            index: s.index,
            mask_area: s.mask.area(),
            shrink_tau: s.shrink_tau,
            error_max: s.error_map.as_slice().iter().map(|v| v.to_f64_lossy()).fold(0.0, f64::max),
            mask,
            error_map: error,
        });
    }
    let seg = "final_segmentation.png";
    save_png(mask_image(&trace.final_segmentation), dir.join(seg))?;
    let manifest = TraceManifest {
        config: &trace.config,
        termination_reason: trace.termination_reason,
        brain_area: trace.states[0].mask.area(),
        final_segmentation_area: trace.final_segmentation.area(),
        final_segmentation: seg,
        iterations,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}
