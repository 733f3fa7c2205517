use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use itermask::data_io::{encode_png, error_heatmap, gray_image, mask_image, overlay_image};
use itermask::refinement::TerminationReason;
use itermask::{RefinementRun32, SpatialMask};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::models::ModelBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Stepping,
    Terminated,
    Accepted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accepted {
    pub iteration: usize,
    pub tau: f64,
    pub segmentation: SpatialMask,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct Session {
    pub id: String,
    pub model_id: String,
    pub models: Arc<ModelBundle>,
    pub run: RefinementRun32,
    pub accepted: Option<Accepted>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub model: String,
    pub status: SessionStatus,
    pub tau: f64,
    /// Percentile of healthy calibration errors matching `tau`, when the model is calibrated.
    pub tau_percentile: Option<f64>,
    pub iterations: usize,
    pub termination: Option<TerminationReason>,
    pub mask_areas: Vec<usize>,
    pub brain_area: usize,
    pub height: usize,
    pub width: usize,
    pub created_ms: u64,
    pub updated_ms: u64,
}

/// PNG renderings as base64 strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateImages {
    pub image: String,
    pub mask: String,
    pub error: String,
    pub reconstruction: String,
    pub overlay: String,
    pub segmentation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatePayload {
    pub session: SessionSummary,
    pub iteration: usize,
    pub mask_area: usize,
    pub segmentation_area: usize,
    /// Upper end of the heatmap color scale, shared by all iterations of the trace.
    pub error_scale: f64,
    pub images: StateImages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawState {
    pub iteration: usize,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
    pub input: Vec<f32>,
    pub reconstruction: Vec<f32>,
    pub error_map: Vec<f32>,
    pub segmentation: Vec<u8>,
}

fn png64(image: impl Into<image::DynamicImage>) -> ApiResult<String> {
    Ok(STANDARD.encode(encode_png(image)?))
}

fn mask_bytes(mask: &SpatialMask) -> Vec<u8> {
    mask.bits().iter().map(|&b| b as u8).collect()
}

impl Session {
    pub fn status(&self) -> SessionStatus {
        if self.accepted.is_some() {
            SessionStatus::Accepted
        } else if self.run.is_terminated() {
            SessionStatus::Terminated
        } else {
            SessionStatus::Idle
        }
    }

    pub fn ensure_open(&self) -> ApiResult<()> {
        if self.accepted.is_some() {
            return Err(ApiError::Conflict(format!("session {} is accepted and frozen", self.id)));
        }
        Ok(())
    }

    pub fn touch(&mut self) {
        self.updated_ms = now_ms();
    }

    pub fn summary(&self) -> SessionSummary {
        let tau = self.run.tau();
        let (height, width) = self.run.pixels().dims();
        SessionSummary {
            id: self.id.clone(),
            model: self.model_id.clone(),
            status: self.status(),
            tau,
            tau_percentile: self.models.calibration.as_ref().and_then(|c| c.percentile_of(tau)),
            iterations: self.run.states().len(),
            termination: self.run.termination(),
            mask_areas: self.run.states().iter().map(|s| s.mask.area()).collect(),
            brain_area: self.run.brain_mask().area(),
            height,
            width,
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
        }
    }

    /// 1-based iteration, defaulting to the latest.
    pub fn resolve_iteration(&self, iteration: Option<usize>) -> ApiResult<usize> {
        let n = self.run.states().len();
        let t = iteration.unwrap_or(n);
        if t == 0 || t > n {
            return Err(itermask::Error::OutOfRange(format!("iteration {t} not in 1..={n}")).into());
        }
        Ok(t)
    }

    fn error_scale(&self) -> f64 {
        let peak = self
            .run
            .states()
            .iter()
            .flat_map(|s| s.error_map.as_slice().iter())
            .fold(0.0f32, |m, &v| m.max(v)) as f64;
        if peak > 0.0 {
            peak
        } else {
            1.0
        }
    }

    pub fn state(&self, iteration: Option<usize>) -> ApiResult<StatePayload> {
        let t = self.resolve_iteration(iteration)?;
        let state = &self.run.states()[t - 1];
        let segmentation = self.run.segmentation_at(t, self.run.tau())?;
        let scale = self.error_scale();
        let pixels = self.run.pixels();
        Ok(StatePayload {
            session: self.summary(),
            iteration: t,
            mask_area: state.mask.area(),
            segmentation_area: segmentation.area(),
            error_scale: scale,
            images: StateImages {
                image: png64(gray_image(pixels))?,
                mask: png64(mask_image(&state.mask))?,
                error: png64(error_heatmap(&state.error_map, scale))?,
                reconstruction: png64(gray_image(&state.reconstruction))?,
                overlay: png64(overlay_image(pixels, &state.mask, 0.45)?)?,
                segmentation: png64(mask_image(&segmentation))?,
            },
        })
    }

    pub fn raw(&self, iteration: Option<usize>) -> ApiResult<RawState> {
        let t = self.resolve_iteration(iteration)?;
        let state = &self.run.states()[t - 1];
        let (height, width) = state.mask.dims();
        Ok(RawState {
            iteration: t,
            height,
            width,
            mask: mask_bytes(&state.mask),
            input: state.input.as_slice().to_vec(),
            reconstruction: state.reconstruction.as_slice().to_vec(),
            error_map: state.error_map.as_slice().to_vec(),
            segmentation: mask_bytes(&self.run.segmentation_at(t, self.run.tau())?),
        })
    }
}
