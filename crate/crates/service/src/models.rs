use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use itermask::calibration::CalibrationResult;
use itermask::reconstruction::ModelKind;
use itermask::Model32;

use crate::error::{ApiError, ApiResult};

pub const MAIN_CHECKPOINT: &str = "main.ckpt";
pub const INIT_CHECKPOINT: &str = "init.ckpt";
pub const CALIBRATION_FILE: &str = "calibration.json";

/// A main/init model pair plus its optional threshold calibration.
#[derive(Debug)]
pub struct ModelBundle {
    pub main: Model32,
    pub init: Model32,
    pub calibration: Option<CalibrationResult>,
}

impl ModelBundle {
    pub fn new(main: Model32, init: Model32, calibration: Option<CalibrationResult>) -> ApiResult<Self> {
        if main.kind() != ModelKind::Main || init.kind() != ModelKind::Init {
            return Err(ApiError::BadRequest("bundle needs one main and one init model".into()));
        }
        Ok(ModelBundle { main, init, calibration })
    }

    pub fn load(dir: &Path) -> ApiResult<Self> {
        let main = Model32::load(dir.join(MAIN_CHECKPOINT))?;
        let init = Model32::load(dir.join(INIT_CHECKPOINT))?;
        let cal_path = dir.join(CALIBRATION_FILE);
        let calibration = if cal_path.exists() {
            let text = std::fs::read_to_string(&cal_path)
                .map_err(|e| ApiError::Internal(format!("{}: {e}", cal_path.display())))?;
            Some(serde_json::from_str(&text).map_err(itermask::Error::from)?)
        } else {
            None
        };
        ModelBundle::new(main, init, calibration)
    }
}

/// Models by id: registered in memory or loaded lazily from `dir/<id>/`.
#[derive(Debug, Default)]
pub struct ModelStore {
    dir: Option<PathBuf>,
    loaded: RwLock<HashMap<String, Arc<ModelBundle>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl ModelStore {
    pub fn new(dir: Option<PathBuf>) -> Self {
        ModelStore {
            dir,
            loaded: RwLock::new(HashMap::new()),
        }
    }

    pub fn insert(&self, id: impl Into<String>, bundle: ModelBundle) {
        self.loaded.write().expect("model lock").insert(id.into(), Arc::new(bundle));
    }

    pub fn get(&self, id: &str) -> ApiResult<Arc<ModelBundle>> {
        if let Some(b) = self.loaded.read().expect("model lock").get(id) {
            return Ok(b.clone());
        }
        let missing = || ApiError::NotFound(format!("model {id:?}"));
        if !valid_id(id) {
            return Err(missing());
        }
        let dir = self.dir.as_ref().map(|d| d.join(id)).filter(|d| d.join(MAIN_CHECKPOINT).exists());
        let dir = dir.ok_or_else(missing)?;
        let bundle = Arc::new(ModelBundle::load(&dir)?);
        self.loaded
            .write()
            .expect("model lock")
            .insert(id.to_string(), bundle.clone());
        Ok(bundle)
    }

    /// Ids registered in memory or present on disk, sorted.
    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.loaded.read().expect("model lock").keys().cloned().collect();
        if let Some(entries) = self.dir.as_ref().and_then(|d| std::fs::read_dir(d).ok()) {
            for e in entries.flatten() {
                let name = e.file_name().to_string_lossy().into_owned();
                if valid_id(&name) && e.path().join(MAIN_CHECKPOINT).exists() && !ids.contains(&name) {
                    ids.push(name);
                }
            }
        }
        ids.sort();
        ids
    }
}
