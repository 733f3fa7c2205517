use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::phantom::{generate_phantom, PhantomSpec};
use super::render::{mask_image, save_png};
use super::volume::{load_volume, save_plane_volume};
use super::{LabeledSlice, Slice};
use crate::error::{Error, Result};
use crate::mask::SpatialMask;
use crate::plane::Plane;
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub seed: u64,
    pub image: String,
    pub brain_mask: String,
    pub lesion_mask: String,
    pub brain_area: usize,
    pub lesion_area: usize,
}

/// Index of a phantom dataset directory. Paths are relative to the directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub entries: Vec<DatasetEntry>,
}

/// Generates `count` phantoms with seeds `spec.seed, spec.seed + 1, ...`
/// and writes images (NIfTI), masks (PNG) and `manifest.json` into `dir`.
pub fn write_phantom_dataset(dir: impl AsRef<Path>, spec: &PhantomSpec, count: usize) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let seed = spec.seed.wrapping_add(i as u64);
        let p = generate_phantom::<f32>(&spec.with_seed(seed))?;
        let id = format!("phantom_{i:05}");
        let entry = DatasetEntry {
            image: format!("{id}.nii.gz"),
            brain_mask: format!("{id}_brain.png"),
            lesion_mask: format!("{id}_lesion.png"),
            brain_area: p.slice.brain_mask.area(),
            lesion_area: p.lesion_mask.area(),
            id,
            seed,
        };
        save_plane_volume(dir.join(&entry.image), &[&p.slice.pixels], None)?;
        save_png(mask_image(&p.slice.brain_mask), dir.join(&entry.brain_mask))?;
        save_png(mask_image(&p.lesion_mask), dir.join(&entry.lesion_mask))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn load_mask(path: &Path) -> Result<SpatialMask> {
    let img = image::open(path)
        .map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(SpatialMask::from_fn(h as usize, w as usize, |y, x| {
        img.get_pixel(x as u32, y as u32)[0] > 127
    }))
}

/// Reads a directory written by [`write_phantom_dataset`].
pub fn load_phantom_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<LabeledSlice<T>>)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let resolve = |rel: &str| -> PathBuf { dir.join(rel) };
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let vol = load_volume(resolve(&e.image))?;
        let (h, w, d) = vol.data.dim();
        if d != 1 {
            return Err(Error::Corrupt {
                path: resolve(&e.image),
                reason: format!("expected a single slice, found depth {d}"),
            });
        }
        let pixels = Plane::<T>::from_fn(h, w, |y, x| T::from_f64_lossy(vol.data[[y, x, 0]] as f64));
        let brain = load_mask(&resolve(&e.brain_mask))?;
        let lesion = load_mask(&resolve(&e.lesion_mask))?;
        let slice = Slice::new(pixels, brain, e.id.clone(), 0, "synthetic")?;
        crate::error::check_dims(slice.dims(), lesion.dims())?;
        out.push(LabeledSlice {
            slice,
            lesion_mask: lesion,
        });
    }
    Ok((manifest, out))
}
