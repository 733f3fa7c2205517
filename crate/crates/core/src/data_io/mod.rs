//! Slices, normalization, brain masks, volume I/O and synthetic phantoms.

mod dataset;
mod phantom;
mod render;
mod volume;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::mask::SpatialMask;
use crate::plane::Plane;
use crate::scalar::Scalar;

pub use dataset::{load_phantom_dataset, write_phantom_dataset, DatasetEntry, DatasetManifest};
pub use phantom::{generate_phantom, PhantomSpec};
pub use render::{encode_png, error_heatmap, gray_image, mask_image, overlay_image, save_png};
pub use volume::{extract_slices, load_volume, save_mask_volume, save_plane_volume, Axis, Volume};

/// Accepted range for the brain mean of a normalized slice.
pub const NORMALIZED_MEAN_TOLERANCE: f64 = 0.5;
/// Accepted range for the brain standard deviation of a normalized slice.
pub const NORMALIZED_STD_RANGE: (f64, f64) = (0.5, 1.5);

/// One z-scored 2D image with its brain region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slice<T> {
    pub pixels: Plane<T>,
    pub brain_mask: SpatialMask,
    pub subject_id: String,
    pub slice_index: usize,
    pub modality: String,
}

impl<T: Scalar> Slice<T> {
    pub fn new(
        pixels: Plane<T>,
        brain_mask: SpatialMask,
        subject_id: impl Into<String>,
        slice_index: usize,
        modality: impl Into<String>,
    ) -> Result<Self> {
        check_dims(pixels.dims(), brain_mask.dims())?;
        pixels.ensure_finite()?;
        if brain_mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(Slice {
            pixels,
            brain_mask,
            subject_id: subject_id.into(),
            slice_index,
            modality: modality.into(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }

    /// Rejects slices whose brain statistics are far from zero mean, unit variance.
    pub fn check_normalized(&self) -> Result<()> {
        let (mean, std) = brain_stats(&self.pixels, &self.brain_mask)?;
        let (lo, hi) = NORMALIZED_STD_RANGE;
        if mean.abs() > NORMALIZED_MEAN_TOLERANCE || !(lo..=hi).contains(&std) {
            return Err(Error::NotNormalized(format!(
                "{}#{}: brain mean {mean:.3}, std {std:.3}",
                self.subject_id, self.slice_index
            )));
        }
        Ok(())
    }
}

/// Derives the brain mask of an unnormalized plane and z-scores it.
pub fn slice_from_raw<T: Scalar>(
    raw: &Plane<T>,
    subject_id: impl Into<String>,
    slice_index: usize,
    modality: impl Into<String>,
) -> Result<Slice<T>> {
    raw.ensure_finite()?;
    let brain = derive_brain_mask(raw);
    if brain.is_empty() {
        return Err(Error::EmptyMask);
    }
    let pixels = normalize_zscore(raw, &brain)?;
    Slice::new(pixels, brain, subject_id, slice_index, modality)
}

/// A slice with its ground-truth lesion mask (empty when healthy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSlice<T> {
    pub slice: Slice<T>,
    pub lesion_mask: SpatialMask,
}

/// Mean and population standard deviation over the masked pixels.
pub fn brain_stats<T: Scalar>(pixels: &Plane<T>, brain_mask: &SpatialMask) -> Result<(f64, f64)> {
    check_dims(pixels.dims(), brain_mask.dims())?;
    if brain_mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let values = pixels.as_slice();
    let n = brain_mask.area() as f64;
    let mean = brain_mask.indices().map(|i| values[i].to_f64_lossy()).sum::<f64>() / n;
    let var = brain_mask
        .indices()
        .map(|i| (values[i].to_f64_lossy() - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok((mean, var.sqrt()))
}

/// Z-score over the brain; background pixels become 0.
pub fn normalize_zscore<T: Scalar>(pixels: &Plane<T>, brain_mask: &SpatialMask) -> Result<Plane<T>> {
    pixels.ensure_finite()?;
    let (mean, std) = brain_stats(pixels, brain_mask)?;
    let scale = mean.abs().max(1.0);
    if !(std > 1e-12 * scale) {
        return Err(Error::ZeroVariance);
    }
    let mut out = Plane::zeros(pixels.height(), pixels.width());
    let src = pixels.as_slice();
    let dst = out.as_mut_slice();
    for i in brain_mask.indices() {
        dst[i] = T::from_f64_lossy((src[i].to_f64_lossy() - mean) / std);
    }
    Ok(out)
}

/// Nonzero support, reduced to its largest 4-connected component with
/// enclosed holes filled.
pub fn derive_brain_mask<T: Scalar>(pixels: &Plane<T>) -> SpatialMask {
    let (h, w) = pixels.dims();
    let support = SpatialMask::from_fn(h, w, |y, x| pixels.get(y, x) != T::zero());
    let largest = largest_component(&support);
    fill_holes(&largest)
}

fn neighbours(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (i / w, i % w);
    let up = (y > 0).then(|| i - w);
    let down = (y + 1 < h).then(|| i + w);
    let left = (x > 0).then(|| i - 1);
    let right = (x + 1 < w).then(|| i + 1);
    [up, down, left, right].into_iter().flatten()
}

/// Labels the 4-connected components of `mask`; returns per-pixel labels
/// (0 = unset) and component sizes indexed by `label - 1`.
fn label_components(mask: &SpatialMask) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = mask.dims();
    let mut labels = vec![0usize; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in mask.indices() {
        if labels[start] != 0 {
            continue;
        }
        let label = sizes.len() + 1;
        let mut size = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours(i, h, w) {
                if mask.get_index(j) && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

fn largest_component(mask: &SpatialMask) -> SpatialMask {
    let (h, w) = mask.dims();
    let (labels, sizes) = label_components(mask);
    // ties resolve to the component found first in raster order
    let best = match sizes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) {
        Some((i, _)) => i + 1,
        None => return SpatialMask::empty(h, w),
    };
    SpatialMask::from_fn(h, w, |y, x| labels[y * w + x] == best)
}

fn fill_holes(mask: &SpatialMask) -> SpatialMask {
    let (h, w) = mask.dims();
    let background = mask.complement();
    let (labels, _) = label_components(&background);
    let mut touches_border = vec![false; h * w + 1];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                touches_border[labels[y * w + x]] = true;
            }
        }
    }
    SpatialMask::from_fn(h, w, |y, x| {
        let l = labels[y * w + x];
        l == 0 || !touches_border[l]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> SpatialMask {
        SpatialMask::from_fn(h, w, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
    }

    #[test]
    fn zscore_three_pixel_case() {
        let p = Plane::<f64>::from_vec(1, 4, vec![1.0, 2.0, 3.0, 9.0]).unwrap();
        let brain = SpatialMask::from_fn(1, 4, |_, x| x < 3);
        // mean 2, population std sqrt(2/3)
        let out = normalize_zscore(&p, &brain).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        assert!((out.get(0, 0) + 1.0 / s).abs() < 1e-12);
        assert_eq!(out.get(0, 1), 0.0);
        assert!((out.get(0, 2) - 1.0 / s).abs() < 1e-12);
        assert_eq!(out.get(0, 3), 0.0);
    }

    #[test]
    fn zscore_idempotent_and_rejects_constant() {
        let brain = disk(16, 16, 8.0, 8.0, 6.0);
        let p = Plane::<f64>::from_fn(16, 16, |y, x| if brain.get(y, x) { (y * x) as f64 * 0.3 + 2.0 } else { 0.0 });
        let once = normalize_zscore(&p, &brain).unwrap();
        let (m, s) = brain_stats(&once, &brain).unwrap();
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        let twice = normalize_zscore(&once, &brain).unwrap();
        assert!(twice.max_abs_diff(&once) < 1e-6);
        let flat = Plane::<f64>::filled(16, 16, 3.0);
        assert!(matches!(normalize_zscore(&flat, &brain), Err(Error::ZeroVariance)));
        assert!(matches!(
            normalize_zscore(&flat, &SpatialMask::empty(16, 16)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn brain_mask_fills_holes_and_keeps_largest() {
        let (h, w) = (24, 24);
        let big = disk(h, w, 10.0, 10.0, 7.0);
        let hole = disk(h, w, 10.0, 10.0, 2.0);
        let speck = SpatialMask::from_fn(h, w, |y, x| y == 22 && x == 22);
        let p = Plane::<f32>::from_fn(h, w, |y, x| {
            if (big.get(y, x) && !hole.get(y, x)) || speck.get(y, x) {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(derive_brain_mask(&p), big);
        assert!(derive_brain_mask(&Plane::<f32>::zeros(8, 8)).is_empty());
        let solid = Plane::<f32>::from_fn(h, w, |y, x| if big.get(y, x) { 2.0 } else { 0.0 });
        assert_eq!(derive_brain_mask(&solid), big);
    }

    #[test]
    fn concave_notch_touching_border_is_not_filled() {
        // a U shape open to the top border keeps its notch empty
        let p = Plane::<f64>::from_fn(8, 8, |y, x| {
            let wall = (1..7).contains(&x) && y < 7;
            let notch = (3..5).contains(&x) && y < 5;
            if wall && !notch { 1.0 } else { 0.0 }
        });
        let m = derive_brain_mask(&p);
        assert!(!m.get(0, 3) && !m.get(4, 4));
        assert!(m.get(6, 3));
    }

    #[test]
    fn slice_normalization_check() {
        let brain = disk(16, 16, 8.0, 8.0, 6.0);
        let raw = Plane::<f64>::from_fn(16, 16, |y, x| if brain.get(y, x) { (y + 2 * x) as f64 } else { 0.0 });
        let s = Slice::new(raw.clone(), brain.clone(), "s", 0, "t1").unwrap();
        assert!(matches!(s.check_normalized(), Err(Error::NotNormalized(_))));
        let z = normalize_zscore(&raw, &brain).unwrap();
        Slice::new(z, brain, "s", 0, "t1").unwrap().check_normalized().unwrap();
    }
}
