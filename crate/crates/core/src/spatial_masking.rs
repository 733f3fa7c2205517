//! Random training masks and noise fill.
//!
//! A training mask is a union of square patches whose top-left corners are
//! drawn from an isotropic Gaussian centered on a random brain pixel, then
//! clipped to the image and intersected with the brain.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::mask::SpatialMask;
use crate::plane::Plane;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSamplerConfig {
    pub patch_side_lengths: Vec<usize>,
    pub patch_count: usize,
    /// Gaussian spread bounds in pixels. `None` means `(H/16, H/4)`.
    pub sigma_range: Option<(f64, f64)>,
    pub rng_seed: u64,
}

impl Default for MaskSamplerConfig {
    fn default() -> Self {
        MaskSamplerConfig {
            patch_side_lengths: vec![4, 8, 16],
            patch_count: 1000,
            sigma_range: None,
            rng_seed: 0,
        }
    }
}

impl MaskSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side_lengths.is_empty() || self.patch_side_lengths.contains(&0) {
            return Err(Error::invalid("patch side lengths must be nonempty and >= 1"));
        }
        if self.patch_count == 0 {
            return Err(Error::invalid("patch_count must be >= 1"));
        }
        if let Some((lo, hi)) = self.sigma_range {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::invalid(format!("bad sigma range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    pub fn sigma_bounds(&self, height: usize) -> (f64, f64) {
        self.sigma_range
            .unwrap_or((height as f64 / 16.0, height as f64 / 4.0))
    }
}

/// Sample a random training mask inside `brain_mask`.
pub fn sample_training_mask<R: Rng + ?Sized>(
    brain_mask: &SpatialMask,
    config: &MaskSamplerConfig,
    rng: &mut R,
) -> Result<SpatialMask> {
    Ok(sample_mask_draw(brain_mask, config, rng)?.mask)
}

/// A training mask together with the Gaussian it was drawn around.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDraw {
    pub mask: SpatialMask,
    /// `(row, column)` of the sampled center pixel.
    pub center: (usize, usize),
    pub sigma: f64,
}

/// Like [`sample_training_mask`], also reporting the sampled center and spread.
pub fn sample_mask_draw<R: Rng + ?Sized>(
    brain_mask: &SpatialMask,
    config: &MaskSamplerConfig,
    rng: &mut R,
) -> Result<MaskDraw> {
    config.validate()?;
    if brain_mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (h, w) = brain_mask.dims();

    let pick = rng.random_range(0..brain_mask.area());
    let center = brain_mask.indices().nth(pick).expect("pick < area");
    let (mu_y, mu_x) = ((center / w) as f64, (center % w) as f64);

    let (lo, hi) = config.sigma_bounds(h);
    let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };

    // Unnormalized placement weights peak at exactly 1 on the center pixel
    // (mu is a grid point), so a vanishing sigma keeps all mass there.
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut cdf = Vec::with_capacity(h * w);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - mu_y).powi(2) + (x as f64 - mu_x).powi(2);
            total += (-d2 * inv).exp();
            cdf.push(total);
        }
    }

    let mut mask = SpatialMask::empty(h, w);
    for _ in 0..config.patch_count {
        let side = config.patch_side_lengths[rng.random_range(0..config.patch_side_lengths.len())];
        let u: f64 = rng.random::<f64>() * total;
        let idx = cdf.partition_point(|&c| c <= u).min(h * w - 1);
        let (py, px) = (idx / w, idx % w);
        for y in py..(py + side).min(h) {
            for x in px..(px + side).min(w) {
                if brain_mask.get(y, x) {
                    mask.set(y, x, true);
                }
            }
        }
    }
    Ok(MaskDraw {
        mask,
        center: (center / w, center % w),
        sigma,
    })
}

/// `mask * noise + (1 - mask) * slice` with standard-normal noise.
pub fn apply_mask<T: Scalar, R: Rng + ?Sized>(
    slice: &Plane<T>,
    mask: &SpatialMask,
    rng: &mut R,
) -> Result<Plane<T>> {
    check_dims(slice.dims(), mask.dims())?;
    let mut out = slice.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        if mask.get_index(i) {
            let n: f64 = StandardNormal.sample(rng);
            *v = T::from_f64_lossy(n);
        }
    }
    Ok(out)
}
