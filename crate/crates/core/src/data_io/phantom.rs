use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{normalize_zscore, LabeledSlice, Slice};
use crate::error::{Error, Result};
use crate::mask::SpatialMask;
use crate::plane::Plane;
use crate::scalar::Scalar;

/// Synthetic brain-like slice parameters.
///
/// Anatomy is an elliptical brain with a wavy cortical ribbon, a few dark
/// CSF-like ellipses, fine correlated texture and a smooth multiplicative
/// bias field. An optional lesion is one bright rotated ellipse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of dark inner structures.
    pub structure_count: (usize, usize),
    /// Semi-axis range of inner structures, as a fraction of the brain semi-axes.
    pub structure_scale: (f64, f64),
    /// Standard deviation of the correlated texture, in white-matter units.
    pub texture_noise: f64,
    /// Peak relative amplitude of the smooth bias field.
    pub bias_field: f64,
    pub lesion: bool,
    /// Lesion intensity offset range, in white-matter units.
    pub lesion_intensity: (f64, f64),
    /// Lesion radius range in pixels; the ellipse area is about `pi * r^2`.
    pub lesion_radius: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            height: 64,
            width: 64,
            structure_count: (2, 4),
            structure_scale: (0.08, 0.22),
            texture_noise: 0.04,
            bias_field: 0.25,
            lesion: false,
            lesion_intensity: (0.5, 0.9),
            lesion_radius: (3.0, 8.0),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("phantom spec: {m}")));
        if self.height < 8 || self.width < 8 {
            return bad("image must be at least 8x8");
        }
        if self.structure_count.0 > self.structure_count.1 {
            return bad("structure_count range is reversed");
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.structure_scale) || self.structure_scale.0 <= 0.0 || self.structure_scale.1 >= 1.0 {
            return bad("structure_scale must lie in (0, 1)");
        }
        if !(self.texture_noise >= 0.0) || !(0.0..1.0).contains(&self.bias_field) {
            return bad("texture_noise must be >= 0 and bias_field in [0, 1)");
        }
        if !ordered(self.lesion_intensity) {
            return bad("lesion_intensity range is invalid");
        }
        let limit = self.height.min(self.width) as f64 / 4.0;
        if !ordered(self.lesion_radius) || self.lesion_radius.0 <= 0.0 || self.lesion_radius.1 >= limit {
            return bad("lesion radius must be positive and below a quarter of the image size");
        }
        Ok(())
    }

    /// The same anatomy parameters with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec { seed, ..self.clone() }
    }

    pub fn with_lesion(&self, lesion: bool) -> Self {
        PhantomSpec { lesion, ..self.clone() }
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cy: f64, cx: f64, ay: f64, ax: f64, angle: f64) -> Self {
        Ellipse {
            cy,
            cx,
            ay,
            ax,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Normalized radius and polar angle of a point in the ellipse frame.
    fn polar(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let v = (dy * self.cos - dx * self.sin) / self.ay;
        let u = (dy * self.sin + dx * self.cos) / self.ax;
        ((u * u + v * v).sqrt(), v.atan2(u))
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        self.polar(y, x).0 <= 1.0
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Gaussian-blurred white noise rescaled to unit standard deviation.
fn correlated_noise<R: Rng>(h: usize, w: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let white: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let blur = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    // replicate edge pixels
                    let sy = sy.clamp(0, h as isize - 1) as usize;
                    let sx = sx.clamp(0, w as isize - 1) as usize;
                    acc += kv * src[sy * w + sx];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let smooth = blur(&blur(&white, true), false);
    let n = smooth.len() as f64;
    let mean = smooth.iter().sum::<f64>() / n;
    let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    smooth.iter().map(|v| (v - mean) / std.max(1e-12)).collect()
}

const WHITE_MATTER: f64 = 1.0;
const GREY_MATTER: f64 = 0.65;
const CSF: f64 = 0.3;

/// Deterministic per `spec.seed`.
pub fn generate_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<LabeledSlice<T>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let brain_shape = Ellipse::new(
        hf / 2.0 + uniform(&mut rng, (-0.03, 0.03)) * hf,
        wf / 2.0 + uniform(&mut rng, (-0.03, 0.03)) * wf,
        hf * uniform(&mut rng, (0.36, 0.42)),
        wf * uniform(&mut rng, (0.30, 0.37)),
        uniform(&mut rng, (-0.2, 0.2)),
    );

    // cortical ribbon with a gyral ripple
    let ribbon = uniform(&mut rng, (0.76, 0.84));
    let ripple_amp = uniform(&mut rng, (0.02, 0.05));
    let ripple_freq = rng.random_range(5..=9) as f64;
    let ripple_phase = uniform(&mut rng, (0.0, 2.0 * PI));

    let n_struct = rng.random_range(spec.structure_count.0..=spec.structure_count.1);
    let mut structures = Vec::with_capacity(n_struct);
    for _ in 0..n_struct {
        let rho = uniform(&mut rng, (0.0, 0.5));
        let phi = uniform(&mut rng, (0.0, 2.0 * PI));
        let (cy, cx) = (
            brain_shape.cy + rho * brain_shape.ay * phi.sin(),
            brain_shape.cx + rho * brain_shape.ax * phi.cos(),
        );
        structures.push(Ellipse::new(
            cy,
            cx,
            brain_shape.ay * uniform(&mut rng, spec.structure_scale),
            brain_shape.ax * uniform(&mut rng, spec.structure_scale),
            uniform(&mut rng, (0.0, PI)),
        ));
    }

    let texture = correlated_noise(h, w, 0.8, &mut rng);
    let bias_coeffs: [f64; 5] = std::array::from_fn(|_| uniform(&mut rng, (-1.0, 1.0)));

    let brain = SpatialMask::from_fn(h, w, |y, x| brain_shape.contains(y as f64, x as f64));
    if brain.is_empty() {
        return Err(Error::Internal("phantom brain rasterized empty".into()));
    }

    let lesion = if spec.lesion {
        Some(place_lesion(spec, &brain_shape, &brain, &mut rng))
    } else {
        None
    };
    let lesion_offset = uniform(&mut rng, spec.lesion_intensity);
    let lesion_mask = match &lesion {
        Some(e) => SpatialMask::from_fn(h, w, |y, x| brain.get(y, x) && e.contains(y as f64, x as f64)),
        None => SpatialMask::empty(h, w),
    };

    let mut raw = Plane::<f64>::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if !brain.get(y, x) {
                continue;
            }
            let (yf, xf) = (y as f64, x as f64);
            let (rho, phi) = brain_shape.polar(yf, xf);
            let edge = ribbon + ripple_amp * (ripple_freq * phi + ripple_phase).sin();
            let mut v = if rho > edge { GREY_MATTER } else { WHITE_MATTER };
            if structures.iter().any(|s| s.contains(yf, xf)) {
                v = CSF;
            }
            if lesion_mask.get(y, x) {
                v += lesion_offset;
            }
            v += spec.texture_noise * texture[y * w + x];
            let (u, s) = (2.0 * yf / hf - 1.0, 2.0 * xf / wf - 1.0);
            let c = &bias_coeffs;
            let field = (c[0] * u + c[1] * s + 0.5 * (c[2] * u * u + c[3] * s * s + c[4] * u * s)) / 2.0;
            v *= 1.0 + spec.bias_field * field.clamp(-1.0, 1.0);
            raw.set(y, x, v);
        }
    }

    let pixels = normalize_zscore(&raw, &brain)?.cast::<T>();
    let slice = Slice::new(pixels, brain, format!("phantom-{}", spec.seed), 0, "synthetic")?;
    Ok(LabeledSlice { slice, lesion_mask })
}

fn place_lesion<R: Rng>(spec: &PhantomSpec, brain_shape: &Ellipse, brain: &SpatialMask, rng: &mut R) -> Ellipse {
    let r = uniform(rng, spec.lesion_radius);
    let aspect = uniform(rng, (0.75, 1.0 / 0.75));
    let (ay, ax) = (r * aspect, r / aspect);
    let angle = uniform(rng, (0.0, PI));
    let mut candidate = Ellipse::new(brain_shape.cy, brain_shape.cx, ay, ax, angle);
    // prefer a placement fully inside the brain, away from the rim
    for _ in 0..64 {
        let rho = uniform(rng, (0.0, 0.65));
        let phi = uniform(rng, (0.0, 2.0 * PI));
        candidate = Ellipse::new(
            brain_shape.cy + rho * brain_shape.ay * phi.sin(),
            brain_shape.cx + rho * brain_shape.ax * phi.cos(),
            ay,
            ax,
            angle,
        );
        let extent = r.max(ay).max(ax).ceil() as isize + 1;
        let inside = (-extent..=extent).all(|dy| {
            (-extent..=extent).all(|dx| {
                let (y, x) = (candidate.cy + dy as f64, candidate.cx + dx as f64);
                if !candidate.contains(y, x) {
                    return true;
                }
                let (yi, xi) = (y.round() as isize, x.round() as isize);
                yi >= 0
                    && xi >= 0
                    && (yi as usize) < brain.height()
                    && (xi as usize) < brain.width()
                    && brain_shape.polar(y, x).0 <= 0.9
            })
        });
        if inside {
            break;
        }
    }
    candidate
}
