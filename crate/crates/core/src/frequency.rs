//! Fourier decomposition and high-pass amplitude masking.
//!
//! The spectrum is stored center-shifted: the DC bin sits at
//! `(height / 2, width / 2)`, so a radial filter is one Euclidean distance
//! from that bin. The structural guide keeps every phase value and zeroes
//! amplitude strictly inside the filter radius, leaving only edges and fine
//! texture.

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{check_dims, Error, Result};
use crate::plane::Plane;
use crate::scalar::{lit, Scalar};

/// Radius used for the structural guide unless configured otherwise.
pub const DEFAULT_RADIUS: f64 = 15.0;

/// Amplitude and phase of a center-shifted 2D DFT.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyComponents<T> {
    pub amplitude: Plane<T>,
    /// Radians in `(-pi, pi]`.
    pub phase: Plane<T>,
}

impl<T: Scalar> FrequencyComponents<T> {
    pub fn height(&self) -> usize {
        self.amplitude.height()
    }

    pub fn width(&self) -> usize {
        self.amplitude.width()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.amplitude.dims()
    }

    /// Spectral coordinates of the DC bin.
    pub fn center(&self) -> (usize, usize) {
        spectrum_center(self.height(), self.width())
    }

    fn validate(&self) -> Result<()> {
        check_dims(self.amplitude.dims(), self.phase.dims())?;
        self.amplitude.ensure_finite()?;
        self.phase.ensure_finite()?;
        if self.amplitude.as_slice().iter().any(|&a| a < T::zero()) {
            return Err(Error::invalid("negative amplitude"));
        }
        Ok(())
    }
}

/// Hard-edged radial suppression disk around the spectrum center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HighPassFilter {
    pub radius: f64,
    pub center: (usize, usize),
}

impl HighPassFilter {
    /// Filter centered on the DC bin of a `height x width` spectrum.
    pub fn centered(radius: f64, height: usize, width: usize) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::invalid(format!(
                "radius must be finite and >= 0, got {radius}"
            )));
        }
        Ok(HighPassFilter {
            radius,
            center: spectrum_center(height, width),
        })
    }

    /// Whether the bin at `(u, v)` is zeroed: distance strictly below the radius.
    #[inline]
    pub fn suppresses(&self, u: usize, v: usize) -> bool {
        let du = u as f64 - self.center.0 as f64;
        let dv = v as f64 - self.center.1 as f64;
        (du * du + dv * dv).sqrt() < self.radius
    }
}

pub fn spectrum_center(height: usize, width: usize) -> (usize, usize) {
    (height / 2, width / 2)
}

/// Center-shifted forward DFT of a real plane, split into amplitude and phase.
pub fn decompose<T: Scalar>(slice: &Plane<T>) -> Result<FrequencyComponents<T>> {
    let (h, w) = slice.dims();
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "slice must be at least 2x2, got {h}x{w}"
        )));
    }
    slice.ensure_finite()?;

    let mut buf: Vec<Complex<T>> = slice
        .as_slice()
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .collect();
    fft2(&mut buf, h, w, FftDirection::Forward);
    let shifted = shift(&buf, h, w, true);

    let pi = T::PI();
    let mut amplitude = Vec::with_capacity(h * w);
    let mut phase = Vec::with_capacity(h * w);
    for c in shifted {
        amplitude.push(c.norm());
        let mut p = c.im.atan2(c.re);
        if p <= -pi {
            p = pi;
        }
        phase.push(p);
    }
    Ok(FrequencyComponents {
        amplitude: Plane::from_vec(h, w, amplitude)?,
        phase: Plane::from_vec(h, w, phase)?,
    })
}

/// Zero the amplitude of every bin closer than `filter.radius` to its center.
/// The phase plane is copied unchanged.
pub fn apply_high_pass<T: Scalar>(
    components: &FrequencyComponents<T>,
    filter: &HighPassFilter,
) -> Result<FrequencyComponents<T>> {
    check_dims(components.amplitude.dims(), components.phase.dims())?;
    let expected_center = components.center();
    if filter.center != expected_center {
        return Err(Error::invalid(format!(
            "filter center {:?} does not match spectrum center {:?}",
            filter.center, expected_center
        )));
    }
    let mut amplitude = components.amplitude.clone();
    for u in 0..components.height() {
        for v in 0..components.width() {
            if filter.suppresses(u, v) {
                amplitude.set(u, v, T::zero());
            }
        }
    }
    Ok(FrequencyComponents {
        amplitude,
        phase: components.phase.clone(),
    })
}

/// Inverse transform of `amplitude * exp(j * phase)`; returns the real part.
///
/// Fails if the imaginary residue is larger than rounding can explain, which
/// means the components did not come from a real image.
pub fn recompose<T: Scalar>(components: &FrequencyComponents<T>) -> Result<Plane<T>> {
    components.validate()?;
    let (h, w) = components.dims();
    let shifted: Vec<Complex<T>> = components
        .amplitude
        .as_slice()
        .iter()
        .zip(components.phase.as_slice())
        .map(|(&a, &p)| Complex::from_polar(a, p))
        .collect();
    let mut buf = shift(&shifted, h, w, false);
    fft2(&mut buf, h, w, FftDirection::Inverse);

    let scale = T::one() / T::from_usize(h * w).unwrap();
    let mut peak = T::zero();
    let mut residue = T::zero();
    let mut out = Vec::with_capacity(h * w);
    for c in &buf {
        let re = c.re * scale;
        let im = c.im * scale;
        peak = peak.max(re.abs());
        residue = residue.max(im.abs());
        out.push(re);
    }
    let tolerance = lit::<T>(1e-6).max(T::epsilon() * lit(256.0)) * (T::one() + peak);
    if residue > tolerance {
        return Err(Error::Internal(format!(
            "inverse transform left imaginary residue {residue} (tolerance {tolerance})"
        )));
    }
    Plane::from_vec(h, w, out)
}

/// High-frequency structural guide: decompose, suppress low-frequency
/// amplitude within `radius`, recompose.
pub fn structural_guide<T: Scalar>(slice: &Plane<T>, radius: f64) -> Result<Plane<T>> {
    let components = decompose(slice)?;
    let filter = HighPassFilter::centered(radius, slice.height(), slice.width())?;
    let filtered = apply_high_pass(&components, &filter)?;
    recompose(&filtered)
}

fn fft2<T: Scalar>(buf: &mut [Complex<T>], h: usize, w: usize, direction: FftDirection) {
    let mut planner = FftPlanner::<T>::new();
    let rows = planner.plan_fft(w, direction);
    rows.process(buf);

    let cols = planner.plan_fft(h, direction);
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        cols.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// `forward = true` moves DC from (0,0) to the center; `false` undoes it.
fn shift<T: Copy>(src: &[T], h: usize, w: usize, forward: bool) -> Vec<T> {
    let (cy, cx) = spectrum_center(h, w);
    let mut out = src.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = ((y + cy) % h, (x + cx) % w);
            if forward {
                out[sy * w + sx] = src[y * w + x];
            } else {
                out[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}
