use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Result};
use crate::plane::Plane;
use crate::scalar::Scalar;

/// Binary 2D mask. `true` marks a masked (hidden) pixel.
///
/// The masked-pixel count is cached and kept in sync by every mutator.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub struct SpatialMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    area: usize,
}

impl SpatialMask {
    pub fn empty(height: usize, width: usize) -> Self {
        SpatialMask {
            height,
            width,
            bits: vec![false; height * width],
            area: 0,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        SpatialMask {
            height,
            width,
            bits: vec![true; height * width],
            area: height * width,
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(crate::Error::invalid(format!(
                "mask of {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        let area = bits.iter().filter(|&&b| b).count();
        Ok(SpatialMask {
            height,
            width,
            bits,
            area,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        let area = bits.iter().filter(|&&b| b).count();
        SpatialMask {
            height,
            width,
            bits,
            area,
        }
    }

    /// Pixels where `plane > 0.5`.
    pub fn from_plane<T: Scalar>(plane: &Plane<T>) -> Self {
        let half = T::from_f64_lossy(0.5);
        Self::from_fn(plane.height(), plane.width(), |y, x| plane.get(y, x) > half)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.area
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        let slot = &mut self.bits[y * self.width + x];
        if *slot != value {
            if value {
                self.area += 1;
            } else {
                self.area -= 1;
            }
            *slot = value;
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Flat indices of masked pixels in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn intersection(&self, other: &SpatialMask) -> Result<SpatialMask> {
        self.combine(other, |a, b| a && b)
    }

    pub fn union(&self, other: &SpatialMask) -> Result<SpatialMask> {
        self.combine(other, |a, b| a || b)
    }

    pub fn complement(&self) -> SpatialMask {
        let bits: Vec<bool> = self.bits.iter().map(|b| !b).collect();
        SpatialMask {
            height: self.height,
            width: self.width,
            area: bits.len() - self.area,
            bits,
        }
    }

    pub fn intersection_area(&self, other: &SpatialMask) -> usize {
        assert_eq!(self.dims(), other.dims());
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn is_subset_of(&self, other: &SpatialMask) -> bool {
        self.dims() == other.dims()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_plane<T: Scalar>(&self) -> Plane<T> {
        Plane::from_fn(self.height, self.width, |y, x| {
            if self.get(y, x) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    fn combine(&self, other: &SpatialMask, f: impl Fn(bool, bool) -> bool) -> Result<SpatialMask> {
        check_dims(self.dims(), other.dims())?;
        let bits: Vec<bool> = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| f(a, b))
            .collect();
        SpatialMask::from_bits(self.height, self.width, bits)
    }
}

/// Compact serialized form: rows of `0`/`1` characters.
#[derive(Serialize, Deserialize)]
struct MaskRepr {
    height: usize,
    width: usize,
    rows: Vec<String>,
}

impl From<SpatialMask> for MaskRepr {
    fn from(m: SpatialMask) -> Self {
        let rows = m
            .bits
            .chunks(m.width.max(1))
            .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect();
        MaskRepr {
            height: m.height,
            width: m.width,
            rows,
        }
    }
}

impl TryFrom<MaskRepr> for SpatialMask {
    type Error = String;

    fn try_from(r: MaskRepr) -> std::result::Result<Self, Self::Error> {
        let mut bits = Vec::with_capacity(r.height * r.width);
        for row in &r.rows {
            if row.len() != r.width {
                return Err(format!("mask row length {} != width {}", row.len(), r.width));
            }
            for c in row.chars() {
                match c {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    other => return Err(format!("invalid mask character {other:?}")),
                }
            }
        }
        SpatialMask::from_bits(r.height, r.width, bits).map_err(|e| e.to_string())
    }
}
