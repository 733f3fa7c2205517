use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma, Rgb, RgbImage};

use crate::error::{check_dims, Error, Result};
use crate::mask::SpatialMask;
use crate::plane::Plane;
use crate::scalar::Scalar;

fn extent<T: Scalar>(plane: &Plane<T>) -> (f64, f64) {
    plane
        .as_slice()
        .iter()
        .map(|v| v.to_f64_lossy())
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn to_u8(v: f64, lo: f64, hi: f64) -> u8 {
    if !(hi > lo) || !v.is_finite() {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Min-max scaled grayscale rendering.
pub fn gray_image<T: Scalar>(plane: &Plane<T>) -> GrayImage {
    let (lo, hi) = extent(plane);
    GrayImage::from_fn(plane.width() as u32, plane.height() as u32, |x, y| {
        Luma([to_u8(plane.get(y as usize, x as usize).to_f64_lossy(), lo, hi)])
    })
}

/// 0/255 rendering of a mask.
pub fn mask_image(mask: &SpatialMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

// Five-stop perceptual ramp (dark purple, blue, teal, green, yellow).
const RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

fn ramp(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (RAMP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(RAMP.len() - 2);
    let f = pos - i as f64;
    let c = |k: usize| (RAMP[i][k] + f * (RAMP[i + 1][k] - RAMP[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Fixed-colormap rendering of a non-negative map scaled to `[0, vmax]`.
/// A non-positive `vmax` uses the map's own maximum.
pub fn error_heatmap<T: Scalar>(map: &Plane<T>, vmax: f64) -> RgbImage {
    let vmax = if vmax > 0.0 { vmax } else { extent(map).1.max(0.0) };
    RgbImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        let v = map.get(y as usize, x as usize).to_f64_lossy();
        ramp(if vmax > 0.0 { v / vmax } else { 0.0 })
    })
}

/// Grayscale image with the mask tinted red at the given opacity.
pub fn overlay_image<T: Scalar>(plane: &Plane<T>, mask: &SpatialMask, opacity: f64) -> Result<RgbImage> {
    check_dims(plane.dims(), mask.dims())?;
    let gray = gray_image(plane);
    let a = opacity.clamp(0.0, 1.0);
    Ok(RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        let g = gray.get_pixel(x, y)[0] as f64;
        if mask.get(y as usize, x as usize) {
            let mix = |target: f64| (g * (1.0 - a) + target * a).round() as u8;
            Rgb([mix(255.0), mix(0.0), mix(0.0)])
        } else {
            let g = g as u8;
            Rgb([g, g, g])
        }
    }))
}

pub fn encode_png(image: impl Into<DynamicImage>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image
        .into()
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Internal(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

pub fn save_png(image: impl Into<DynamicImage>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_spans_full_range() {
        let p = Plane::<f64>::from_fn(2, 3, |y, x| (y * 3 + x) as f64);
        let img = gray_image(&p);
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        assert_eq!(img.get_pixel(2, 1)[0], 255);
        assert_eq!(gray_image(&Plane::<f64>::filled(2, 2, 1.0)).get_pixel(1, 1)[0], 0);
    }

    #[test]
    fn heatmap_endpoints_follow_ramp() {
        let p = Plane::<f32>::from_vec(1, 2, vec![0.0, 2.0]).unwrap();
        let img = error_heatmap(&p, 2.0);
        assert_eq!(img.get_pixel(0, 0).0, [68, 1, 84]);
        assert_eq!(img.get_pixel(1, 0).0, [253, 231, 37]);
    }

    #[test]
    fn png_round_trip() {
        let m = SpatialMask::from_fn(5, 7, |y, x| (x + y) % 2 == 0);
        let bytes = encode_png(mask_image(&m)).unwrap();
        let back = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert_eq!(back.dimensions(), (7, 5));
        assert_eq!(back.get_pixel(0, 0)[0], 255);
        assert_eq!(back.get_pixel(1, 0)[0], 0);
    }
}
