//! Overlap metrics, anomaly-excluded SSIM, lesion-size strata and the
//! per-image best-iteration oracle.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::mask::SpatialMask;
use crate::plane::Plane;
use crate::refinement::RefinementTrace;
use crate::scalar::Scalar;

fn overlap(pred: &SpatialMask, gt: &SpatialMask) -> Result<(f64, f64, f64)> {
    check_dims(pred.dims(), gt.dims())?;
    Ok((
        pred.intersection_area(gt) as f64,
        pred.area() as f64,
        gt.area() as f64,
    ))
}

/// `2|P & G| / (|P| + |G|)`, and 1 when both masks are empty.
pub fn dice(pred: &SpatialMask, gt: &SpatialMask) -> Result<f64> {
    let (i, p, g) = overlap(pred, gt)?;
    Ok(if p + g == 0.0 { 1.0 } else { 2.0 * i / (p + g) })
}

/// `|P & G| / |G|`; `None` when the ground truth is empty.
pub fn sensitivity(pred: &SpatialMask, gt: &SpatialMask) -> Result<Option<f64>> {
    let (i, _, g) = overlap(pred, gt)?;
    Ok((g > 0.0).then(|| i / g))
}

/// `|P & G| / |P|`; `None` when the prediction is empty.
pub fn precision(pred: &SpatialMask, gt: &SpatialMask) -> Result<Option<f64>> {
    let (i, p, _) = overlap(pred, gt)?;
    Ok((p > 0.0).then(|| i / p))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Per-pixel SSIM with an 11x11 Gaussian window (sigma 1.5). Windows are
/// cut at the image border and their weights renormalized.
pub fn ssim_map<T: Scalar>(a: &Plane<T>, b: &Plane<T>, dynamic_range: f64) -> Result<Plane<f64>> {
    check_dims(a.dims(), b.dims())?;
    let (h, w) = a.dims();
    let k = gaussian_kernel();
    let r = (SSIM_WINDOW / 2) as isize;
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let av: Vec<f64> = a.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
    let bv: Vec<f64> = b.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (mut sw, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let wt = k[(dy + r) as usize] * k[(dx + r) as usize];
                    let i = yy as usize * w + xx as usize;
                    let (p, q) = (av[i], bv[i]);
                    sw += wt;
                    sa += wt * p;
                    sb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (ma, mb) = (sa / sw, sb / sw);
            let va = saa / sw - ma * ma;
            let vb = sbb / sw - mb * mb;
            let cov = sab / sw - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            out.set(y, x, s);
        }
    }
    Ok(out)
}

/// Mask of pixels whose SSIM window touches `anomaly`.
fn window_dilation(anomaly: &SpatialMask) -> SpatialMask {
    let (h, w) = anomaly.dims();
    let r = SSIM_WINDOW / 2;
    let mut out = SpatialMask::empty(h, w);
    for i in anomaly.indices() {
        let (y, x) = (i / w, i % w);
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                out.set(yy, xx, true);
            }
        }
    }
    out
}

/// Mean SSIM over brain pixels whose window contains no anomaly pixel.
/// The dynamic range is the original's intensity range over the brain.
pub fn ssim_excluding_anomaly<T: Scalar>(
    original: &Plane<T>,
    reconstruction: &Plane<T>,
    anomaly_mask: &SpatialMask,
    brain_mask: &SpatialMask,
) -> Result<f64> {
    check_dims(original.dims(), reconstruction.dims())?;
    check_dims(original.dims(), anomaly_mask.dims())?;
    check_dims(original.dims(), brain_mask.dims())?;
    let (lo, hi) = brain_mask
        .indices()
        .map(|i| original.as_slice()[i].to_f64_lossy())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let excluded = window_dilation(anomaly_mask);
    let counted: Vec<usize> = brain_mask.indices().filter(|&i| !excluded.get_index(i)).collect();
    if counted.is_empty() {
        return Err(Error::invalid("no brain pixel has an anomaly-free SSIM window"));
    }
    let map = ssim_map(original, reconstruction, range)?;
    Ok(counted.iter().map(|&i| map.as_slice()[i]).sum::<f64>() / counted.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizeStratum {
    S,
    M,
    L,
}

pub const SMALL_LESION_AREA: usize = 200;
pub const LARGE_LESION_AREA: usize = 800;

/// Small below 200 pixels, large above 800, medium otherwise.
pub fn stratify_size(gt: &SpatialMask) -> SizeStratum {
    let a = gt.area();
    if a < SMALL_LESION_AREA {
        SizeStratum::S
    } else if a > LARGE_LESION_AREA {
        SizeStratum::L
    } else {
        SizeStratum::M
    }
}

/// The per-image best choice of iteration and threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleChoice {
    pub iteration: usize,
    pub tau: f64,
    pub dice: f64,
    pub segmentation: SpatialMask,
}

/// Scores `mask_t AND (error_t >= tau)` for every iteration `t` and every
/// `tau` in the schedule, plus the trace's own final choice, and returns the
/// highest Dice. Ties keep the trace's own result, then the earliest
/// iteration and schedule entry.
pub fn best_iteration_oracle<T: Scalar>(
    trace: &RefinementTrace<T>,
    gt: &SpatialMask,
    tau_schedule: &[f64],
) -> Result<OracleChoice> {
    let last = trace.states.len();
    if last == 0 {
        return Err(Error::invalid("trace is empty"));
    }
    let own_tau = trace.config.tau;
    let seg = trace.segmentation_at(last, own_tau)?;
    let mut best = OracleChoice {
        iteration: last,
        tau: own_tau,
        dice: dice(&seg, gt)?,
        segmentation: seg,
    };
    for t in 1..=last {
        for &tau in tau_schedule {
            let seg = trace.segmentation_at(t, tau)?;
            let d = dice(&seg, gt)?;
            if d > best.dice {
                best = OracleChoice {
                    iteration: t,
                    tau,
                    dice: d,
                    segmentation: seg,
                };
            }
        }
    }
    Ok(best)
}

/// Metrics of one image. Rates are in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
    pub ssim: Option<f64>,
    pub lesion_area: usize,
    pub stratum: SizeStratum,
    /// Best-iteration oracle Dice in percent, when computed.
    pub oracle_dice: Option<f64>,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, pred: &SpatialMask, gt: &SpatialMask) -> Result<Self> {
        Ok(ImageMetrics {
            id: id.into(),
            dice: 100.0 * dice(pred, gt)?,
            sensitivity: sensitivity(pred, gt)?.map(|v| 100.0 * v),
            precision: precision(pred, gt)?.map(|v| 100.0 * v),
            ssim: None,
            lesion_area: gt.area(),
            stratum: stratify_size(gt),
            oracle_dice: None,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub count: usize,
    pub mean_dice: Option<f64>,
}

/// Per-image metrics with their means; undefined values are left out of means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub mean_dice: Option<f64>,
    pub mean_sensitivity: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_oracle_dice: Option<f64>,
    pub small: StratumSummary,
    pub medium: StratumSummary,
    pub large: StratumSummary,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn new(images: Vec<ImageMetrics>) -> Self {
        let stratum = |s: SizeStratum| {
            let d: Vec<f64> = images.iter().filter(|m| m.stratum == s).map(|m| m.dice).collect();
            StratumSummary {
                count: d.len(),
                mean_dice: mean_of(d.into_iter()),
            }
        };
        MetricsReport {
            mean_dice: mean_of(images.iter().map(|m| m.dice)),
            mean_sensitivity: mean_of(images.iter().filter_map(|m| m.sensitivity)),
            mean_precision: mean_of(images.iter().filter_map(|m| m.precision)),
            mean_ssim: mean_of(images.iter().filter_map(|m| m.ssim)),
            mean_oracle_dice: mean_of(images.iter().filter_map(|m| m.oracle_dice)),
            small: stratum(SizeStratum::S),
            medium: stratum(SizeStratum::M),
            large: stratum(SizeStratum::L),
            images,
        }
    }

    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        let f3 = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "DSC", "Sens", "Prec", "SSIM", "DS_S", "DS_M", "DS_L", "oracle");
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            f(self.mean_dice),
            f(self.mean_sensitivity),
            f(self.mean_precision),
            f3(self.mean_ssim),
            f(self.small.mean_dice),
            f(self.medium.mean_dice),
            f(self.large.mean_dice),
            f(self.mean_oracle_dice),
        );
        let _ = writeln!(
            s,
            "images {} (S {}, M {}, L {})",
            self.images.len(),
            self.small.count,
            self.medium.count,
            self.large.count
        );
        s
    }

    /// One CSV row per image.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        let mut s = String::from("id,dice,sensitivity,precision,ssim,lesion_area,stratum,oracle_dice\n");
        for m in &self.images {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:?},{}",
                m.id,
                m.dice,
                opt(m.sensitivity),
                opt(m.precision),
                opt(m.ssim),
                m.lesion_area,
                m.stratum,
                opt(m.oracle_dice)
            );
        }
        s
    }
}
