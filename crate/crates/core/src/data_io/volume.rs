use std::path::Path;

use ndarray::{Array3, Axis as NdAxis, Ix3};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use nifti::writer::WriterOptions;
use serde::{Deserialize, Serialize};

use super::{slice_from_raw, Slice};
use crate::error::{Error, Result};
use crate::mask::SpatialMask;
use crate::plane::Plane;
use crate::scalar::Scalar;

/// Slicing axis in voxel index order (i, j, k).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    I,
    J,
    #[default]
    K,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::I => 0,
            Axis::J => 1,
            Axis::K => 2,
        }
    }
}

/// A 3D scalar volume with the header it was read from.
#[derive(Clone, Debug)]
pub struct Volume {
    pub data: Array3<f32>,
    pub header: NiftiHeader,
    pub subject_id: String,
}

impl Volume {
    /// An in-memory volume with a default header.
    pub fn from_array(data: Array3<f32>, subject_id: impl Into<String>) -> Self {
        Volume {
            data,
            header: NiftiHeader::default(),
            subject_id: subject_id.into(),
        }
    }
}

fn corrupt(path: &Path, reason: impl ToString) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Reads a `.nii` or `.nii.gz` file. Trailing singleton dimensions beyond
/// the third are dropped; anything else that is not 3D is rejected.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| match e {
        nifti::NiftiError::Io(source) if source.kind() != std::io::ErrorKind::UnexpectedEof => {
            Error::io(path, source)
        }
        other => corrupt(path, other),
    })?;
    let header = obj.header().clone();
    let dims: Vec<usize> = header
        .dim()
        .map_err(|e| corrupt(path, e))?
        .iter()
        .map(|&d| d as usize)
        .collect();
    let rank = dims.iter().rposition(|&d| d > 1).map_or(0, |p| p + 1);
    if dims.len() < 3 || rank > 3 {
        return Err(Error::Unsupported(format!(
            "{}: expected a 3D volume, found dimensions {dims:?}",
            path.display()
        )));
    }
    let mut data = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| corrupt(path, e))?;
    while data.ndim() > 3 {
        let last = data.ndim() - 1;
        data = data.index_axis_move(NdAxis(last), 0);
    }
    let data = data.into_dimensionality::<Ix3>().map_err(|e| corrupt(path, e))?;
    let subject_id = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".gz").trim_end_matches(".nii").to_string())
        .unwrap_or_default();
    Ok(Volume {
        data,
        header,
        subject_id,
    })
}

/// Cuts the volume along `axis`, keeping slices whose brain covers at least
/// `min_brain_fraction` of the slice, each z-scored over its brain.
pub fn extract_slices<T: Scalar>(volume: &Volume, axis: Axis, min_brain_fraction: f64) -> Vec<Slice<T>> {
    let mut out = Vec::new();
    for (k, view) in volume.data.axis_iter(NdAxis(axis.index())).enumerate() {
        let (h, w) = view.dim();
        let raw = Plane::<T>::from_fn(h, w, |y, x| T::from_f64_lossy(view[[y, x]] as f64));
        if !raw.is_finite() {
            continue;
        }
        let Ok(s) = slice_from_raw(&raw, volume.subject_id.clone(), k, "unknown") else {
            continue;
        };
        if s.brain_mask.area() as f64 >= min_brain_fraction * (h * w) as f64 {
            out.push(s);
        }
    }
    out
}

fn writer<'a>(path: &'a Path, reference: Option<&'a NiftiHeader>) -> WriterOptions<'a> {
    let mut w = WriterOptions::new(path);
    if let Some(h) = reference {
        w = w.reference_header(h);
    }
    w
}

fn stack<A: Copy + Default>(planes: &[(usize, usize, Vec<A>)]) -> Result<Array3<A>> {
    let Some(&(h, w, _)) = planes.first() else {
        return Err(Error::invalid("nothing to write"));
    };
    let mut arr = Array3::from_elem((h, w, planes.len()), A::default());
    for (k, (ph, pw, data)) in planes.iter().enumerate() {
        crate::error::check_dims((h, w), (*ph, *pw))?;
        for y in 0..h {
            for x in 0..w {
                arr[[y, x, k]] = data[y * w + x];
            }
        }
    }
    Ok(arr)
}

/// Writes masks as a uint8 volume, one mask per slice along the third axis.
/// With a reference header the output keeps its geometry.
pub fn save_mask_volume(
    path: impl AsRef<Path>,
    masks: &[SpatialMask],
    reference: Option<&NiftiHeader>,
) -> Result<()> {
    let path = path.as_ref();
    let planes: Vec<_> = masks
        .iter()
        .map(|m| (m.height(), m.width(), m.bits().iter().map(|&b| b as u8).collect()))
        .collect();
    let arr = stack(&planes)?;
    writer(path, reference)
        .write_nifti(&arr)
        .map_err(|e| corrupt(path, e))
}

/// Writes planes as a float32 volume, one plane per slice along the third axis.
pub fn save_plane_volume<T: Scalar>(
    path: impl AsRef<Path>,
    planes: &[&Plane<T>],
    reference: Option<&NiftiHeader>,
) -> Result<()> {
    let path = path.as_ref();
    let planes: Vec<_> = planes
        .iter()
        .map(|p| {
            let data = p.as_slice().iter().map(|v| v.to_f64_lossy() as f32).collect();
            (p.height(), p.width(), data)
        })
        .collect();
    let arr = stack(&planes)?;
    writer(path, reference)
        .write_nifti(&arr)
        .map_err(|e| corrupt(path, e))
}
