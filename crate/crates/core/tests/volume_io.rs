use itermask::data_io::{extract_slices, load_volume, save_mask_volume, save_plane_volume, Axis, Volume};
use itermask::{Error, ErrorCategory, Plane, SpatialMask};
use ndarray::{Array2, Array3};
use nifti::writer::WriterOptions;

fn disk(h: usize, w: usize, r: f64) -> SpatialMask {
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    SpatialMask::from_fn(h, w, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r)
}

/// Three 16x16 slices along the last axis: a large disk, nothing, a small disk.
fn fixture() -> Array3<f32> {
    let big = disk(16, 16, 6.0);
    let small = disk(16, 16, 2.0);
    Array3::from_shape_fn((16, 16, 3), |(y, x, k)| {
        let inside = match k {
            0 => big.get(y, x),
            2 => small.get(y, x),
            _ => false,
        };
        if inside {
            1.0 + (y * 3 + x) as f32 * 0.1
        } else {
            0.0
        }
    })
}

#[test]
fn nifti_round_trip_preserves_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("subject01.nii.gz");
    WriterOptions::new(&path).write_nifti(&fixture()).unwrap();
    let vol = load_volume(&path).unwrap();
    assert_eq!(vol.subject_id, "subject01");
    assert_eq!(vol.data.dim(), (16, 16, 3));
    assert_eq!(vol.data, fixture());
}

#[test]
fn empty_slice_is_skipped_and_fraction_is_monotone() {
    let vol = Volume::from_array(fixture(), "fx");
    let all = extract_slices::<f64>(&vol, Axis::K, 0.0);
    assert_eq!(all.iter().map(|s| s.slice_index).collect::<Vec<_>>(), vec![0, 2]);
    for s in &all {
        s.check_normalized().unwrap();
    }
    let mut last = usize::MAX;
    for frac in [0.0, 0.02, 0.05, 0.2, 0.5, 0.9] {
        let n = extract_slices::<f32>(&vol, Axis::K, frac).len();
        assert!(n <= last);
        last = n;
    }
    assert_eq!(extract_slices::<f32>(&vol, Axis::K, 0.2).len(), 1);
    assert_eq!(extract_slices::<f32>(&vol, Axis::K, 0.9).len(), 0);
}

#[test]
fn missing_truncated_and_2d_files_are_categorized() {
    let dir = tempfile::tempdir().unwrap();
    let missing = load_volume(dir.path().join("nope.nii")).unwrap_err();
    assert_eq!(missing.category(), ErrorCategory::Io);

    let good = dir.path().join("v.nii");
    WriterOptions::new(&good).write_nifti(&fixture()).unwrap();
    let bytes = std::fs::read(&good).unwrap();
    let cut = dir.path().join("cut.nii");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_volume(&cut), Err(Error::Corrupt { .. })));
    let junk = dir.path().join("junk.nii");
    std::fs::write(&junk, b"not a nifti file").unwrap();
    assert!(matches!(load_volume(&junk), Err(Error::Corrupt { .. })));

    let flat = dir.path().join("flat.nii");
    WriterOptions::new(&flat).write_nifti(&Array2::<f32>::zeros((8, 8))).unwrap();
    assert!(matches!(load_volume(&flat), Err(Error::Unsupported(_))));
}

#[test]
fn masks_and_planes_written_with_reference_header() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.nii");
    WriterOptions::new(&src).write_nifti(&fixture()).unwrap();
    let vol = load_volume(&src).unwrap();

    let masks = vec![disk(16, 16, 3.0), SpatialMask::empty(16, 16)];
    let out = dir.path().join("seg.nii.gz");
    save_mask_volume(&out, &masks, Some(&vol.header)).unwrap();
    let back = load_volume(&out).unwrap();
    assert_eq!(back.data.dim(), (16, 16, 2));
    assert_eq!(back.header.pixdim, vol.header.pixdim);
    for y in 0..16 {
        for x in 0..16 {
            assert_eq!(back.data[[y, x, 0]] == 1.0, masks[0].get(y, x));
            assert_eq!(back.data[[y, x, 1]], 0.0);
        }
    }

    let p = Plane::<f64>::from_fn(16, 16, |y, x| y as f64 - 0.5 * x as f64);
    let out = dir.path().join("err.nii");
    save_plane_volume(&out, &[&p], None).unwrap();
    let back = load_volume(&out).unwrap();
    assert_eq!(back.data[[3, 4, 0]], 1.0);

    let wrong = vec![disk(16, 16, 3.0), SpatialMask::empty(8, 8)];
    assert!(save_mask_volume(dir.path().join("x.nii"), &wrong, None).is_err());
    assert!(save_mask_volume(dir.path().join("y.nii"), &[], None).is_err());
}
