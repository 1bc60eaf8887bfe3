//! Restructuring 4D cases into 2D slice samples, shape adaptation by
//! center-crop / symmetric pad, and per-slice intensity standardization.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2};

use super::types::{Case4D, DiseaseDataset, DiseaseKey, Manifest, SliceSample};
use crate::error::{CoreError, Result};

/// Splits one case into its ED and ES phase volumes and slices each along z.
///
/// Returns exactly `2 * Z` samples in (phase, slice_index) order: the full ED
/// stack first, then the ES stack. Phases other than ED/ES are ignored.
pub fn restructure_case(case: &Case4D) -> Result<Vec<SliceSample>> {
    case.validate()?;
    let (_, h, w, z) = case.shape();
    let mut out = Vec::with_capacity(2 * z);
    for (phase, p) in [
        (super::Phase::Ed, case.ed_index),
        (super::Phase::Es, case.es_index),
    ] {
        for zi in 0..z {
            let mut image = Array2::<f64>::zeros((h, w));
            let mut label = Array2::<u8>::zeros((h, w));
            let img_plane = case.image.slice(s![p, .., .., zi]);
            let lab_plane = case.label.slice(s![p, .., .., zi]);
            for u in 0..h {
                for v in 0..w {
                    image[[u, v]] = img_plane[[u, v]] as f64;
                    label[[u, v]] = lab_plane[[u, v]];
                }
            }
            out.push(SliceSample {
                case_id: case.case_id.clone(),
                disease: case.disease.clone(),
                phase,
                slice_index: zi,
                image,
                label,
            });
        }
    }
    Ok(out)
}

fn axis_crop_offset(src: usize, target: usize) -> usize {
    debug_assert!(src >= target);
    (src - target) / 2
}

fn axis_pad_offset(src: usize, target: usize) -> usize {
    debug_assert!(src <= target);
    (target - src) / 2
}

fn resize_plane<T: Copy>(src: &Array2<T>, th: usize, tw: usize, fill: T) -> Array2<T> {
    let (sh, sw) = src.dim();
    let mut out = Array2::from_elem((th, tw), fill);
    // Row/col ranges copied from source and their destination offsets. For odd
    // margins the extra row/column falls on the bottom/right.
    let (src_u0, dst_u0, nu) = if sh > th {
        (axis_crop_offset(sh, th), 0, th)
    } else {
        (0, axis_pad_offset(sh, th), sh)
    };
    let (src_v0, dst_v0, nv) = if sw > tw {
        (axis_crop_offset(sw, tw), 0, tw)
    } else {
        (0, axis_pad_offset(sw, tw), sw)
    };
    for u in 0..nu {
        for v in 0..nv {
            out[[dst_u0 + u, dst_v0 + v]] = src[[src_u0 + u, src_v0 + v]];
        }
    }
    out
}

pub fn resize_image_plane(src: &Array2<f64>, th: usize, tw: usize) -> Array2<f64> {
    resize_plane(src, th, tw, 0.0)
}

pub fn resize_label_plane(src: &Array2<u8>, th: usize, tw: usize) -> Array2<u8> {
    resize_plane(src, th, tw, 0)
}

/// Center-crops or zero-pads a sample to `(target_h, target_w)`. Labels are
/// padded with background.
pub fn resize_sample(sample: &SliceSample, target_h: usize, target_w: usize) -> SliceSample {
    SliceSample {
        case_id: sample.case_id.clone(),
        disease: sample.disease.clone(),
        phase: sample.phase,
        slice_index: sample.slice_index,
        image: resize_image_plane(&sample.image, target_h, target_w),
        label: resize_label_plane(&sample.label, target_h, target_w),
    }
}

/// Inverse of `resize_label_plane`: maps a plane produced in the resized
/// frame back to the original `(orig_h, orig_w)` frame. Regions that the
/// forward resize cropped away are filled with background.
pub fn restore_label_plane(pred: &Array2<u8>, orig_h: usize, orig_w: usize) -> Array2<u8> {
    resize_plane(pred, orig_h, orig_w, 0)
}

/// Standardizes one slice to zero mean, unit variance. Slices with no
/// contrast (std below 1e-6) are returned unchanged.
pub fn normalize_slice(image: &Array2<f64>) -> Array2<f64> {
    let n = image.len() as f64;
    let mean = image.sum() / n;
    let var = image.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-6 {
        image.mapv(|x| (x - mean) / std)
    } else {
        image.clone()
    }
}

/// Loads every case of a manifest, restructures and resizes it, and groups
/// the samples by disease key.
pub fn build_disease_datasets(
    manifest: &Manifest,
    manifest_dir: &Path,
    target_h: usize,
    target_w: usize,
) -> Result<BTreeMap<DiseaseKey, DiseaseDataset>> {
    let mut out: BTreeMap<DiseaseKey, DiseaseDataset> = BTreeMap::new();
    for entry in &manifest.cases {
        let dir = manifest_dir.join(&entry.path);
        let case = super::read_case(&dir).map_err(|e| CoreError::CaseLoad {
            case_id: entry.case_id.clone(),
            msg: e.to_string(),
        })?;
        let samples = restructure_case(&case)?;
        let dataset = out
            .entry(entry.disease.clone())
            .or_insert_with(|| DiseaseDataset {
                disease: entry.disease.clone(),
                samples: Vec::new(),
            });
        for s in &samples {
            dataset.samples.push(resize_sample(s, target_h, target_w));
        }
    }
    for (key, ds) in &out {
        if ds.samples.is_empty() {
            return Err(CoreError::Config(format!("disease {key} has no samples")));
        }
    }
    Ok(out)
}

/// Flattens disease datasets into one pooled sample list (disease order is
/// the sorted key order, so pooling is deterministic).
pub fn pool_samples(datasets: &BTreeMap<DiseaseKey, DiseaseDataset>) -> Vec<&SliceSample> {
    datasets
        .values()
        .flat_map(|d| d.samples.iter())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DiseaseKey, Phase};
    use ndarray::{Array2, Array4};

    fn case_with_shape(p: usize, h: usize, w: usize, z: usize) -> Case4D {
        let mut image = Array4::<f32>::zeros((p, h, w, z));
        for (i, x) in image.iter_mut().enumerate() {
            *x = i as f32;
        }
        Case4D {
            case_id: "c".into(),
            disease: DiseaseKey::new("NOR"),
            image,
            label: Array4::zeros((p, h, w, z)),
            ed_index: 0,
            es_index: p - 1,
            pixel_spacing_mm: None,
        }
    }

    #[test]
    fn restructure_yields_two_z_samples() {
        // The worked example: a (12,128,128,9) case yields 18 slice samples.
        let case = case_with_shape(12, 128, 128, 9);
        let samples = restructure_case(&case).unwrap();
        assert_eq!(samples.len(), 18);
        assert!(samples[..9].iter().all(|s| s.phase == Phase::Ed));
        assert!(samples[9..].iter().all(|s| s.phase == Phase::Es));
        assert_eq!(samples[0].image.dim(), (128, 128));
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.slice_index, i % 9);
        }
    }

    #[test]
    fn restructure_minimal_z() {
        let case = case_with_shape(2, 4, 4, 1);
        let samples = restructure_case(&case).unwrap();
        assert_eq!(samples.len(), 2);
    }

    #[test]
    fn restructure_all_zero_labels_pass_through() {
        let case = case_with_shape(2, 4, 4, 3);
        let samples = restructure_case(&case).unwrap();
        assert_eq!(samples.len(), 6);
        assert!(samples.iter().all(|s| s.label.iter().all(|&v| v == 0)));
    }

    #[test]
    fn restructure_extracts_correct_planes() {
        let case = case_with_shape(3, 2, 2, 2);
        let samples = restructure_case(&case).unwrap();
        // ED is phase 0; its z=1 slice must match image[0, .., .., 1].
        let s = &samples[1];
        assert_eq!(s.phase, Phase::Ed);
        assert_eq!(s.slice_index, 1);
        for u in 0..2 {
            for v in 0..2 {
                assert_eq!(s.image[[u, v]], case.image[[0, u, v, 1]] as f64);
            }
        }
    }

    #[test]
    fn resize_pads_small_input_symmetrically() {
        let mut img = Array2::<f64>::zeros((128, 128));
        img.fill(1.0);
        let out = resize_image_plane(&img, 160, 160);
        assert_eq!(out.dim(), (160, 160));
        // Nonzero bounding box offset is 16 on each side.
        assert_eq!(out[[15, 80]], 0.0);
        assert_eq!(out[[16, 80]], 1.0);
        assert_eq!(out[[143, 80]], 1.0);
        assert_eq!(out[[144, 80]], 0.0);
        assert_eq!(out[[80, 15]], 0.0);
        assert_eq!(out[[80, 16]], 1.0);
    }

    #[test]
    fn resize_identity_when_shapes_match() {
        let img = Array2::from_shape_fn((8, 8), |(u, v)| (u * 8 + v) as f64);
        let out = resize_image_plane(&img, 8, 8);
        assert_eq!(out, img);
    }

    #[test]
    fn resize_center_crops_large_input() {
        let img = Array2::from_shape_fn((200, 180), |(u, v)| (u * 1000 + v) as f64);
        let out = resize_image_plane(&img, 160, 160);
        // Output equals source rows 20..179, cols 10..169.
        for u in 0..160 {
            for v in 0..160 {
                assert_eq!(out[[u, v]], img[[u + 20, v + 10]]);
            }
        }
    }

    #[test]
    fn resize_is_idempotent() {
        let img = Array2::from_shape_fn((13, 9), |(u, v)| (u * 100 + v) as f64);
        let once = resize_image_plane(&img, 11, 11);
        let twice = resize_image_plane(&once, 11, 11);
        assert_eq!(once, twice);
    }

    #[test]
    fn odd_margin_extra_goes_bottom_right() {
        // 3 -> 6: margin 3, top offset 1, bottom gets the extra row.
        let img = Array2::from_elem((3, 3), 7.0);
        let out = resize_image_plane(&img, 6, 6);
        assert_eq!(out[[0, 2]], 0.0);
        assert_eq!(out[[1, 1]], 7.0);
        assert_eq!(out[[3, 1]], 7.0);
        assert_eq!(out[[4, 1]], 0.0);
        assert_eq!(out[[5, 1]], 0.0);
    }

    #[test]
    fn restore_inverts_pad_and_crop() {
        let lab = Array2::from_shape_fn((10, 14), |(u, v)| ((u + v) % 4) as u8);
        // Padded path: 10x14 -> 16x16 -> back.
        let up = resize_label_plane(&lab, 16, 16);
        assert_eq!(restore_label_plane(&up, 10, 14), lab);
        // Cropped path: the center survives.
        let down = resize_label_plane(&lab, 6, 6);
        let back = restore_label_plane(&down, 10, 14);
        assert_eq!(back[[5, 7]], lab[[5, 7]]);
        assert_eq!(back[[0, 0]], 0);
    }

    #[test]
    fn normalize_slice_standardizes() {
        let img = Array2::from_shape_fn((4, 4), |(u, v)| (u * 4 + v) as f64);
        let out = normalize_slice(&img);
        let mean = out.sum() / 16.0;
        let var = out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_slice_leaves_constant_untouched() {
        let img = Array2::from_elem((4, 4), 3.0);
        let out = normalize_slice(&img);
        assert_eq!(out, img);
    }

    #[test]
    fn normalize_is_shift_invariant() {
        let img = Array2::from_shape_fn((6, 6), |(u, v)| ((u * 7 + v * 3) % 5) as f64);
        let shifted = img.mapv(|x| x + 42.0);
        let a = normalize_slice(&img);
        let b = normalize_slice(&shifted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
