//! On-disk case format: `meta.json` plus raw little-endian payloads.
//!
//! A case directory holds `meta.json` (shape, phase indices, dtypes),
//! `image.raw` (f32 LE, row-major in (P, H, W, Z) order) and `label.raw`
//! (u8, same order). Payload sizes are validated against the header.

use std::fs;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::types::{Case4D, DiseaseKey, NUM_CLASSES};
use crate::error::{CoreError, Result};

pub const CASE_FORMAT_VERSION: u32 = 1;
const DTYPE_IMAGE: &str = "f32le";
const DTYPE_LABEL: &str = "u8";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMeta {
    pub format_version: u32,
    pub case_id: String,
    pub disease: DiseaseKey,
    /// (P, H, W, Z)
    pub shape: [usize; 4],
    pub ed_index: usize,
    pub es_index: usize,
    pub dtype_image: String,
    pub dtype_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_spacing_mm: Option<[f64; 2]>,
}

pub fn write_case(case: &Case4D, dir: &Path) -> Result<()> {
    case.validate()?;
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let (p, h, w, z) = case.shape();
    let meta = CaseMeta {
        format_version: CASE_FORMAT_VERSION,
        case_id: case.case_id.clone(),
        disease: case.disease.clone(),
        shape: [p, h, w, z],
        ed_index: case.ed_index,
        es_index: case.es_index,
        dtype_image: DTYPE_IMAGE.to_string(),
        dtype_label: DTYPE_LABEL.to_string(),
        pixel_spacing_mm: case.pixel_spacing_mm,
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text).map_err(|e| CoreError::io(&meta_path, e))?;

    let image_slice = case.image.as_slice().expect("image is contiguous");
    let mut buf = Vec::with_capacity(image_slice.len() * 4);
    for x in image_slice {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let image_path = dir.join("image.raw");
    fs::write(&image_path, &buf).map_err(|e| CoreError::io(&image_path, e))?;

    let label_slice = case.label.as_slice().expect("label is contiguous");
    let label_path = dir.join("label.raw");
    fs::write(&label_path, label_slice).map_err(|e| CoreError::io(&label_path, e))?;
    Ok(())
}

pub fn read_case(dir: &Path) -> Result<Case4D> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| CoreError::io(&meta_path, e))?;
    let meta: CaseMeta =
        serde_json::from_str(&text).map_err(|e| CoreError::json(&meta_path, e))?;
    if meta.format_version != CASE_FORMAT_VERSION {
        return Err(CoreError::format(
            &meta_path,
            format!("unknown format version {}", meta.format_version),
        ));
    }
    if meta.dtype_image != DTYPE_IMAGE || meta.dtype_label != DTYPE_LABEL {
        return Err(CoreError::format(
            &meta_path,
            format!(
                "unsupported dtypes ({}, {})",
                meta.dtype_image, meta.dtype_label
            ),
        ));
    }
    let [p, h, w, z] = meta.shape;
    let n = p
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .and_then(|x| x.checked_mul(z))
        .ok_or_else(|| CoreError::format(&meta_path, "shape overflows".to_string()))?;

    let image_path = dir.join("image.raw");
    let image_bytes = fs::read(&image_path).map_err(|e| CoreError::io(&image_path, e))?;
    if image_bytes.len() != n * 4 {
        return Err(CoreError::format(
            &image_path,
            format!(
                "payload size {} does not match header shape {:?} ({} bytes expected)",
                image_bytes.len(),
                meta.shape,
                n * 4
            ),
        ));
    }
    let mut image_data = Vec::with_capacity(n);
    for chunk in image_bytes.chunks_exact(4) {
        image_data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }

    let label_path = dir.join("label.raw");
    let label_bytes = fs::read(&label_path).map_err(|e| CoreError::io(&label_path, e))?;
    if label_bytes.len() != n {
        return Err(CoreError::format(
            &label_path,
            format!(
                "payload size {} does not match header shape {:?} ({} bytes expected)",
                label_bytes.len(),
                meta.shape,
                n
            ),
        ));
    }
    if let Some(&bad) = label_bytes.iter().find(|&&v| v as usize >= NUM_CLASSES) {
        return Err(CoreError::format(
            &label_path,
            format!("label value {bad} out of range 0..=3"),
        ));
    }

    let image = Array4::from_shape_vec((p, h, w, z), image_data).expect("size checked");
    let label = Array4::from_shape_vec((p, h, w, z), label_bytes).expect("size checked");
    let case = Case4D {
        case_id: meta.case_id,
        disease: meta.disease,
        image,
        label,
        ed_index: meta.ed_index,
        es_index: meta.es_index,
        pixel_spacing_mm: meta.pixel_spacing_mm,
    };
    case.validate()?;
    Ok(case)
}
