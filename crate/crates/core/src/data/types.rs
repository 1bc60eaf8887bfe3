use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Segmentation classes: 0 = background, 1 = RV, 2 = MYO, 3 = LV.
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "RV", "MYO", "LV"];

/// Short disease identifier, e.g. "NOR" or "DCM". Unique within a manifest.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiseaseKey(pub String);

impl DiseaseKey {
    pub fn new(name: impl Into<String>) -> Self {
        DiseaseKey(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DiseaseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "ES")]
    Es,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Ed => "ED",
            Phase::Es => "ES",
        }
    }

    pub const BOTH: [Phase; 2] = [Phase::Ed, Phase::Es];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One patient's 4D image + label volumes, tagged with a disease key.
///
/// Arrays are shaped `(P, H, W, Z)`: cardiac phase, height, width, slice.
#[derive(Debug, Clone)]
pub struct Case4D {
    pub case_id: String,
    pub disease: DiseaseKey,
    pub image: Array4<f32>,
    pub label: Array4<u8>,
    pub ed_index: usize,
    pub es_index: usize,
    pub pixel_spacing_mm: Option<[f64; 2]>,
}

impl Case4D {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| CoreError::InvalidCase {
            case_id: self.case_id.clone(),
            msg,
        };
        let (p, h, w, z) = self.image.dim();
        if self.label.dim() != (p, h, w, z) {
            return Err(invalid(format!(
                "image shape {:?} != label shape {:?}",
                self.image.dim(),
                self.label.dim()
            )));
        }
        if self.ed_index >= p || self.es_index >= p {
            return Err(invalid(format!(
                "phase indices ({}, {}) out of range for P = {p}",
                self.ed_index, self.es_index
            )));
        }
        if self.ed_index == self.es_index {
            return Err(invalid(format!(
                "ed_index = es_index = {}",
                self.ed_index
            )));
        }
        if let Some(&bad) = self.label.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(invalid(format!("label value {bad} out of range 0..=3")));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.image.dim()
    }
}

/// One 2D image/label pair — the unit of training.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub case_id: String,
    pub disease: DiseaseKey,
    pub phase: Phase,
    pub slice_index: usize,
    pub image: Array2<f64>,
    pub label: Array2<u8>,
}

/// All 2D samples of a single disease; `n()` is the sample count n_k.
#[derive(Debug, Clone)]
pub struct DiseaseDataset {
    pub disease: DiseaseKey,
    pub samples: Vec<SliceSample>,
}

impl DiseaseDataset {
    pub fn n(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCase {
    pub case_id: String,
    pub disease: DiseaseKey,
    /// Case directory, relative to the manifest file's directory.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_spacing_mm: Option<[f64; 2]>,
}

/// On-disk listing of one dataset split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    pub split: Split,
    pub diseases: Vec<DiseaseKey>,
    pub cases: Vec<ManifestCase>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CoreError::json(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.diseases {
            if d.as_str().is_empty() {
                return Err(CoreError::Config("empty disease key in manifest".into()));
            }
        }
        let mut sorted = self.diseases.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.diseases.len() {
            return Err(CoreError::Config("duplicate disease key in manifest".into()));
        }
        for case in &self.cases {
            if !self.diseases.contains(&case.disease) {
                return Err(CoreError::Config(format!(
                    "case {} references disease {} not in the manifest disease set",
                    case.case_id, case.disease
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn tiny_case(ed: usize, es: usize) -> Case4D {
        Case4D {
            case_id: "c0".into(),
            disease: DiseaseKey::new("NOR"),
            image: Array4::zeros((2, 4, 4, 1)),
            label: Array4::zeros((2, 4, 4, 1)),
            ed_index: ed,
            es_index: es,
            pixel_spacing_mm: None,
        }
    }

    #[test]
    fn equal_phase_indices_rejected() {
        let case = tiny_case(0, 0);
        assert!(matches!(
            case.validate(),
            Err(CoreError::InvalidCase { .. })
        ));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut case = tiny_case(0, 1);
        case.label[[0, 1, 1, 0]] = 5;
        assert!(case.validate().is_err());
    }

    #[test]
    fn manifest_rejects_unknown_disease() {
        let manifest = Manifest {
            dataset_name: "d".into(),
            split: Split::Train,
            diseases: vec![DiseaseKey::new("NOR")],
            cases: vec![ManifestCase {
                case_id: "x".into(),
                disease: DiseaseKey::new("DCM"),
                path: "train/x".into(),
                pixel_spacing_mm: None,
            }],
        };
        assert!(manifest.validate().is_err());
    }
}
