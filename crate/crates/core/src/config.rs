//! Run configuration: a single JSON file with `data`, `model`, `train`,
//! `mask`, `optim`, and `eval` sections. CLI flags override individual keys.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub data: SynthConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub mask: MaskSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::json(path, e))
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }
}

/// Shape-parameter ranges for one synthetic disease. Ranges are sampled
/// uniformly per case; all lengths are in pixels of the generated grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiseaseSpec {
    pub name: String,
    pub train_cases: usize,
    pub test_cases: usize,
    /// Radius of the blood-pool cavity (class 3).
    pub lv_radius: [f64; 2],
    /// Thickness of the muscular annulus (class 2) around the cavity.
    pub myo_thickness: [f64; 2],
    /// Radial breadth of the crescent (class 1) hugging the annulus.
    pub rv_width: [f64; 2],
    /// Angular span of the crescent, degrees.
    pub rv_arc_deg: [f64; 2],
    /// Orientation of the crescent center on the annulus, degrees.
    #[serde(default = "default_rv_angle")]
    pub rv_angle_deg: [f64; 2],
    /// Crescent width retained at the end-systolic phase, as a fraction of
    /// its end-diastolic width.
    #[serde(default = "default_rv_es_factor")]
    pub rv_es_factor: [f64; 2],
}

fn default_rv_angle() -> [f64; 2] {
    [165.0, 195.0]
}

fn default_rv_es_factor() -> [f64; 2] {
    [0.5, 0.7]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntensityMeans {
    pub background: f64,
    pub rv: f64,
    pub myo: f64,
    pub lv: f64,
}

impl Default for IntensityMeans {
    fn default() -> Self {
        IntensityMeans {
            background: 0.20,
            rv: 0.75,
            myo: 0.45,
            lv: 0.85,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dataset_name: String,
    /// Grid side; generated cases are square (H = W = grid).
    pub grid: usize,
    pub z_slices: usize,
    pub phases: usize,
    pub diseases: Vec<DiseaseSpec>,
    /// Additive Gaussian noise, as a fraction of the intensity range.
    pub noise_sigma: f64,
    #[serde(default)]
    pub intensity: IntensityMeans,
    /// Structure scale at the apical slice (base slice is 1.0).
    pub apex_scale: f64,
    /// Cavity contraction factor range at the end-systolic phase.
    pub es_contraction: [f64; 2],
    /// Max random offset of the heart center from the grid center.
    pub center_jitter: f64,
    /// Per-case elliptical distortion range: axes are scaled by (1 +- e)
    /// along a random orientation.
    #[serde(default)]
    pub eccentricity: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dataset_name: "phantom".to_string(),
            grid: 32,
            z_slices: 3,
            phases: 4,
            diseases: Vec::new(),
            noise_sigma: 0.05,
            intensity: IntensityMeans::default(),
            apex_scale: 0.65,
            es_contraction: [0.72, 0.85],
            center_jitter: 1.5,
            eccentricity: [0.0, 0.15],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub depth: usize,
    pub base_channels: usize,
    pub attention: bool,
    pub attention_heads: usize,
    /// Model input (H, W); training data is resized to this shape.
    pub input: [usize; 2],
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            depth: 3,
            base_channels: 16,
            attention: false,
            attention_heads: 1,
            input: [32, 32],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    /// "nts" or "mts".
    pub strategy: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub runs: usize,
    /// Per-slice standardization of image intensities before model input.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            strategy: "nts".to_string(),
            batch_size: 8,
            epochs: 8,
            seed: 42,
            runs: 5,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSection {
    /// "ideal", "gaussian", or "none".
    pub kind: String,
    pub lambda: f64,
    #[serde(default)]
    pub paper_literal_center_range: bool,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection {
            kind: "ideal".to_string(),
            lambda: 0.25,
            paper_literal_center_range: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimSection {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    /// Pixel spacing (row, col) assumed when a case carries none.
    pub default_spacing_mm: [f64; 2],
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            default_spacing_mm: [1.0, 1.0],
        }
    }
}
