//! Dataset model: disease-keyed 4D cases, their restructuring into 2D slice
//! samples, the on-disk case format, and the synthetic phantom generator.

mod io;
mod slices;
mod synth;
mod types;

pub use io::{read_case, write_case, CaseMeta};
pub use slices::{
    build_disease_datasets, normalize_slice, pool_samples, resize_image_plane, resize_label_plane,
    resize_sample, restore_label_plane, restructure_case,
};
pub use synth::synth_generate;
pub use types::{
    Case4D, DiseaseDataset, DiseaseKey, Manifest, ManifestCase, Phase, SliceSample, Split,
    CLASS_NAMES, NUM_CLASSES,
};
