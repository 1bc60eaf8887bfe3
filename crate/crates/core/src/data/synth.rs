//! Synthetic multi-disease phantom generator.
//!
//! Each case is a short-axis cartoon: a circular blood-pool cavity (LV,
//! class 3) inside a muscular annulus (MYO, class 2) with a crescent (RV,
//! class 1) attached to the annulus. Disease specs control the
//! shape-parameter distributions; the ES phase is a contracted version of
//! ED; slices shrink toward the apex. Intensities are class-dependent means
//! plus additive Gaussian noise. Output is deterministic in (config, seed)
//! down to the byte level.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::types::{Case4D, DiseaseKey, Manifest, ManifestCase, Split};
use crate::config::SynthConfig;
use crate::error::{CoreError, Result};
use crate::util::derive_seed;

/// Standard normal draw via Box-Muller; two uniforms per call keeps the
/// stream layout independent of any library's ziggurat tables.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn sample_range(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

struct CaseParams {
    lv_radius: f64,
    myo_thickness: f64,
    rv_width: f64,
    rv_arc: f64,
    rv_angle: f64,
    rv_es_factor: f64,
    center: (f64, f64),
    es_contraction: f64,
    /// Elliptical distortion: axis scales applied in a rotated frame.
    ecc: f64,
    ecc_angle: f64,
}

fn sample_case_params(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    spec: &crate::config::DiseaseSpec,
) -> CaseParams {
    let lv_radius = sample_range(rng, spec.lv_radius);
    let myo_thickness = sample_range(rng, spec.myo_thickness);
    let rv_width = sample_range(rng, spec.rv_width);
    let rv_arc = sample_range(rng, spec.rv_arc_deg).to_radians();
    let rv_angle = sample_range(rng, spec.rv_angle_deg).to_radians();
    let rv_es_factor = sample_range(rng, spec.rv_es_factor);
    let half = cfg.grid as f64 / 2.0;
    let ju = rng.random_range(-cfg.center_jitter..cfg.center_jitter);
    let jv = rng.random_range(-cfg.center_jitter..cfg.center_jitter);
    let es_contraction = sample_range(rng, cfg.es_contraction);
    let ecc = sample_range(rng, cfg.eccentricity);
    let ecc_angle = rng.random_range(0.0..PI);
    CaseParams {
        lv_radius,
        myo_thickness,
        rv_width,
        rv_arc,
        rv_angle,
        rv_es_factor,
        center: (half + ju, half + jv),
        es_contraction,
        ecc,
        ecc_angle,
    }
}

fn angular_distance(a: f64, b: f64) -> f64 {
    let mut d = (a - b) % (2.0 * PI);
    if d > PI {
        d -= 2.0 * PI;
    }
    if d < -PI {
        d += 2.0 * PI;
    }
    d.abs()
}

fn label_pixel(u: usize, v: usize, p: &CaseParams, phase_factor: f64, slice_scale: f64) -> u8 {
    let lv_r = p.lv_radius * phase_factor * slice_scale;
    // The wall thickens as the cavity contracts.
    let myo_t = (p.myo_thickness + 0.5 * p.lv_radius * (1.0 - phase_factor)) * slice_scale;
    // The crescent keeps a disease-dependent fraction of its width at ES.
    let es_amount = (1.0 - phase_factor) / (1.0 - p.es_contraction).max(1e-9);
    let rv_phase = 1.0 - (1.0 - p.rv_es_factor) * es_amount.clamp(0.0, 1.0);
    let rv_w = p.rv_width * rv_phase * slice_scale;
    let du = u as f64 - p.center.0;
    let dv = v as f64 - p.center.1;
    // Elliptical distortion in a rotated frame.
    let (sin_e, cos_e) = p.ecc_angle.sin_cos();
    let a = (du * cos_e + dv * sin_e) * (1.0 + p.ecc);
    let b = (-du * sin_e + dv * cos_e) * (1.0 - p.ecc);
    let d = (a * a + b * b).sqrt();
    let r_out = lv_r + myo_t;
    if d <= lv_r {
        3
    } else if d <= r_out {
        2
    } else if d <= r_out + rv_w && angular_distance(du.atan2(dv), p.rv_angle) <= p.rv_arc / 2.0 {
        1
    } else {
        0
    }
}

fn phase_factor(p: usize, ed: usize, es: usize, contraction: f64) -> f64 {
    if p == ed {
        1.0
    } else if p == es {
        contraction
    } else {
        (1.0 + contraction) / 2.0
    }
}

fn slice_scale(z: usize, z_count: usize, apex_scale: f64) -> f64 {
    if z_count <= 1 {
        1.0
    } else {
        apex_scale + (1.0 - apex_scale) * (z as f64) / ((z_count - 1) as f64)
    }
}

fn generate_case(cfg: &SynthConfig, rng: &mut ChaCha8Rng, params: &CaseParams, id: &str, disease: &DiseaseKey) -> Case4D {
    let (p_count, grid, z_count) = (cfg.phases, cfg.grid, cfg.z_slices);
    let ed_index = 0;
    let es_index = p_count / 2;
    let means = [
        cfg.intensity.background,
        cfg.intensity.rv,
        cfg.intensity.myo,
        cfg.intensity.lv,
    ];
    let mut image = Array4::<f32>::zeros((p_count, grid, grid, z_count));
    let mut label = Array4::<u8>::zeros((p_count, grid, grid, z_count));
    for p in 0..p_count {
        let pf = phase_factor(p, ed_index, es_index, params.es_contraction);
        for u in 0..grid {
            for v in 0..grid {
                for z in 0..z_count {
                    let sz = slice_scale(z, z_count, cfg.apex_scale);
                    let cls = label_pixel(u, v, params, pf, sz);
                    label[[p, u, v, z]] = cls;
                    let value = means[cls as usize] + cfg.noise_sigma * gauss(rng);
                    image[[p, u, v, z]] = value as f32;
                }
            }
        }
    }
    Case4D {
        case_id: id.to_string(),
        disease: disease.clone(),
        image,
        label,
        ed_index,
        es_index,
        pixel_spacing_mm: None,
    }
}

fn validate_config(cfg: &SynthConfig) -> Result<()> {
    if cfg.diseases.len() < 2 {
        return Err(CoreError::Config(
            "synthetic config needs at least 2 diseases".into(),
        ));
    }
    if cfg.phases < 2 {
        return Err(CoreError::Config("phases must be >= 2".into()));
    }
    if cfg.z_slices < 1 {
        return Err(CoreError::Config("z_slices must be >= 1".into()));
    }
    if !(0.0 < cfg.es_contraction[0] && cfg.es_contraction[1] <= 1.0) {
        return Err(CoreError::Config(
            "es_contraction range must lie in (0, 1]".into(),
        ));
    }
    let mut names: Vec<&str> = cfg.diseases.iter().map(|d| d.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != cfg.diseases.len() {
        return Err(CoreError::Config("duplicate disease names".into()));
    }
    for d in &cfg.diseases {
        if d.train_cases == 0 {
            return Err(CoreError::Config(format!(
                "disease {} has no training cases",
                d.name
            )));
        }
        // Largest structure must stay inside the grid at the basal slice.
        let reach = d.lv_radius[1].max(d.lv_radius[0])
            + d.myo_thickness[1].max(d.myo_thickness[0])
            + d.rv_width[1].max(d.rv_width[0])
            + cfg.center_jitter;
        if reach + 1.0 >= cfg.grid as f64 / 2.0 {
            return Err(CoreError::Config(format!(
                "grid {} too small to contain structures of disease {} (reach {:.1})",
                cfg.grid, d.name, reach
            )));
        }
    }
    Ok(())
}

/// Generates train and test case sets under `out_dir` and writes one
/// manifest per split (`manifest_train.json`, `manifest_test.json`).
/// Returns the two manifests.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<(Manifest, Manifest)> {
    validate_config(cfg)?;
    let mut manifests = Vec::with_capacity(2);
    for split in [Split::Train, Split::Test] {
        let mut cases = Vec::new();
        for spec in &cfg.diseases {
            let disease = DiseaseKey::new(spec.name.clone());
            let count = match split {
                Split::Train => spec.train_cases,
                Split::Test => spec.test_cases,
            };
            for idx in 0..count {
                let case_id = format!("{}_{}{:02}", spec.name, split.as_str(), idx);
                let stream = derive_seed(seed, &format!("{}/{}", cfg.dataset_name, case_id));
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                let params = sample_case_params(&mut rng, cfg, spec);
                let case = generate_case(cfg, &mut rng, &params, &case_id, &disease);
                let rel_path = format!("{}/{}", split.as_str(), case_id);
                super::write_case(&case, &out_dir.join(&rel_path))?;
                cases.push(ManifestCase {
                    case_id,
                    disease: disease.clone(),
                    path: rel_path,
                    pixel_spacing_mm: None,
                });
            }
        }
        let manifest = Manifest {
            dataset_name: cfg.dataset_name.clone(),
            split,
            diseases: cfg
                .diseases
                .iter()
                .map(|d| DiseaseKey::new(d.name.clone()))
                .collect(),
            cases,
        };
        manifest.save(&out_dir.join(format!("manifest_{}.json", split.as_str())))?;
        manifests.push(manifest);
    }
    let mut it = manifests.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DiseaseSpec;

    fn two_disease_config() -> SynthConfig {
        SynthConfig {
            dataset_name: "mini".into(),
            grid: 32,
            z_slices: 3,
            phases: 4,
            diseases: vec![
                DiseaseSpec {
                    name: "NOR".into(),
                    train_cases: 2,
                    test_cases: 1,
                    lv_radius: [4.0, 5.0],
                    myo_thickness: [2.0, 2.6],
                    rv_width: [2.2, 3.0],
                    rv_arc_deg: [150.0, 200.0],
                    rv_angle_deg: [165.0, 195.0],
                    rv_es_factor: [0.5, 0.7],
                },
                DiseaseSpec {
                    name: "ARV".into(),
                    train_cases: 2,
                    test_cases: 1,
                    lv_radius: [4.0, 5.0],
                    myo_thickness: [2.0, 2.6],
                    rv_width: [3.8, 4.6],
                    rv_arc_deg: [240.0, 300.0],
                    rv_angle_deg: [165.0, 195.0],
                    rv_es_factor: [0.5, 0.7],
                },
            ],
            ..SynthConfig::default()
        }
    }

    fn dir_digest(root: &Path) -> Vec<(String, u64)> {
        fn fnv(bytes: &[u8]) -> u64 {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h
        }
        let mut entries = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
                    entries.push((rel, fnv(&std::fs::read(&path).unwrap())));
                }
            }
        }
        entries.sort();
        entries
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let cfg = two_disease_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_generate(&cfg, 7, d1.path()).unwrap();
        synth_generate(&cfg, 7, d2.path()).unwrap();
        assert_eq!(dir_digest(d1.path()), dir_digest(d2.path()));
    }

    #[test]
    fn different_seed_changes_output() {
        let cfg = two_disease_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_generate(&cfg, 7, d1.path()).unwrap();
        synth_generate(&cfg, 8, d2.path()).unwrap();
        assert_ne!(dir_digest(d1.path()), dir_digest(d2.path()));
    }

    #[test]
    fn mid_slices_contain_all_foreground_classes() {
        let cfg = two_disease_config();
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = synth_generate(&cfg, 3, dir.path()).unwrap();
        for entry in &train.cases {
            let case = super::super::read_case(&dir.path().join(&entry.path)).unwrap();
            let (p_count, _, _, z) = case.shape();
            let mid = z / 2;
            for p in [case.ed_index, case.es_index] {
                assert!(p < p_count);
                let mut counts = [0usize; 4];
                for u in 0..cfg.grid {
                    for v in 0..cfg.grid {
                        counts[case.label[[p, u, v, mid]] as usize] += 1;
                    }
                }
                for cls in 1..4 {
                    assert!(
                        counts[cls] > 0,
                        "case {} phase {p} missing class {cls}",
                        entry.case_id
                    );
                }
            }
        }
    }

    #[test]
    fn enlarged_rv_has_more_rv_pixels() {
        let mut cfg = two_disease_config();
        cfg.diseases[0].train_cases = 20;
        cfg.diseases[1].train_cases = 20;
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = synth_generate(&cfg, 11, dir.path()).unwrap();
        let mut sums = std::collections::BTreeMap::new();
        for entry in &train.cases {
            let case = super::super::read_case(&dir.path().join(&entry.path)).unwrap();
            let rv = case.label.iter().filter(|&&v| v == 1).count();
            *sums.entry(entry.disease.clone()).or_insert(0usize) += rv;
        }
        let nor = sums[&DiseaseKey::new("NOR")] as f64 / 20.0;
        let arv = sums[&DiseaseKey::new("ARV")] as f64 / 20.0;
        assert!(
            arv > nor,
            "expected enlarged-RV mean pixel count to exceed normal ({arv} vs {nor})"
        );
    }

    #[test]
    fn es_phase_has_smaller_cavity() {
        let cfg = two_disease_config();
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = synth_generate(&cfg, 5, dir.path()).unwrap();
        let case = super::super::read_case(&dir.path().join(&train.cases[0].path)).unwrap();
        let count_lv = |p: usize| -> usize {
            (0..cfg.grid)
                .flat_map(|u| (0..cfg.grid).map(move |v| (u, v)))
                .filter(|&(u, v)| case.label[[p, u, v, cfg.z_slices - 1]] == 3)
                .count()
        };
        assert!(count_lv(case.es_index) < count_lv(case.ed_index));
    }

    #[test]
    fn too_small_grid_rejected() {
        let mut cfg = two_disease_config();
        cfg.grid = 12;
        let dir = tempfile::tempdir().unwrap();
        let err = synth_generate(&cfg, 1, dir.path()).unwrap_err();
        assert!(err.to_string().contains("too small"));
    }

    #[test]
    fn single_disease_rejected() {
        let mut cfg = two_disease_config();
        cfg.diseases.truncate(1);
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_generate(&cfg, 1, dir.path()).is_err());
    }
}
