use std::time::Instant;
use cardioseg_core::config::{DiseaseSpec, SynthConfig};
use cardioseg_core::config::OptimSection;
use cardioseg_core::data::{build_disease_datasets, synth_generate};
use cardioseg_core::model::ModelConfig;
use cardioseg_core::sampler::Strategy;
use cardioseg_core::train::{train_nts, TrainConfig};

#[test]
fn timing() {
    let cfg = SynthConfig {
        dataset_name: "t".into(),
        grid: 32, z_slices: 3, phases: 4,
        diseases: vec![
            DiseaseSpec { name: "A".into(), train_cases: 8, test_cases: 1, lv_radius: [4.0, 5.0], myo_thickness: [2.0, 2.6], rv_width: [2.2, 3.0], rv_arc_deg: [150.0, 200.0] },
            DiseaseSpec { name: "B".into(), train_cases: 8, test_cases: 1, lv_radius: [4.0, 5.0], myo_thickness: [2.0, 2.6], rv_width: [3.8, 4.6], rv_arc_deg: [240.0, 300.0] },
        ],
        ..SynthConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let (train_m, _) = synth_generate(&cfg, 1, dir.path()).unwrap();
    println!("synth: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let datasets = build_disease_datasets(&train_m, dir.path(), 32, 32).unwrap();
    println!("load: {:?} ({} samples)", t0.elapsed(), datasets.values().map(|d| d.n()).sum::<usize>());
    let tc = TrainConfig {
        strategy: Strategy::Nts, key: false, epochs: 2, batch_size: 8,
        mask: None,
        model: ModelConfig { depth: 2, base_channels: 8, num_classes: 4, attention_bottleneck: false, attention_heads: 1, input_size: (32, 32) },
        optim: OptimSection::default(), seed: 3, runs: 1, normalize: true,
    };
    let t0 = Instant::now();
    let (_, hist) = train_nts(&datasets, &tc).unwrap();
    let steps: usize = hist.optimizer_steps as usize;
    println!("train 2 epochs ({} steps of 8): {:?}  loss {:?} -> {:?}", steps, t0.elapsed(), hist.epoch_loss.first(), hist.epoch_loss.last());
}
