use cardioseg_core::config::{DiseaseSpec, OptimSection, SynthConfig};
use cardioseg_core::data::{build_disease_datasets, synth_generate, Phase};
use cardioseg_core::metrics::{cross_validate, EvalOptions};
use cardioseg_core::model::ModelConfig;
use cardioseg_core::sampler::Strategy;
use cardioseg_core::train::{run_matrix, Arm, RunHistory, RunsetIndex, TrainConfig};

fn spec(name: &str, tr: usize, te: usize, lv: [f64;2], myo: [f64;2], rvw: [f64;2], arc: [f64;2], ang: [f64;2], es: [f64;2]) -> DiseaseSpec {
    DiseaseSpec { name: name.into(), train_cases: tr, test_cases: te, lv_radius: lv, myo_thickness: myo, rv_width: rvw, rv_arc_deg: arc, rv_angle_deg: ang, rv_es_factor: es }
}

#[test]
fn trend() {
    let n_seeds = 5usize;
    let cfg = SynthConfig {
        dataset_name: "phantom5".into(),
        grid: 32, z_slices: 3, phases: 4,
        diseases: vec![
            spec("NOR",  28, 2, [4.0,4.8], [2.0,2.5], [2.2,2.8], [140.0,180.0], [165.0,195.0], [0.42,0.55]),
            spec("MINF",  4, 2, [4.2,5.0], [1.5,1.9], [2.4,3.0], [150.0,190.0], [205.0,245.0], [0.45,0.60]),
            spec("DCM",   3, 2, [6.0,7.0], [1.5,1.9], [2.8,3.6], [170.0,220.0], [95.0,135.0], [0.60,0.75]),
            spec("HCM",   3, 2, [3.0,3.8], [3.3,4.1], [2.0,2.6], [130.0,170.0], [255.0,295.0], [0.70,0.85]),
            spec("ARV",   2, 2, [4.0,4.8], [2.0,2.5], [4.5,5.5], [260.0,330.0], [300.0,350.0], [0.92,1.0]),
        ],
        apex_scale: 0.75,
        noise_sigma: 0.10,
        intensity: cardioseg_core::config::IntensityMeans { background: 0.2, rv: 0.85, myo: 0.45, lv: 0.85 },
        ..SynthConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (train_m, test_m) = synth_generate(&cfg, 1234, dir.path()).unwrap();
    let datasets = build_disease_datasets(&train_m, dir.path(), 32, 32).unwrap();
    let tc = TrainConfig {
        strategy: Strategy::Nts, key: false, epochs: 8, batch_size: 3,
        mask: Some(cardioseg_core::mask::MaskSpec::new(cardioseg_core::mask::MaskKind::Ideal, 0.19).unwrap()),
        model: ModelConfig { depth: 2, base_channels: 6, num_classes: 4, attention_bottleneck: false, attention_heads: 1, input_size: (32, 32) },
        optim: OptimSection { lr: 5e-3, ..OptimSection::default() }, seed: 9000, runs: n_seeds, normalize: true,
    };
    let rs = dir.path().join("runset");
    let t0 = std::time::Instant::now();
    run_matrix(&datasets, &tc, &Arm::ALL, n_seeds, &rs).unwrap();
    println!("train wall: {:?}", t0.elapsed());
    let (table, fails) = cross_validate(&rs, &test_m, dir.path(), &EvalOptions::default()).unwrap();
    assert!(fails.is_empty(), "{fails:?}");
    // Per arm per run: RV dice / RV hd averaged over phases (ALL-disease rows).
    for arm in Arm::ALL {
        for run in 0..n_seeds {
            let rows: Vec<_> = table.rows.iter().filter(|r| r.arm == arm.name() && r.run == run && r.disease == "ALL" && r.class_id == 1).collect();
            let dice: f64 = rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64;
            let hd: f64 = rows.iter().filter_map(|r| r.hd).sum::<f64>() / rows.iter().filter(|r| r.hd.is_some()).count() as f64;
            let hist = RunHistory::load(&rs.join(format!("histories/{}_run{run}.json", arm.name()))).unwrap();
            println!("{:8} run {run}: RV dice {dice:.4} hd {hd:.3} l1_final {:.1}", arm.name(), hist.l1_norm.last().unwrap());
        }
        // also all-class mean
        let rows: Vec<_> = table.rows.iter().filter(|r| r.arm == arm.name() && r.disease == "ALL").collect();
        let dice: f64 = rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64;
        println!("{:8} mean all-class dice {dice:.4}", arm.name());
    }
    // Per-disease RV dice means over runs (ES phase only).
    for arm in Arm::ALL {
        let mut line = format!("{:8} RV ES per-disease:", arm.name());
        for dis in ["NOR", "MINF", "DCM", "HCM", "ARV"] {
            let rows: Vec<_> = table.rows.iter().filter(|r| r.arm == arm.name() && r.disease == dis && r.class_id == 1 && r.phase == Phase::Es).collect();
            let dice: f64 = rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64;
            let hd: f64 = rows.iter().filter_map(|r| r.hd).sum::<f64>() / rows.iter().filter(|r| r.hd.is_some()).count().max(1) as f64;
            line.push_str(&format!(" {dis} {dice:.3}/{hd:.2}"));
        }
        println!("{line}");
    }
    let _ = RunsetIndex::load(&rs).unwrap();
}
