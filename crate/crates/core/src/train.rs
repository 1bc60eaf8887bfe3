//! Training orchestration over the four strategy arms: per-disease batch
//! schedules vs. pooled batches, each with complete or occluded training
//! images. One optimizer step per schedule step in both algorithms; for the
//! multi-disease schedule the per-disease sub-losses are backpropagated into
//! one accumulated gradient, which equals the gradient of their sum.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::OptimSection;
use crate::data::{DiseaseDataset, DiseaseKey, SliceSample};
use crate::error::{CoreError, Result};
use crate::mask::{apply_mask, sample_realization, MaskSpec};
use crate::model::{
    cross_entropy_grad, cross_entropy_loss, save_checkpoint, Adam, ModelConfig, SegNet,
};
use crate::sampler::{mts_epoch_schedule, nts_epoch_schedule, Strategy};
use crate::util::derive_seed;

/// One cell of the experiment matrix: a strategy plus the data condition
/// (incomplete when `itd`, complete otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Arm {
    pub strategy: Strategy,
    pub itd: bool,
}

impl Arm {
    pub const ALL: [Arm; 4] = [
        Arm { strategy: Strategy::Nts, itd: false },
        Arm { strategy: Strategy::Nts, itd: true },
        Arm { strategy: Strategy::Mts, itd: false },
        Arm { strategy: Strategy::Mts, itd: true },
    ];

    pub fn name(&self) -> String {
        format!(
            "{}+{}",
            self.strategy.as_str(),
            if self.itd { "itd" } else { "ctd" }
        )
    }

    pub fn parse(s: &str) -> Result<Arm> {
        let lower = s.to_ascii_lowercase();
        let (strat, data) = lower
            .split_once('+')
            .ok_or_else(|| CoreError::Config(format!("arm '{s}' must look like mts+itd")))?;
        let strategy = Strategy::parse(strat)?;
        let itd = match data {
            "itd" => true,
            "ctd" => false,
            other => {
                return Err(CoreError::Config(format!(
                    "unknown data condition '{other}' (want ctd or itd)"
                )))
            }
        };
        Ok(Arm { strategy, itd })
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// KEY: occlude training images when true (ITD), keep them when false.
    pub key: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask: Option<MaskSpec>,
    pub model: ModelConfig,
    pub optim: OptimSection,
    pub seed: u64,
    pub runs: usize,
    pub normalize: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::Config("epochs must be >= 1".into()));
        }
        if self.runs == 0 {
            return Err(CoreError::Config("runs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if self.key && self.mask.is_none() {
            return Err(CoreError::Config(
                "incomplete training data requires a mask spec".into(),
            ));
        }
        self.model.validate()
    }

    pub fn arm(&self) -> Arm {
        Arm {
            strategy: self.strategy,
            itd: self.key,
        }
    }
}

/// Per-run record: losses, weight norms, and occlusion bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunHistory {
    pub arm: String,
    pub seed: u64,
    pub epochs: usize,
    /// Mean per-step training loss per epoch (for the multi-disease
    /// schedule the step loss is the sum over disease sub-losses).
    pub epoch_loss: Vec<f64>,
    /// Mean sub-loss per disease per epoch; empty for pooled training.
    pub per_disease_loss: BTreeMap<String, Vec<f64>>,
    /// L1 norm of all parameters at the end of each epoch.
    pub l1_norm: Vec<f64>,
    /// Occluded image visits per disease ("pooled" for NTS).
    pub masked_visits: BTreeMap<String, u64>,
    pub total_masked_visits: u64,
    pub optimizer_steps: u64,
    pub wall_time_secs: f64,
    /// Relative checkpoint path, filled in by the run-set writer.
    pub checkpoint: Option<String>,
}

impl RunHistory {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("history serializes");
        fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RunHistory> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::json(path, e))
    }
}

/// Step-level instrumentation hooks for tests and probes.
pub trait TrainObserver {
    fn on_step(&mut self, _epoch: usize, _step: usize, _sub_losses: &[(String, f64)], _total: f64) {}
    /// Called with every image batch exactly as it enters the forward pass.
    fn on_forward_batch(&mut self, _images: &Array4<f64>) {}
}

pub struct NoopObserver;
impl TrainObserver for NoopObserver {}

fn assemble_batch(
    samples: &[&SliceSample],
    refs: &[usize],
    cfg: &TrainConfig,
    mask_rng: &mut ChaCha8Rng,
    visit_key: &str,
    history: &mut RunHistory,
) -> Result<(Array4<f64>, Array3<u8>)> {
    let (h, w) = cfg.model.input_size;
    let b = refs.len();
    let mut images = Array4::<f64>::zeros((b, 1, h, w));
    let mut labels = Array3::<u8>::zeros((b, h, w));
    for (i, &r) in refs.iter().enumerate() {
        let sample = samples[r];
        if sample.image.dim() != (h, w) {
            return Err(CoreError::ShapeMismatch(format!(
                "sample {:?} vs model input ({h}, {w})",
                sample.image.dim()
            )));
        }
        let mut img = if cfg.normalize {
            crate::data::normalize_slice(&sample.image)
        } else {
            sample.image.clone()
        };
        if cfg.key {
            let spec = cfg.mask.as_ref().expect("validated");
            let real = sample_realization(spec, h, w, mask_rng)?;
            img = apply_mask(&img, &real.grid)?;
            *history.masked_visits.entry(visit_key.to_string()).or_insert(0) += 1;
            history.total_masked_visits += 1;
        }
        images.slice_mut(ndarray::s![i, 0, .., ..]).assign(&img);
        labels.slice_mut(ndarray::s![i, .., ..]).assign(&sample.label);
    }
    Ok((images, labels))
}

fn train_loop(
    datasets: &BTreeMap<DiseaseKey, DiseaseDataset>,
    pooled: Option<&[&SliceSample]>,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<(SegNet, RunHistory)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = SegNet::init(&cfg.model, cfg.seed)?;
    let mut adam = Adam::from_section(&cfg.optim);
    let mut data_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "data"));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mask"));
    let mut history = RunHistory {
        arm: cfg.arm().name(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        epoch_loss: Vec::with_capacity(cfg.epochs),
        per_disease_loss: BTreeMap::new(),
        l1_norm: Vec::with_capacity(cfg.epochs),
        masked_visits: BTreeMap::new(),
        total_masked_visits: 0,
        optimizer_steps: 0,
        wall_time_secs: 0.0,
        checkpoint: None,
    };

    // Per-disease sample slices for the MTS path.
    let per_disease: BTreeMap<&DiseaseKey, Vec<&SliceSample>> = datasets
        .iter()
        .map(|(k, d)| (k, d.samples.iter().collect::<Vec<_>>()))
        .collect();

    for epoch in 0..cfg.epochs {
        let plan = match cfg.strategy {
            Strategy::Mts => mts_epoch_schedule(datasets, cfg.batch_size, &mut data_rng)?,
            Strategy::Nts => {
                let len = pooled.map(|p| p.len()).unwrap_or(0);
                nts_epoch_schedule(len, cfg.batch_size, &mut data_rng)?
            }
        };
        let mut epoch_loss_sum = 0.0;
        let mut disease_loss_sum: BTreeMap<String, f64> = BTreeMap::new();
        let n_steps = plan.steps.len();
        for (step, sub_batches) in plan.steps.iter().enumerate() {
            model.zero_grad();
            let mut total = 0.0;
            let mut logged: Vec<(String, f64)> = Vec::with_capacity(sub_batches.len());
            for sb in sub_batches {
                let (samples, visit_key): (&[&SliceSample], &str) = match &sb.disease {
                    Some(key) => (per_disease[key].as_slice(), key.as_str()),
                    None => (pooled.expect("pooled samples for nts"), "pooled"),
                };
                let (images, labels) =
                    assemble_batch(samples, &sb.sample_refs, cfg, &mut mask_rng, visit_key, &mut history)?;
                obs.on_forward_batch(&images);
                let pred = model.forward(&images)?;
                let loss = cross_entropy_loss(&pred, &labels)?;
                if !loss.is_finite() {
                    return Err(CoreError::NonFiniteLoss { epoch, step });
                }
                let dlogits = cross_entropy_grad(&pred, &labels)?;
                model.backward(&dlogits);
                total += loss;
                logged.push((visit_key.to_string(), loss));
            }
            obs.on_step(epoch, step, &logged, total);
            adam.step(&mut model.params_mut())?;
            history.optimizer_steps += 1;
            epoch_loss_sum += total;
            if cfg.strategy == Strategy::Mts {
                for (key, loss) in &logged {
                    *disease_loss_sum.entry(key.clone()).or_insert(0.0) += loss;
                }
            }
        }
        history.epoch_loss.push(epoch_loss_sum / n_steps as f64);
        if cfg.strategy == Strategy::Mts {
            for (key, sum) in disease_loss_sum {
                history
                    .per_disease_loss
                    .entry(key)
                    .or_default()
                    .push(sum / n_steps as f64);
            }
        }
        history.l1_norm.push(model.l1_norm());
    }
    history.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((model, history))
}

/// Multi-disease training: each schedule step carries one sub-batch per
/// disease and the update uses the sum of their losses.
pub fn train_mts(
    datasets: &BTreeMap<DiseaseKey, DiseaseDataset>,
    cfg: &TrainConfig,
) -> Result<(SegNet, RunHistory)> {
    train_mts_observed(datasets, cfg, &mut NoopObserver)
}

pub fn train_mts_observed(
    datasets: &BTreeMap<DiseaseKey, DiseaseDataset>,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<(SegNet, RunHistory)> {
    if cfg.strategy != Strategy::Mts {
        return Err(CoreError::Config("train_mts requires strategy mts".into()));
    }
    if datasets.is_empty() {
        return Err(CoreError::Config("no disease datasets".into()));
    }
    train_loop(datasets, None, cfg, obs)
}

/// Pooled training over all samples without disease distinction.
pub fn train_nts(
    datasets: &BTreeMap<DiseaseKey, DiseaseDataset>,
    cfg: &TrainConfig,
) -> Result<(SegNet, RunHistory)> {
    train_nts_observed(datasets, cfg, &mut NoopObserver)
}

pub fn train_nts_observed(
    datasets: &BTreeMap<DiseaseKey, DiseaseDataset>,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<(SegNet, RunHistory)> {
    if cfg.strategy != Strategy::Nts {
        return Err(CoreError::Config("train_nts requires strategy nts".into()));
    }
    let pooled = crate::data::pool_samples(datasets);
    train_loop(datasets, Some(&pooled), cfg, obs)
}

pub fn train_arm(
    datasets: &BTreeMap<DiseaseKey, DiseaseDataset>,
    cfg: &TrainConfig,
) -> Result<(SegNet, RunHistory)> {
    match cfg.strategy {
        Strategy::Mts => train_mts(datasets, cfg),
        Strategy::Nts => train_nts(datasets, cfg),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEntry {
    pub arm: String,
    pub run: usize,
    pub seed: u64,
    pub checkpoint: String,
    pub history: String,
    pub status: String,
}

impl RunEntry {
    pub fn is_complete(&self) -> bool {
        self.status == "complete"
    }
}

/// Machine-readable index of one experiment matrix. Paths are relative to
/// the run-set directory; the file carries no timestamps so repeated
/// invocations with equal seeds produce identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunsetIndex {
    pub format_version: u32,
    pub arms: Vec<String>,
    pub base_seed: u64,
    pub runs_per_arm: usize,
    pub complete: bool,
    pub entries: Vec<RunEntry>,
}

impl RunsetIndex {
    pub fn load(dir: &Path) -> Result<RunsetIndex> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::json(&path, e))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let tmp = dir.join("index.json.tmp");
        let text = serde_json::to_string_pretty(self).expect("index serializes");
        fs::write(&tmp, text).map_err(|e| CoreError::io(&tmp, e))?;
        let path = dir.join("index.json");
        fs::rename(&tmp, &path).map_err(|e| CoreError::io(&path, e))
    }
}

fn run_paths(arm: &Arm, run: usize) -> (String, String) {
    (
        format!("checkpoints/{}_run{run}.ckpt", arm.name()),
        format!("histories/{}_run{run}.json", arm.name()),
    )
}

/// Trains `n_runs` models per arm with seeds `base_seed + 0..n_runs`,
/// persisting checkpoints, histories and an index. Completed runs found in
/// an existing index are skipped (idempotent resume); a failed run is
/// recorded and the remaining runs continue.
pub fn run_matrix(
    datasets: &BTreeMap<DiseaseKey, DiseaseDataset>,
    base_cfg: &TrainConfig,
    arms: &[Arm],
    n_runs: usize,
    out_dir: &Path,
) -> Result<RunsetIndex> {
    if arms.is_empty() || n_runs == 0 {
        return Err(CoreError::Config("need at least one arm and one run".into()));
    }
    for arm in arms {
        if arm.itd && base_cfg.mask.is_none() {
            return Err(CoreError::Config(format!(
                "arm {arm} needs a mask spec in the configuration"
            )));
        }
    }
    let existing = RunsetIndex::load(out_dir).ok();
    let is_done = |arm: &Arm, run: usize| -> bool {
        let Some(index) = &existing else { return false };
        let name = arm.name();
        index.entries.iter().any(|e| {
            e.arm == name
                && e.run == run
                && e.is_complete()
                && out_dir.join(&e.checkpoint).exists()
                && out_dir.join(&e.history).exists()
        })
    };

    let mut jobs: Vec<(Arm, usize)> = Vec::new();
    for arm in arms {
        for run in 0..n_runs {
            jobs.push((*arm, run));
        }
    }

    let entries: Vec<RunEntry> = jobs
        .par_iter()
        .map(|(arm, run)| {
            let (ckpt_rel, hist_rel) = run_paths(arm, *run);
            let seed = base_cfg.seed + *run as u64;
            if is_done(arm, *run) {
                return RunEntry {
                    arm: arm.name(),
                    run: *run,
                    seed,
                    checkpoint: ckpt_rel,
                    history: hist_rel,
                    status: "complete".into(),
                };
            }
            let cfg = TrainConfig {
                strategy: arm.strategy,
                key: arm.itd,
                seed,
                ..base_cfg.clone()
            };
            let outcome = train_arm(datasets, &cfg).and_then(|(model, mut history)| {
                save_checkpoint(&model, &out_dir.join(&ckpt_rel))?;
                history.checkpoint = Some(ckpt_rel.clone());
                history.save(&out_dir.join(&hist_rel))?;
                Ok(())
            });
            let status = match outcome {
                Ok(()) => "complete".into(),
                Err(e) => format!("failed: {e}"),
            };
            RunEntry {
                arm: arm.name(),
                run: *run,
                seed,
                checkpoint: ckpt_rel,
                history: hist_rel,
                status,
            }
        })
        .collect();

    let mut entries = entries;
    entries.sort_by(|a, b| (a.arm.as_str(), a.run).cmp(&(b.arm.as_str(), b.run)));
    let index = RunsetIndex {
        format_version: 1,
        arms: arms.iter().map(|a| a.name()).collect(),
        base_seed: base_cfg.seed,
        runs_per_arm: n_runs,
        complete: entries.iter().all(|e| e.is_complete()),
        entries,
    };
    index.save(out_dir)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_parse_and_format() {
        for arm in Arm::ALL {
            assert_eq!(Arm::parse(&arm.name()).unwrap(), arm);
        }
        assert_eq!(Arm::parse("MTS+ITD").unwrap().name(), "mts+itd");
        assert!(Arm::parse("mts").is_err());
        assert!(Arm::parse("mts+xyz").is_err());
    }

    #[test]
    fn config_validation() {
        let model = ModelConfig {
            depth: 1,
            base_channels: 2,
            num_classes: 4,
            attention_bottleneck: false,
            attention_heads: 1,
            input_size: (8, 8),
        };
        let cfg = TrainConfig {
            strategy: Strategy::Nts,
            key: false,
            epochs: 0,
            batch_size: 2,
            mask: None,
            model: model.clone(),
            optim: OptimSection::default(),
            seed: 0,
            runs: 1,
            normalize: true,
        };
        assert!(cfg.validate().is_err()); // zero epochs
        let cfg = TrainConfig {
            epochs: 1,
            key: true,
            ..cfg
        };
        assert!(cfg.validate().is_err()); // key without mask
    }
}
