//! Epoch schedules. The multi-disease strategy (MTS) builds steps that each
//! contain one sub-batch per disease, cycling smaller diseases through fresh
//! reshuffles; the normal strategy (NTS) shuffles the pooled sample list once
//! and walks it in whole batches.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DiseaseDataset, DiseaseKey};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Nts,
    Mts,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Nts => "nts",
            Strategy::Mts => "mts",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nts" => Ok(Strategy::Nts),
            "mts" => Ok(Strategy::Mts),
            other => Err(CoreError::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// `b` sample indices for one disease (or for the pooled list when the
/// disease key is absent). Indices refer to that disease's dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubBatch {
    pub disease: Option<DiseaseKey>,
    pub sample_refs: Vec<usize>,
}

/// An epoch's ordered steps. Every MTS step holds one sub-batch per disease;
/// every NTS step holds a single pooled sub-batch.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub strategy: Strategy,
    pub steps: Vec<Vec<SubBatch>>,
}

/// Builds one MTS epoch: `max_k ceil(n_k / b)` steps, each containing one
/// sub-batch of size `b` per disease (sorted key order). Diseases shorter
/// than the epoch keep supplying samples from fresh reshuffles.
pub fn mts_epoch_schedule(
    datasets: &BTreeMap<DiseaseKey, DiseaseDataset>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(CoreError::Sampler("batch size must be >= 1".into()));
    }
    if datasets.is_empty() {
        return Err(CoreError::Sampler("no disease datasets".into()));
    }
    for (key, ds) in datasets {
        if ds.samples.is_empty() {
            return Err(CoreError::Sampler(format!("disease {key} is empty")));
        }
    }
    let steps_count = datasets
        .values()
        .map(|d| d.n().div_ceil(batch_size))
        .max()
        .unwrap();

    // One independent permutation stream per disease. Streams are seeded
    // from the shared rng in sorted key order so schedules are reproducible.
    let mut streams: Vec<(DiseaseKey, Vec<usize>, usize, ChaCha8Rng)> = Vec::new();
    for (key, ds) in datasets {
        let mut sub = ChaCha8Rng::seed_from_u64(rng.random::<u64>());
        let mut indices: Vec<usize> = (0..ds.n()).collect();
        indices.shuffle(&mut sub);
        streams.push((key.clone(), indices, 0, sub));
    }

    let mut steps = Vec::with_capacity(steps_count);
    for _ in 0..steps_count {
        let mut step = Vec::with_capacity(streams.len());
        for (key, indices, pos, sub) in streams.iter_mut() {
            let mut refs = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                if *pos == indices.len() {
                    indices.shuffle(sub);
                    *pos = 0;
                }
                refs.push(indices[*pos]);
                *pos += 1;
            }
            step.push(SubBatch {
                disease: Some(key.clone()),
                sample_refs: refs,
            });
        }
        steps.push(step);
    }
    Ok(BatchPlan {
        strategy: Strategy::Mts,
        steps,
    })
}

/// Builds one NTS epoch: the pooled index list is shuffled once and split
/// into `floor(L / b)` whole batches; the trailing remainder is dropped.
pub fn nts_epoch_schedule(
    pooled_len: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(CoreError::Sampler("batch size must be >= 1".into()));
    }
    if pooled_len == 0 {
        return Err(CoreError::Sampler("pooled dataset is empty".into()));
    }
    // Shuffle through a derived stream, mirroring the per-disease streams of
    // the MTS schedule; with a single disease both strategies then draw the
    // identical permutation from the same parent rng state.
    let mut sub = ChaCha8Rng::seed_from_u64(rng.random::<u64>());
    let mut indices: Vec<usize> = (0..pooled_len).collect();
    indices.shuffle(&mut sub);
    let steps = indices
        .chunks_exact(batch_size)
        .map(|chunk| {
            vec![SubBatch {
                disease: None,
                sample_refs: chunk.to_vec(),
            }]
        })
        .collect();
    Ok(BatchPlan {
        strategy: Strategy::Nts,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SliceSample;
    use crate::data::Phase;
    use ndarray::Array2;
    use std::collections::BTreeSet;

    fn dataset(key: &str, n: usize) -> (DiseaseKey, DiseaseDataset) {
        let disease = DiseaseKey::new(key);
        let samples = (0..n)
            .map(|i| SliceSample {
                case_id: format!("{key}{i}"),
                disease: disease.clone(),
                phase: Phase::Ed,
                slice_index: 0,
                image: Array2::zeros((2, 2)),
                label: Array2::zeros((2, 2)),
            })
            .collect();
        (disease.clone(), DiseaseDataset { disease, samples })
    }

    fn datasets(sizes: &[(&str, usize)]) -> BTreeMap<DiseaseKey, DiseaseDataset> {
        sizes.iter().map(|&(k, n)| dataset(k, n)).collect()
    }

    #[test]
    fn mts_five_equal_diseases() {
        let ds = datasets(&[("A", 360), ("B", 360), ("C", 360), ("D", 360), ("E", 360)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = mts_epoch_schedule(&ds, 8, &mut rng).unwrap();
        assert_eq!(plan.steps.len(), 45);
        for step in &plan.steps {
            assert_eq!(step.len(), 5);
            let keys: BTreeSet<_> = step.iter().map(|sb| sb.disease.clone().unwrap()).collect();
            assert_eq!(keys.len(), 5);
            assert!(step.iter().all(|sb| sb.sample_refs.len() == 8));
        }
    }

    #[test]
    fn mts_small_disease_cycles_with_reshuffle() {
        let ds = datasets(&[("big", 16), ("small", 8)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = mts_epoch_schedule(&ds, 8, &mut rng).unwrap();
        assert_eq!(plan.steps.len(), 2);
        let mut big_drawn: Vec<usize> = Vec::new();
        let mut small_drawn: Vec<usize> = Vec::new();
        for step in &plan.steps {
            for sb in step {
                match sb.disease.as_ref().unwrap().as_str() {
                    "big" => big_drawn.extend(&sb.sample_refs),
                    _ => small_drawn.extend(&sb.sample_refs),
                }
            }
        }
        // The large disease uses each sample exactly once; the small one
        // exactly twice (one full permutation per step).
        big_drawn.sort_unstable();
        assert_eq!(big_drawn, (0..16).collect::<Vec<_>>());
        small_drawn.sort_unstable();
        let expected: Vec<usize> = (0..8).flat_map(|i| [i, i]).collect();
        assert_eq!(small_drawn, expected);
    }

    #[test]
    fn mts_epoch_balance_with_ragged_sizes() {
        // steps = ceil(10/4) = 3; every disease contributes steps * b draws.
        let ds = datasets(&[("A", 10), ("B", 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = mts_epoch_schedule(&ds, 4, &mut rng).unwrap();
        assert_eq!(plan.steps.len(), 3);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for step in &plan.steps {
            for sb in step {
                *counts
                    .entry(sb.disease.as_ref().unwrap().as_str().to_string())
                    .or_default() += sb.sample_refs.len();
            }
        }
        assert_eq!(counts["A"], 12);
        assert_eq!(counts["B"], 12);
    }

    #[test]
    fn mts_rejects_empty_disease() {
        let mut ds = datasets(&[("A", 4)]);
        ds.insert(
            DiseaseKey::new("B"),
            DiseaseDataset {
                disease: DiseaseKey::new("B"),
                samples: Vec::new(),
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mts_epoch_schedule(&ds, 2, &mut rng).is_err());
    }

    #[test]
    fn nts_step_count_drops_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = nts_epoch_schedule(1800, 8, &mut rng).unwrap();
        assert_eq!(plan.steps.len(), 225);
        let plan = nts_epoch_schedule(8, 8, &mut rng).unwrap();
        assert_eq!(plan.steps.len(), 1);
        assert_eq!(plan.steps[0][0].sample_refs.len(), 8);
        let plan = nts_epoch_schedule(13, 8, &mut rng).unwrap();
        assert_eq!(plan.steps.len(), 1);
    }

    #[test]
    fn nts_no_repetition_within_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = nts_epoch_schedule(100, 7, &mut rng).unwrap();
        let mut seen = BTreeSet::new();
        for step in &plan.steps {
            for &i in &step[0].sample_refs {
                assert!(seen.insert(i), "index {i} drawn twice");
            }
        }
    }

    #[test]
    fn schedules_are_reproducible() {
        let ds = datasets(&[("A", 20), ("B", 12)]);
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = mts_epoch_schedule(&ds, 4, &mut rng).unwrap();
            plan.steps
                .iter()
                .flat_map(|s| s.iter().flat_map(|sb| sb.sample_refs.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));

        let draw_nts = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            nts_epoch_schedule(64, 8, &mut rng)
                .unwrap()
                .steps
                .iter()
                .map(|s| s[0].sample_refs.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw_nts(1), draw_nts(1));
        // Two epochs from one rng differ.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e1 = nts_epoch_schedule(64, 8, &mut rng).unwrap();
        let e2 = nts_epoch_schedule(64, 8, &mut rng).unwrap();
        assert_ne!(
            e1.steps.iter().map(|s| &s[0].sample_refs).collect::<Vec<_>>(),
            e2.steps.iter().map(|s| &s[0].sample_refs).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_disease_mts_equals_nts_schedule() {
        let ds = datasets(&[("only", 24)]);
        let mut rng_a = ChaCha8Rng::seed_from_u64(9);
        let mts = mts_epoch_schedule(&ds, 8, &mut rng_a).unwrap();
        let mut rng_b = ChaCha8Rng::seed_from_u64(9);
        let nts = nts_epoch_schedule(24, 8, &mut rng_b).unwrap();
        let flat = |p: &BatchPlan| {
            p.steps
                .iter()
                .flat_map(|s| s.iter().flat_map(|sb| sb.sample_refs.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&mts), flat(&nts));
    }

    #[test]
    fn single_disease_mts_matches_nts_structure() {
        let ds = datasets(&[("only", 24)]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let plan = mts_epoch_schedule(&ds, 8, &mut rng).unwrap();
        assert_eq!(plan.steps.len(), 3);
        assert!(plan.steps.iter().all(|s| s.len() == 1));
        // One full permutation, no repeats.
        let mut drawn: Vec<usize> = plan
            .steps
            .iter()
            .flat_map(|s| s[0].sample_refs.clone())
            .collect();
        drawn.sort_unstable();
        assert_eq!(drawn, (0..24).collect::<Vec<_>>());
    }
}
