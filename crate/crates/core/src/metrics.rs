//! Dice and Hausdorff metrics, per-class/per-phase/per-disease aggregation,
//! and cross-dataset validation of trained checkpoints.
//!
//! Conventions for degenerate inputs: Dice of two empty masks is 1.0;
//! Hausdorff of two empty contours is 0.0 and of exactly one empty contour
//! is the image diagonal (a finite worst case). Metrics are 2D per slice,
//! averaged to per-case values; units follow the pixel spacing when present
//! and are plain pixels otherwise.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data::{
    normalize_slice, read_case, resize_image_plane, restore_label_plane, Case4D, Manifest, Phase,
};
use crate::error::{CoreError, Result};
use crate::model::SegNet;

/// One class's foreground, in the frame of its source slice.
#[derive(Debug, Clone)]
pub struct BinaryMask {
    pub mask: Array2<bool>,
    pub class_id: u8,
    pub spacing_mm: Option<[f64; 2]>,
}

impl BinaryMask {
    pub fn from_labels(labels: &Array2<u8>, class_id: u8, spacing_mm: Option<[f64; 2]>) -> Self {
        BinaryMask {
            mask: labels.mapv(|v| v == class_id),
            class_id,
            spacing_mm,
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Boundary pixels of a mask, with the mask's shape kept for the
/// empty-contour penalty.
#[derive(Debug, Clone)]
pub struct ContourSet {
    pub points: Vec<(usize, usize)>,
    pub shape: (usize, usize),
}

/// Overlap `2|A n B| / (|A| + |B|)`; two empty masks agree perfectly (1.0).
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.mask.dim() != b.mask.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "dice: {:?} vs {:?}",
            a.mask.dim(),
            b.mask.dim()
        )));
    }
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.mask.iter().zip(b.mask.iter()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// A pixel is on the contour iff it is foreground and at least one of its
/// 4-neighbors is background or lies outside the image.
pub fn extract_contour(mask: &BinaryMask) -> ContourSet {
    let (h, w) = mask.mask.dim();
    let mut points = Vec::new();
    for u in 0..h {
        for v in 0..w {
            if !mask.mask[[u, v]] {
                continue;
            }
            let boundary = u == 0
                || v == 0
                || u == h - 1
                || v == w - 1
                || !mask.mask[[u - 1, v]]
                || !mask.mask[[u + 1, v]]
                || !mask.mask[[u, v - 1]]
                || !mask.mask[[u, v + 1]];
            if boundary {
                points.push((u, v));
            }
        }
    }
    ContourSet {
        points,
        shape: (h, w),
    }
}

fn image_diagonal(shape: (usize, usize), spacing: [f64; 2]) -> f64 {
    let dr = (shape.0.saturating_sub(1)) as f64 * spacing[0];
    let dc = (shape.1.saturating_sub(1)) as f64 * spacing[1];
    (dr * dr + dc * dc).sqrt()
}

fn directed_max_min_sq(from: &[(usize, usize)], to: &[(usize, usize)], spacing: [f64; 2]) -> f64 {
    let mut worst = 0.0f64;
    for &(pu, pv) in from {
        let mut best = f64::INFINITY;
        for &(qu, qv) in to {
            let dr = (pu as f64 - qu as f64) * spacing[0];
            let dc = (pv as f64 - qv as f64) * spacing[1];
            let d2 = dr * dr + dc * dc;
            if d2 < best {
                best = d2;
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

/// Symmetric Hausdorff distance between two contours by exact pairwise
/// distances, scaled by the pixel spacing. One empty contour yields the
/// image diagonal; two empty contours yield 0.
pub fn hausdorff(ca: &ContourSet, cb: &ContourSet, spacing: [f64; 2]) -> f64 {
    match (ca.points.is_empty(), cb.points.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => image_diagonal(ca.shape, spacing),
        (false, false) => {
            let ab = directed_max_min_sq(&ca.points, &cb.points, spacing);
            let ba = directed_max_min_sq(&cb.points, &ca.points, spacing);
            ab.max(ba).sqrt()
        }
    }
}

/// Per-run metric row: means over the cases of one (disease, phase, class)
/// cell. `disease` is "ALL" for the pooled row; `hd` is absent when no slice
/// contributed a contour pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub arm: String,
    pub run: usize,
    pub dataset: String,
    pub disease: String,
    pub phase: Phase,
    pub class_id: u8,
    pub dice: f64,
    pub hd: Option<f64>,
    pub n_slices: usize,
}

/// Mean/std aggregate of rows sharing (arm, dataset, disease, phase, class).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub arm: String,
    pub dataset: String,
    pub disease: String,
    pub phase: Phase,
    pub class_id: u8,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd_mean: Option<f64>,
    pub hd_std: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<AggregateRow>,
}

/// Produces predicted label planes in a case's original frame, one per
/// slice of the requested phase.
pub trait CasePredictor {
    fn predict_case_phase(&mut self, case: &Case4D, phase: Phase) -> Result<Vec<Array2<u8>>>;
}

/// The real predictor: resize into the model frame, optionally standardize,
/// run the network on all slices of the phase as one batch, then map the
/// argmax labels back to the original frame.
pub struct ModelPredictor<'m> {
    pub model: &'m mut SegNet,
    pub normalize: bool,
}

impl CasePredictor for ModelPredictor<'_> {
    fn predict_case_phase(&mut self, case: &Case4D, phase: Phase) -> Result<Vec<Array2<u8>>> {
        let (_, h0, w0, z_count) = case.shape();
        let (hm, wm) = self.model.config().input_size;
        let p = match phase {
            Phase::Ed => case.ed_index,
            Phase::Es => case.es_index,
        };
        let mut batch = Array4::<f64>::zeros((z_count, 1, hm, wm));
        for z in 0..z_count {
            let plane = case.image.slice(s![p, .., .., z]);
            let img = Array2::from_shape_fn((h0, w0), |(u, v)| plane[[u, v]] as f64);
            let mut resized = resize_image_plane(&img, hm, wm);
            if self.normalize {
                resized = normalize_slice(&resized);
            }
            batch.slice_mut(s![z, 0, .., ..]).assign(&resized);
        }
        let pred = self.model.forward(&batch)?;
        let labels = pred.argmax_labels();
        let mut out = Vec::with_capacity(z_count);
        for z in 0..z_count {
            let plane = labels.slice(s![z, .., ..]).to_owned();
            out.push(restore_label_plane(&plane, h0, w0));
        }
        Ok(out)
    }
}

pub struct EvalOptions {
    pub normalize: bool,
    pub default_spacing_mm: [f64; 2],
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            normalize: true,
            default_spacing_mm: [1.0, 1.0],
        }
    }
}

const FOREGROUND_CLASSES: [u8; 3] = [1, 2, 3];

#[derive(Default, Clone)]
struct CellAccum {
    /// Per-case mean Dice values.
    dice: Vec<f64>,
    /// Per-case mean HD values (cases with no contour pair are absent).
    hd: Vec<f64>,
    n_slices: usize,
}

fn sample_mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}

/// Evaluates one model (or oracle predictor) over a test manifest: per slice
/// Dice/HD per class, averaged to per-case values, then aggregated per
/// (disease, phase, class) with a pooled "ALL" disease row.
pub fn evaluate_with(
    predictor: &mut dyn CasePredictor,
    manifest: &Manifest,
    manifest_dir: &Path,
    arm: &str,
    run: usize,
    opts: &EvalOptions,
) -> Result<MetricsTable> {
    if manifest.cases.is_empty() {
        return Err(CoreError::Eval("empty test set".into()));
    }
    // (disease, phase, class) -> accumulated per-case values.
    let mut cells: BTreeMap<(String, Phase, u8), CellAccum> = BTreeMap::new();
    for entry in &manifest.cases {
        let case = read_case(&manifest_dir.join(&entry.path)).map_err(|e| CoreError::CaseLoad {
            case_id: entry.case_id.clone(),
            msg: e.to_string(),
        })?;
        let spacing = case
            .pixel_spacing_mm
            .or(entry.pixel_spacing_mm)
            .unwrap_or(opts.default_spacing_mm);
        let (_, _, _, z_count) = case.shape();
        for phase in Phase::BOTH {
            let preds = predictor.predict_case_phase(&case, phase)?;
            if preds.len() != z_count {
                return Err(CoreError::Eval(format!(
                    "predictor returned {} planes for {} slices",
                    preds.len(),
                    z_count
                )));
            }
            let p = match phase {
                Phase::Ed => case.ed_index,
                Phase::Es => case.es_index,
            };
            for class_id in FOREGROUND_CLASSES {
                let mut dice_sum = 0.0;
                let mut hd_sum = 0.0;
                let mut hd_n = 0usize;
                for (z, pred_plane) in preds.iter().enumerate() {
                    let gt_plane = case.label.slice(s![p, .., .., z]).to_owned();
                    let gt = BinaryMask::from_labels(&gt_plane, class_id, Some(spacing));
                    let pd = BinaryMask::from_labels(pred_plane, class_id, Some(spacing));
                    dice_sum += dice(&pd, &gt)?;
                    let cg = extract_contour(&gt);
                    let cp = extract_contour(&pd);
                    // Slices empty in both GT and prediction carry no
                    // boundary information for this class.
                    if !(cg.points.is_empty() && cp.points.is_empty()) {
                        hd_sum += hausdorff(&cp, &cg, spacing);
                        hd_n += 1;
                    }
                }
                let case_dice = dice_sum / z_count as f64;
                let case_hd = (hd_n > 0).then(|| hd_sum / hd_n as f64);
                for disease in [entry.disease.as_str(), "ALL"] {
                    let cell = cells
                        .entry((disease.to_string(), phase, class_id))
                        .or_default();
                    cell.dice.push(case_dice);
                    if let Some(hd) = case_hd {
                        cell.hd.push(hd);
                    }
                    cell.n_slices += hd_n;
                }
            }
        }
    }
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for ((disease, phase, class_id), cell) in &cells {
        let (dice_mean, dice_std) = sample_mean_std(&cell.dice);
        let hd_stats = (!cell.hd.is_empty()).then(|| sample_mean_std(&cell.hd));
        rows.push(MetricRow {
            arm: arm.to_string(),
            run,
            dataset: manifest.dataset_name.clone(),
            disease: disease.clone(),
            phase: *phase,
            class_id: *class_id,
            dice: dice_mean,
            hd: hd_stats.map(|(m, _)| m),
            n_slices: cell.n_slices,
        });
        aggregates.push(AggregateRow {
            arm: arm.to_string(),
            dataset: manifest.dataset_name.clone(),
            disease: disease.clone(),
            phase: *phase,
            class_id: *class_id,
            dice_mean,
            dice_std,
            hd_mean: hd_stats.map(|(m, _)| m),
            hd_std: hd_stats.map(|(_, s)| s),
            n: cell.dice.len(),
        });
    }
    Ok(MetricsTable { rows, aggregates })
}

/// Evaluates a trained model on a test manifest.
pub fn evaluate_model(
    model: &mut SegNet,
    manifest: &Manifest,
    manifest_dir: &Path,
    arm: &str,
    run: usize,
    opts: &EvalOptions,
) -> Result<MetricsTable> {
    let mut predictor = ModelPredictor {
        model,
        normalize: opts.normalize,
    };
    evaluate_with(&mut predictor, manifest, manifest_dir, arm, run, opts)
}

/// Evaluates every completed run of a run set on a (possibly different)
/// test dataset without retraining. Each checkpoint is digested before and
/// after evaluation to assert no parameter update happened. Missing or
/// unreadable checkpoints are recorded as per-run failures and skipped.
pub fn cross_validate(
    runset_dir: &Path,
    manifest: &Manifest,
    manifest_dir: &Path,
    opts: &EvalOptions,
) -> Result<(MetricsTable, Vec<String>)> {
    let index = crate::train::RunsetIndex::load(runset_dir)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for entry in &index.entries {
        if !entry.is_complete() {
            failures.push(format!("run {} #{}: {}", entry.arm, entry.run, entry.status));
            continue;
        }
        let ckpt = runset_dir.join(&entry.checkpoint);
        let outcome = (|| -> Result<MetricsTable> {
            let digest_before = crate::util::file_digest(&ckpt)?;
            let mut model = crate::model::load_checkpoint(&ckpt)?;
            let table = evaluate_model(&mut model, manifest, manifest_dir, &entry.arm, entry.run, opts)?;
            let digest_after = crate::util::file_digest(&ckpt)?;
            if digest_before != digest_after {
                return Err(CoreError::Eval(format!(
                    "checkpoint {} changed during evaluation",
                    entry.checkpoint
                )));
            }
            Ok(table)
        })();
        match outcome {
            Ok(table) => rows.extend(table.rows),
            Err(e) => failures.push(format!("run {} #{}: {e}", entry.arm, entry.run)),
        }
    }
    if rows.is_empty() {
        return Err(CoreError::Eval(format!(
            "no run of {} could be evaluated",
            runset_dir.display()
        )));
    }
    let aggregates = aggregate_over_runs(&rows);
    Ok((MetricsTable { rows, aggregates }, failures))
}

/// Groups per-run rows by (arm, dataset, disease, phase, class) and reduces
/// them to mean/std across runs.
pub fn aggregate_over_runs(rows: &[MetricRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, String, Phase, u8), (Vec<f64>, Vec<f64>)> =
        BTreeMap::new();
    for row in rows {
        let key = (
            row.arm.clone(),
            row.dataset.clone(),
            row.disease.clone(),
            row.phase,
            row.class_id,
        );
        let entry = groups.entry(key).or_default();
        entry.0.push(row.dice);
        if let Some(hd) = row.hd {
            entry.1.push(hd);
        }
    }
    groups
        .into_iter()
        .map(|((arm, dataset, disease, phase, class_id), (dices, hds))| {
            let (dice_mean, dice_std) = sample_mean_std(&dices);
            let hd_stats = (!hds.is_empty()).then(|| sample_mean_std(&hds));
            AggregateRow {
                arm,
                dataset,
                disease,
                phase,
                class_id,
                dice_mean,
                dice_std,
                hd_mean: hd_stats.map(|(m, _)| m),
                hd_std: hd_stats.map(|(_, s)| s),
                n: dices.len(),
            }
        })
        .collect()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Writes per-run rows as CSV (one row per arm/run/disease/phase/class).
pub fn write_rows_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut out = String::from("arm,run,dataset,disease,phase,class,dice,hd,n_slices\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{},{}\n",
            r.arm,
            r.run,
            r.dataset,
            r.disease,
            r.phase.as_str(),
            crate::data::CLASS_NAMES[r.class_id as usize],
            r.dice,
            fmt_opt(r.hd),
            r.n_slices
        ));
    }
    write_text(path, &out)
}

pub fn write_aggregates_csv(aggregates: &[AggregateRow], path: &Path) -> Result<()> {
    let mut out =
        String::from("arm,dataset,disease,phase,class,dice_mean,dice_std,hd_mean,hd_std,n\n");
    for r in aggregates {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{},{},{}\n",
            r.arm,
            r.dataset,
            r.disease,
            r.phase.as_str(),
            crate::data::CLASS_NAMES[r.class_id as usize],
            r.dice_mean,
            r.dice_std,
            fmt_opt(r.hd_mean),
            fmt_opt(r.hd_std),
            r.n
        ));
    }
    write_text(path, &out)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CoreError::io(path, e))
}
