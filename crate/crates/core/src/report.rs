//! Analysis outputs: hyperparameter sweeps over the mask extent, L1-norm
//! probes of trained weights, and the report bundle (diagonal comparison,
//! the four ablation pairings, box-plot source data, and L1 curves). All
//! CSVs are deterministic byte-for-byte for a given run set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DiseaseDataset, DiseaseKey, Manifest};
use crate::error::{CoreError, Result};
use crate::mask::{MaskKind, MaskSpec};
use crate::metrics::{
    aggregate_over_runs, evaluate_model, write_aggregates_csv, write_rows_csv, write_text,
    AggregateRow, EvalOptions, MetricRow, MetricsTable,
};
use crate::sampler::Strategy;
use crate::train::{train_arm, Arm, RunHistory, RunsetIndex, TrainConfig};

/// One lambda sweep: which mask, which arm, which values, how many runs per
/// value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: MaskKind,
    pub lambdas: Vec<f64>,
    pub arm: Arm,
    pub runs_per_value: usize,
}

impl SweepSpec {
    pub fn default_lambdas() -> Vec<f64> {
        vec![0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5]
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(CoreError::Config("sweep needs at least one lambda".into()));
        }
        for pair in self.lambdas.windows(2) {
            if pair[1] <= pair[0] {
                return Err(CoreError::Config(
                    "sweep lambdas must be strictly increasing".into(),
                ));
            }
        }
        for &l in &self.lambdas {
            if !(l > 0.0 && l < 1.0) {
                return Err(CoreError::Config(format!(
                    "sweep lambda {l} outside (0, 1)"
                )));
            }
        }
        if !self.arm.itd {
            return Err(CoreError::Config(
                "sweeping the mask extent requires an itd arm".into(),
            ));
        }
        if self.runs_per_value == 0 {
            return Err(CoreError::Config("runs_per_value must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub mask_kind: MaskKind,
    pub lambda: f64,
    pub mean_dice_avg: f64,
    pub mean_hd_avg: f64,
}

/// Per-run scalar following the plot convention: the Dice (resp. HD) value
/// is the average over the three foreground classes and both phases of the
/// pooled-disease rows.
fn class_phase_average(rows: &[MetricRow]) -> (f64, f64) {
    let mut dice = Vec::new();
    let mut hd = Vec::new();
    for r in rows.iter().filter(|r| r.disease == "ALL") {
        dice.push(r.dice);
        if let Some(h) = r.hd {
            hd.push(h);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    (mean(&dice), mean(&hd))
}

/// Trains `runs_per_value` models per lambda, evaluates each on the test
/// manifest, and reduces to one row per lambda. Failed trainings are
/// reported in the second return value and leave their lambda out of the
/// averages for the affected runs.
pub fn sweep_lambda(
    datasets: &BTreeMap<DiseaseKey, DiseaseDataset>,
    test_manifest: &Manifest,
    manifest_dir: &Path,
    spec: &SweepSpec,
    base_cfg: &TrainConfig,
    eval_opts: &EvalOptions,
) -> Result<(Vec<SweepRow>, Vec<String>)> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.lambdas.len());
    let mut failures = Vec::new();
    for &lambda in &spec.lambdas {
        let mut mask = MaskSpec::new(spec.kind, lambda)?;
        mask.paper_literal_center_range = base_cfg
            .mask
            .map(|m| m.paper_literal_center_range)
            .unwrap_or(false);
        let mut dice_vals = Vec::new();
        let mut hd_vals = Vec::new();
        for run in 0..spec.runs_per_value {
            let cfg = TrainConfig {
                strategy: spec.arm.strategy,
                key: true,
                mask: Some(mask),
                seed: base_cfg.seed + run as u64,
                ..base_cfg.clone()
            };
            match train_arm(datasets, &cfg).and_then(|(mut model, _)| {
                evaluate_model(
                    &mut model,
                    test_manifest,
                    manifest_dir,
                    &spec.arm.name(),
                    run,
                    eval_opts,
                )
            }) {
                Ok(table) => {
                    let (d, h) = class_phase_average(&table.rows);
                    dice_vals.push(d);
                    hd_vals.push(h);
                }
                Err(e) => failures.push(format!("lambda {lambda} run {run}: {e}")),
            }
        }
        if !dice_vals.is_empty() {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            rows.push(SweepRow {
                mask_kind: spec.kind,
                lambda,
                mean_dice_avg: mean(&dice_vals),
                mean_hd_avg: mean(&hd_vals),
            });
        }
    }
    Ok((rows, failures))
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = String::from("mask_kind,lambda,mean_dice_avg,mean_hd_avg\n");
    for r in rows {
        let kind = match r.mask_kind {
            MaskKind::Ideal => "ideal",
            MaskKind::Gaussian => "gaussian",
        };
        out.push_str(&format!(
            "{kind},{:.4},{:.6},{:.6}\n",
            r.lambda, r.mean_dice_avg, r.mean_hd_avg
        ));
    }
    write_text(path, &out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct L1Curve {
    pub arm: String,
    pub run: usize,
    pub l1_per_epoch: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct L1Summary {
    pub strategy: Strategy,
    pub ctd_final_mean: Option<f64>,
    pub itd_final_mean: Option<f64>,
}

/// Reads every run history of a run set and collects the per-epoch L1-norm
/// curves plus a final-epoch comparison between the data conditions.
pub fn probe_l1(runset_dir: &Path) -> Result<(Vec<L1Curve>, Vec<L1Summary>, Vec<String>)> {
    let index = RunsetIndex::load(runset_dir)?;
    let mut curves = Vec::new();
    let mut warnings = Vec::new();
    for entry in &index.entries {
        if !entry.is_complete() {
            warnings.push(format!("run {} #{} skipped: {}", entry.arm, entry.run, entry.status));
            continue;
        }
        match RunHistory::load(&runset_dir.join(&entry.history)) {
            Ok(h) => curves.push(L1Curve {
                arm: entry.arm.clone(),
                run: entry.run,
                l1_per_epoch: h.l1_norm,
            }),
            Err(e) => warnings.push(format!("history {} unreadable: {e}", entry.history)),
        }
    }
    if curves.is_empty() {
        return Err(CoreError::Report("run set has no readable histories".into()));
    }
    let mut finals: BTreeMap<(Strategy, bool), Vec<f64>> = BTreeMap::new();
    for c in &curves {
        let arm = Arm::parse(&c.arm)?;
        if let Some(&last) = c.l1_per_epoch.last() {
            finals.entry((arm.strategy, arm.itd)).or_default().push(last);
        }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let mut summaries = Vec::new();
    for strategy in [Strategy::Nts, Strategy::Mts] {
        let ctd = finals.get(&(strategy, false)).map(mean);
        let itd = finals.get(&(strategy, true)).map(mean);
        if ctd.is_some() || itd.is_some() {
            summaries.push(L1Summary {
                strategy,
                ctd_final_mean: ctd,
                itd_final_mean: itd,
            });
        }
    }
    Ok((curves, summaries, warnings))
}

pub fn write_l1_csv(curves: &[L1Curve], path: &Path) -> Result<()> {
    let mut out = String::from("arm,run,epoch,l1_norm\n");
    let mut sorted: Vec<&L1Curve> = curves.iter().collect();
    sorted.sort_by(|a, b| (a.arm.as_str(), a.run).cmp(&(b.arm.as_str(), b.run)));
    for c in sorted {
        for (epoch, l1) in c.l1_per_epoch.iter().enumerate() {
            out.push_str(&format!("{},{},{},{:.6}\n", c.arm, c.run, epoch, l1));
        }
    }
    write_text(path, &out)
}

pub fn write_l1_summary_csv(summaries: &[L1Summary], path: &Path) -> Result<()> {
    let mut out = String::from("strategy,ctd_final_mean,itd_final_mean,itd_minus_ctd\n");
    for s in summaries {
        let fmt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        let diff = match (s.ctd_final_mean, s.itd_final_mean) {
            (Some(c), Some(i)) => format!("{:.6}", i - c),
            _ => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.strategy.as_str(),
            fmt(s.ctd_final_mean),
            fmt(s.itd_final_mean),
            diff
        ));
    }
    write_text(path, &out)
}

/// Provenance and conventions for one evaluation output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMeta {
    pub runset: String,
    pub test_manifest: String,
    pub normalize: bool,
    pub default_spacing_mm: [f64; 2],
    /// Distances are 2D per slice, averaged per case; spacing units when
    /// present, pixels otherwise.
    pub hd_definition: String,
    /// Dice(empty, empty) = 1, HD with one empty contour = image diagonal.
    pub empty_mask_convention: String,
}

impl EvalMeta {
    pub fn new(runset: &Path, test_manifest: &Path, opts: &EvalOptions) -> Self {
        EvalMeta {
            runset: runset.display().to_string(),
            test_manifest: test_manifest.display().to_string(),
            normalize: opts.normalize,
            default_spacing_mm: opts.default_spacing_mm,
            hd_definition: "2d-per-slice, mean over contributing slices and cases".into(),
            empty_mask_convention:
                "dice(empty,empty)=1; dice(empty,nonempty)=0; hd one-empty=image diagonal; hd both-empty excluded"
                    .into(),
        }
    }
}

/// Writes the machine- and human-readable evaluation outputs.
pub fn write_eval_outputs(table: &MetricsTable, meta: &EvalMeta, out_dir: &Path) -> Result<()> {
    write_rows_csv(&table.rows, &out_dir.join("metrics.csv"))?;
    write_aggregates_csv(&table.aggregates, &out_dir.join("metrics_agg.csv"))?;
    let json = serde_json::to_string_pretty(table).expect("table serializes");
    write_text(&out_dir.join("metrics.json"), &json)?;
    let meta_json = serde_json::to_string_pretty(meta).expect("meta serializes");
    write_text(&out_dir.join("eval_meta.json"), &meta_json)
}

pub fn read_eval_table(eval_dir: &Path) -> Result<MetricsTable> {
    let path = eval_dir.join("metrics.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::json(&path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportInput {
    pub runset_dir: PathBuf,
    pub eval_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportManifest {
    pub artifacts: Vec<String>,
    pub arms: Vec<String>,
    pub partial: bool,
    pub notes: Vec<String>,
}

const ABLATION_PAIRS: [(&str, &str); 4] = [
    ("nts+ctd", "mts+ctd"),
    ("nts+itd", "mts+itd"),
    ("nts+ctd", "nts+itd"),
    ("mts+ctd", "mts+itd"),
];

fn comparison_csv(aggregates: &[AggregateRow], arms: (&str, &str)) -> String {
    let mut out =
        String::from("arm,dataset,disease,phase,class,dice_mean,dice_std,hd_mean,hd_std,n\n");
    for arm in [arms.0, arms.1] {
        for r in aggregates.iter().filter(|r| r.arm == arm && r.disease == "ALL") {
            let fmt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{},{},{}\n",
                r.arm,
                r.dataset,
                r.disease,
                r.phase.as_str(),
                crate::data::CLASS_NAMES[r.class_id as usize],
                r.dice_mean,
                r.dice_std,
                fmt(r.hd_mean),
                fmt(r.hd_std),
                r.n
            ));
        }
    }
    out
}

/// Builds the report bundle from evaluated run sets: the diagonal
/// comparison (nts+ctd vs mts+itd), the four ablation pairings, box-plot
/// source rows, and L1 curves. Purely read-only over its inputs.
pub fn report(inputs: &[ReportInput], out_dir: &Path) -> Result<ReportManifest> {
    if inputs.is_empty() {
        return Err(CoreError::Report("report needs at least one run set".into()));
    }
    let mut all_rows: Vec<MetricRow> = Vec::new();
    let mut curves: Vec<L1Curve> = Vec::new();
    let mut arms: Vec<String> = Vec::new();
    let mut partial = false;
    let mut notes = Vec::new();
    for input in inputs {
        let index = RunsetIndex::load(&input.runset_dir)?;
        if !index.complete {
            partial = true;
            notes.push(format!(
                "run set {} is incomplete",
                input.runset_dir.display()
            ));
        }
        for arm in &index.arms {
            if !arms.contains(arm) {
                arms.push(arm.clone());
            }
        }
        let table = read_eval_table(&input.eval_dir)?;
        all_rows.extend(table.rows);
        let (c, _, warn) = probe_l1(&input.runset_dir)?;
        curves.extend(c);
        notes.extend(warn);
    }
    arms.sort();
    all_rows.sort_by(|a, b| {
        (
            a.arm.as_str(),
            a.run,
            a.dataset.as_str(),
            a.disease.as_str(),
            a.phase,
            a.class_id,
        )
            .cmp(&(
                b.arm.as_str(),
                b.run,
                b.dataset.as_str(),
                b.disease.as_str(),
                b.phase,
                b.class_id,
            ))
    });
    let aggregates = aggregate_over_runs(&all_rows);
    let mut artifacts = Vec::new();

    let has = |arm: &str| arms.iter().any(|a| a == arm);

    // Diagonal comparison: the main experiment.
    if has("nts+ctd") && has("mts+itd") {
        let csv = comparison_csv(&aggregates, ("nts+ctd", "mts+itd"));
        write_text(&out_dir.join("diagonal_comparison.csv"), &csv)?;
        artifacts.push("diagonal_comparison.csv".to_string());
    } else {
        partial = true;
        notes.push("diagonal comparison skipped: missing arm".into());
    }

    // The four ablation pairings.
    for (a, b) in ABLATION_PAIRS {
        if has(a) && has(b) {
            let name = format!("ablation_{a}_vs_{b}.csv");
            write_text(&out_dir.join(&name), &comparison_csv(&aggregates, (a, b)))?;
            artifacts.push(name);
        } else {
            partial = true;
            notes.push(format!("ablation {a} vs {b} skipped: missing arm"));
        }
    }

    // Raw per-run values for box plots.
    write_rows_csv(&all_rows, &out_dir.join("boxplot_data.csv"))?;
    artifacts.push("boxplot_data.csv".to_string());

    // Per-disease aggregate table.
    write_aggregates_csv(&aggregates, &out_dir.join("per_disease_aggregates.csv"))?;
    artifacts.push("per_disease_aggregates.csv".to_string());

    write_l1_csv(&curves, &out_dir.join("l1_curves.csv"))?;
    artifacts.push("l1_curves.csv".to_string());

    let manifest = ReportManifest {
        artifacts,
        arms,
        partial,
        notes,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&out_dir.join("report_manifest.json"), &json)?;
    Ok(manifest)
}
