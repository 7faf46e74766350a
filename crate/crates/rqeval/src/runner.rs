//! Experiment orchestration over evaluators and datasets.
//!
//! A run lives in its own directory: `manifest.json` describes it,
//! `results/rep_<r>/<dataset>/<instance>.json` holds one record per
//! evaluation, `summary.json` aggregates deterministically, and
//! `run_stats.json` records provider traffic (the only file that varies
//! between cache-cold and cache-warm executions). Directories are
//! append-only: re-running recomputes failed records but never touches
//! ok ones.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{load_dataset, DatasetError, LoadStats};
use crate::eval::vera::{combine, compute_penalty};
use crate::eval::{EvalContext, EvalError, EvaluatorConfig, EvaluatorRegistry};
use crate::gateway::Gateway;
use crate::metrics::{self, MetricReport, ScoredSample};
use crate::mismatch::{
    classify_mismatches, consolidate_taxonomy, diagnose_case, distribution_report,
    extract_labels, precluster_labels, AgreementCounts, CaseArchive, DistributionReport,
    MismatchError, Precluster,
};
use crate::model::{
    CostStats, EvaluationResult, RunManifest, TaskInstance, TaxonomyCategory,
};
use crate::parallel::parallel_map;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Mismatch(#[from] MismatchError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("result for {instance:?} lacks breakdown keys [{keys}] needed to recombine scores; rerun with ambiguity assessment enabled")]
    MissingStageOutputs { instance: String, keys: String },
    #[error("{0} is not a run directory (no readable manifest.json)")]
    MissingRun(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunnerError {
    RunnerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Serializes as pretty JSON and renames into place, so concurrent
/// readers never observe a half-written file.
fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), RunnerError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| io_err(path, e))?;
    bytes.push(b'\n');
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// File-system-safe name. When sanitizing changes anything, a short hash
/// of the original keeps distinct ids distinct.
fn sanitize(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if cleaned == name && !name.is_empty() {
        cleaned
    } else {
        use sha2::{Digest, Sha256};
        let digest = hex::encode(Sha256::digest(name.as_bytes()));
        format!("{}-{}", cleaned, &digest[..8])
    }
}

fn result_path(run_dir: &Path, repetition: u32, dataset_id: &str, instance_id: &str) -> PathBuf {
    run_dir
        .join("results")
        .join(format!("rep_{}", repetition))
        .join(sanitize(dataset_id))
        .join(format!("{}.json", sanitize(instance_id)))
}

/// One skipped or failed evaluation, listed in the run summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureNote {
    pub repetition: u32,
    pub dataset_id: String,
    pub instance_id: String,
    pub error: String,
}

/// Deterministic aggregate over a run. Byte-identical across reruns of
/// the same manifest against the same provider behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub evaluator_id: String,
    pub repetitions: u32,
    pub datasets: Vec<LoadStats>,
    pub total_results: usize,
    pub ok_results: usize,
    pub failed_results: usize,
    pub failure_rate: f64,
    pub failures: Vec<FailureNote>,
    pub total_cost: CostStats,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub summary: RunSummary,
    /// True when the failure rate exceeds the manifest's tolerance; the
    /// CLI maps this to its partial-failure exit code.
    pub failure_rate_exceeded: bool,
}

fn manifest_for_comparison(manifest: &RunManifest) -> RunManifest {
    let mut m = manifest.clone();
    m.timestamp = None;
    m
}

fn load_datasets(
    manifest: &RunManifest,
) -> Result<Vec<(String, Vec<TaskInstance>, LoadStats)>, RunnerError> {
    let mut out = Vec::new();
    for dref in &manifest.datasets {
        let (instances, stats) = load_dataset(&dref.path, &dref.dataset_id)?;
        out.push((dref.dataset_id.clone(), instances, stats));
    }
    Ok(out)
}

/// Runs every (repetition, dataset, instance) cell of the manifest,
/// resuming from whatever ok results already sit in `run_dir`.
pub fn run_experiment(
    manifest: &RunManifest,
    run_dir: &Path,
    gateway: &Gateway,
    registry: &EvaluatorRegistry,
) -> Result<RunOutcome, RunnerError> {
    let violations = manifest.validate();
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(RunnerError::Config(lines.join("; ")));
    }
    let datasets = load_datasets(manifest)?;
    let config = EvaluatorConfig::from_manifest(manifest, run_dir.join("criteria"));
    let evaluator = registry.build(&manifest.evaluator_id, &config)?;

    std::fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let manifest_path = run_dir.join("manifest.json");
    if manifest_path.exists() {
        let existing: RunManifest = read_json(&manifest_path)?;
        if manifest_for_comparison(&existing) != manifest_for_comparison(manifest) {
            return Err(RunnerError::Config(format!(
                "{} already holds a different manifest; use a fresh --out-dir",
                run_dir.display()
            )));
        }
    } else {
        write_json_atomic(&manifest_path, manifest)?;
    }

    let all_instances: Vec<TaskInstance> = datasets
        .iter()
        .flat_map(|(_, instances, _)| instances.iter().cloned())
        .collect();
    let prepare_ctx = EvalContext {
        gateway,
        repetition: 0,
    };
    evaluator.prepare(&all_instances, &prepare_ctx)?;

    struct Cell<'a> {
        repetition: u32,
        dataset_id: &'a str,
        instance: &'a TaskInstance,
        path: PathBuf,
    }
    let mut reused: Vec<(String, EvaluationResult)> = Vec::new();
    let mut pending: Vec<Cell> = Vec::new();
    for repetition in 0..manifest.repetitions {
        for (dataset_id, instances, _) in &datasets {
            let dir = run_dir
                .join("results")
                .join(format!("rep_{}", repetition))
                .join(sanitize(dataset_id));
            std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            for instance in instances {
                let path = result_path(run_dir, repetition, dataset_id, &instance.id);
                if path.exists() {
                    if let Ok(existing) = read_json::<EvaluationResult>(&path) {
                        if existing.is_ok() {
                            reused.push((dataset_id.clone(), existing));
                            continue;
                        }
                    }
                }
                pending.push(Cell {
                    repetition,
                    dataset_id,
                    instance,
                    path,
                });
            }
        }
    }

    let fresh: Vec<Result<(String, EvaluationResult), RunnerError>> =
        parallel_map(&pending, manifest.workers, |_, cell| {
            let ctx = EvalContext {
                gateway,
                repetition: cell.repetition,
            };
            let result = evaluator.evaluate(cell.instance, &ctx);
            write_json_atomic(&cell.path, &result)?;
            Ok((cell.dataset_id.to_string(), result))
        });

    let mut results: Vec<(String, EvaluationResult)> = reused;
    for item in fresh {
        results.push(item?);
    }
    results.sort_by(|(da, ra), (db, rb)| {
        ra.repetition_index
            .cmp(&rb.repetition_index)
            .then_with(|| da.cmp(db))
            .then_with(|| ra.instance_id.cmp(&rb.instance_id))
    });

    let total_results = results.len();
    let ok_results = results.iter().filter(|(_, r)| r.is_ok()).count();
    let failed_results = total_results - ok_results;
    let mut total_cost = CostStats::default();
    let mut failures = Vec::new();
    for (dataset_id, result) in &results {
        total_cost.add(&result.cost);
        if !result.is_ok() {
            failures.push(FailureNote {
                repetition: result.repetition_index,
                dataset_id: dataset_id.clone(),
                instance_id: result.instance_id.clone(),
                error: result.error.clone().unwrap_or_default(),
            });
        }
    }
    let failure_rate = if total_results == 0 {
        0.0
    } else {
        failed_results as f64 / total_results as f64
    };
    let summary = RunSummary {
        evaluator_id: manifest.evaluator_id.clone(),
        repetitions: manifest.repetitions,
        datasets: datasets.iter().map(|(_, _, stats)| stats.clone()).collect(),
        total_results,
        ok_results,
        failed_results,
        failure_rate,
        failures,
        total_cost,
    };
    write_json_atomic(&run_dir.join("summary.json"), &summary)?;
    write_json_atomic(&run_dir.join("run_stats.json"), &gateway.stats())?;

    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        failure_rate_exceeded: failure_rate > manifest.max_failure_rate,
        summary,
    })
}

/// A run directory read back: manifest, datasets, and per-repetition
/// results grouped by dataset in manifest order.
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub datasets: Vec<DatasetSlice>,
}

pub struct DatasetSlice {
    pub dataset_id: String,
    pub instances: Vec<TaskInstance>,
    /// `results_by_rep[r]` holds whatever records exist for repetition r,
    /// in dataset instance order.
    pub results_by_rep: Vec<Vec<EvaluationResult>>,
}

pub fn load_run(run_dir: &Path) -> Result<LoadedRun, RunnerError> {
    let manifest_path = run_dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(RunnerError::MissingRun(run_dir.display().to_string()));
    }
    let manifest: RunManifest = read_json(&manifest_path)?;
    let datasets = load_datasets(&manifest)?;
    let mut slices = Vec::new();
    for (dataset_id, instances, _) in datasets {
        let mut results_by_rep = Vec::new();
        for repetition in 0..manifest.repetitions {
            let mut rep_results = Vec::new();
            for instance in &instances {
                let path = result_path(run_dir, repetition, &dataset_id, &instance.id);
                if path.exists() {
                    rep_results.push(read_json::<EvaluationResult>(&path)?);
                }
            }
            results_by_rep.push(rep_results);
        }
        slices.push(DatasetSlice {
            dataset_id,
            instances,
            results_by_rep,
        });
    }
    Ok(LoadedRun {
        manifest,
        datasets: slices,
    })
}

/// Metric means for one (evaluator, dataset) cell, averaged across
/// repetitions unless pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub evaluator_id: String,
    pub dataset_id: String,
    pub instances: usize,
    pub repetitions: u32,
    pub ok_results: usize,
    pub failed_results: usize,
    pub somers_d: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub spearman_p: Option<f64>,
    pub aucroc: Option<f64>,
    pub auprc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    /// True when repetitions were pooled into one sample set instead of
    /// averaging per-repetition metrics.
    pub pooled: bool,
    pub rows: Vec<ReportRow>,
}

fn rep_samples(slice: &DatasetSlice, repetition: usize) -> Vec<ScoredSample> {
    let labels: BTreeMap<&str, u8> = slice
        .instances
        .iter()
        .map(|i| (i.id.as_str(), i.label))
        .collect();
    slice.results_by_rep[repetition]
        .iter()
        .filter(|r| r.is_ok())
        .filter_map(|r| {
            labels
                .get(r.instance_id.as_str())
                .map(|&label| ScoredSample::new(r.final_score, label))
        })
        .collect()
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

fn row_from_reports(
    evaluator_id: &str,
    dataset_id: &str,
    instances: usize,
    repetitions: u32,
    ok_results: usize,
    failed_results: usize,
    reports: &[Option<MetricReport>],
) -> ReportRow {
    let pick = |f: fn(&MetricReport) -> Option<f64>| {
        let per_rep: Vec<Option<f64>> = reports
            .iter()
            .map(|r| r.as_ref().and_then(f))
            .collect();
        mean_defined(&per_rep)
    };
    ReportRow {
        evaluator_id: evaluator_id.to_string(),
        dataset_id: dataset_id.to_string(),
        instances,
        repetitions,
        ok_results,
        failed_results,
        somers_d: pick(|r| r.somers_d),
        spearman_rho: pick(|r| r.spearman_rho),
        spearman_p: pick(|r| r.spearman_p),
        aucroc: pick(|r| r.aucroc),
        auprc: pick(|r| r.auprc),
    }
}

/// Builds the metric table over one or more completed runs. With
/// `pool=false` (the default reading of "report the average") metrics
/// are computed per repetition and arithmetic-meaned; with `pool=true`
/// all repetitions' samples are concatenated and scored once.
pub fn compute_report(run_dirs: &[PathBuf], pool: bool) -> Result<ReportTable, RunnerError> {
    if run_dirs.is_empty() {
        return Err(RunnerError::Config("no run directories given".to_string()));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        let run = load_run(dir)?;
        for slice in &run.datasets {
            let reps = run.manifest.repetitions as usize;
            let all_results: Vec<&EvaluationResult> =
                slice.results_by_rep.iter().flatten().collect();
            let ok_results = all_results.iter().filter(|r| r.is_ok()).count();
            let failed_results = all_results.len() - ok_results;
            let reports: Vec<Option<MetricReport>> = if pool {
                let pooled: Vec<ScoredSample> = (0..reps)
                    .flat_map(|r| rep_samples(slice, r))
                    .collect();
                vec![metrics::compute_report(&pooled).ok()]
            } else {
                (0..reps)
                    .map(|r| metrics::compute_report(&rep_samples(slice, r)).ok())
                    .collect()
            };
            rows.push(row_from_reports(
                &run.manifest.evaluator_id,
                &slice.dataset_id,
                slice.instances.len(),
                run.manifest.repetitions,
                ok_results,
                failed_results,
                &reports,
            ));
        }
    }
    rows.sort_by(|a, b| {
        a.evaluator_id
            .cmp(&b.evaluator_id)
            .then_with(|| a.dataset_id.cmp(&b.dataset_id))
    });
    Ok(ReportTable { pooled: pool, rows })
}

fn fmt_metric(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.4}", v),
        None => "n/a".to_string(),
    }
}

fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let mut write_row = |cells: &[String]| {
        let line: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:<width$}", c, width = widths[i]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    };
    write_row(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    write_row(
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>(),
    );
    for row in rows {
        write_row(row);
    }
    out
}

pub fn render_report_table(table: &ReportTable) -> String {
    let headers = [
        "evaluator",
        "dataset",
        "n",
        "reps",
        "ok",
        "failed",
        "somers_d",
        "spearman_rho",
        "p_value",
        "aucroc",
        "auprc",
    ];
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.evaluator_id.clone(),
                r.dataset_id.clone(),
                r.instances.to_string(),
                r.repetitions.to_string(),
                r.ok_results.to_string(),
                r.failed_results.to_string(),
                fmt_metric(r.somers_d),
                fmt_metric(r.spearman_rho),
                fmt_metric(r.spearman_p),
                fmt_metric(r.aucroc),
                fmt_metric(r.auprc),
            ]
        })
        .collect();
    let mut out = render_table(&headers, &rows);
    if table.pooled {
        out.push_str("(repetitions pooled into one sample set)\n");
    }
    out
}

pub const ABLATION_VARIANTS: &[(&str, bool, bool)] = &[
    ("full", false, false),
    ("no_verification", true, false),
    ("no_ambiguity", false, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub row: ReportRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Runs the two-stage evaluator three times under `out_root` — full,
/// without verification, without ambiguity assessment — sharing datasets
/// and seed, then reports all variants side by side.
pub fn run_ablations(
    base: &RunManifest,
    out_root: &Path,
    gateway: &Gateway,
    registry: &EvaluatorRegistry,
) -> Result<(AblationReport, Vec<RunOutcome>), RunnerError> {
    if base.evaluator_id != "vera" {
        return Err(RunnerError::Config(format!(
            "ablations apply to the vera evaluator, not {:?}",
            base.evaluator_id
        )));
    }
    let mut outcomes = Vec::new();
    let mut rows = Vec::new();
    for (variant, no_verification, no_ambiguity) in ABLATION_VARIANTS {
        let mut manifest = base.clone();
        manifest.no_verification = *no_verification;
        manifest.no_ambiguity = *no_ambiguity;
        let run_dir = out_root.join(variant);
        let outcome = run_experiment(&manifest, &run_dir, gateway, registry)?;
        let table = compute_report(&[run_dir], false)?;
        for row in table.rows {
            rows.push(AblationRow {
                variant: variant.to_string(),
                row,
            });
        }
        outcomes.push(outcome);
    }
    let report = AblationReport { rows };
    write_json_atomic(&out_root.join("ablation_report.json"), &report)?;
    std::fs::write(
        out_root.join("ablation_report.txt"),
        render_ablation_table(&report),
    )
    .map_err(|e| io_err(out_root, e))?;
    Ok((report, outcomes))
}

pub fn render_ablation_table(report: &AblationReport) -> String {
    let headers = [
        "variant",
        "dataset",
        "somers_d",
        "spearman_rho",
        "aucroc",
        "auprc",
    ];
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                r.row.dataset_id.clone(),
                fmt_metric(r.row.somers_d),
                fmt_metric(r.row.spearman_rho),
                fmt_metric(r.row.aucroc),
                fmt_metric(r.row.auprc),
            ]
        })
        .collect();
    render_table(&headers, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauCell {
    pub dataset_id: String,
    pub tau: f64,
    pub somers_d: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub aucroc: Option<f64>,
    pub auprc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauSweepReport {
    pub taus: Vec<f64>,
    pub cells: Vec<TauCell>,
}

/// Recomputes final scores for each τ from the stage outputs recorded in
/// a completed run (`p`, `a`, `h` are all τ-independent) and reports the
/// metrics per τ per dataset. Takes no gateway: the sweep cannot issue
/// provider calls by construction.
pub fn tau_sweep(run_dir: &Path, taus: &[f64]) -> Result<TauSweepReport, RunnerError> {
    let run = load_run(run_dir)?;
    if run.manifest.evaluator_id != "vera" {
        return Err(RunnerError::Config(format!(
            "tau sweep applies to the vera evaluator, not {:?}",
            run.manifest.evaluator_id
        )));
    }
    if taus.is_empty() {
        return Err(RunnerError::Config("no tau values given".to_string()));
    }
    let mut cells = Vec::new();
    for slice in &run.datasets {
        let labels: BTreeMap<&str, u8> = slice
            .instances
            .iter()
            .map(|i| (i.id.as_str(), i.label))
            .collect();
        for &tau in taus {
            let mut reports = Vec::new();
            for rep_results in &slice.results_by_rep {
                let mut samples = Vec::new();
                for result in rep_results.iter().filter(|r| r.is_ok()) {
                    let get = |key: &str| result.breakdown.get(key).copied();
                    let (p, a, h) = match (get("p"), get("a"), get("h")) {
                        (Some(p), Some(a), Some(h)) => (p, a, h),
                        _ => {
                            let missing: Vec<&str> = ["p", "a", "h"]
                                .into_iter()
                                .filter(|k| get(k).is_none())
                                .collect();
                            return Err(RunnerError::MissingStageOutputs {
                                instance: result.instance_id.clone(),
                                keys: missing.join(", "),
                            });
                        }
                    };
                    let score = combine(p, compute_penalty(a, h, tau));
                    if let Some(&label) = labels.get(result.instance_id.as_str()) {
                        samples.push(ScoredSample::new(score, label));
                    }
                }
                reports.push(metrics::compute_report(&samples).ok());
            }
            let pick = |f: fn(&MetricReport) -> Option<f64>| {
                let per_rep: Vec<Option<f64>> =
                    reports.iter().map(|r| r.as_ref().and_then(f)).collect();
                mean_defined(&per_rep)
            };
            cells.push(TauCell {
                dataset_id: slice.dataset_id.clone(),
                tau,
                somers_d: pick(|r| r.somers_d),
                spearman_rho: pick(|r| r.spearman_rho),
                aucroc: pick(|r| r.aucroc),
                auprc: pick(|r| r.auprc),
            });
        }
    }
    Ok(TauSweepReport {
        taus: taus.to_vec(),
        cells,
    })
}

pub fn render_tau_table(report: &TauSweepReport) -> String {
    let headers = ["dataset", "tau", "somers_d", "spearman_rho", "aucroc", "auprc"];
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.dataset_id.clone(),
                format!("{:.2}", c.tau),
                fmt_metric(c.somers_d),
                fmt_metric(c.spearman_rho),
                fmt_metric(c.aucroc),
                fmt_metric(c.auprc),
            ]
        })
        .collect();
    render_table(&headers, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutcome {
    pub repetition: u32,
    pub agreement: AgreementCounts,
    pub taxonomy: Vec<TaxonomyCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<DistributionReport>,
}

/// Runs the mismatch pipeline over one repetition of a completed run:
/// classify, diagnose, open-code, precluster, consolidate, distribute.
/// Each stage persists under `<run_dir>/analysis/` and is skipped when
/// its file already exists, so an interrupted analysis resumes where it
/// stopped.
pub fn analyze_mismatches(
    run_dir: &Path,
    repetition: u32,
    gateway: &Gateway,
    registry: &EvaluatorRegistry,
    cluster_cutoff: f64,
) -> Result<AnalysisOutcome, RunnerError> {
    let run = load_run(run_dir)?;
    if repetition >= run.manifest.repetitions {
        return Err(RunnerError::Config(format!(
            "repetition {} out of range; run has {}",
            repetition, run.manifest.repetitions
        )));
    }
    let config = EvaluatorConfig::from_manifest(&run.manifest, run_dir.join("criteria"));
    let descriptor = registry
        .build(&run.manifest.evaluator_id, &config)?
        .descriptor();

    let instances: Vec<TaskInstance> = run
        .datasets
        .iter()
        .flat_map(|s| s.instances.iter().cloned())
        .collect();
    let instance_by_id: BTreeMap<&str, &TaskInstance> =
        instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let results: Vec<EvaluationResult> = run
        .datasets
        .iter()
        .flat_map(|s| s.results_by_rep[repetition as usize].iter().cloned())
        .collect();
    if results.is_empty() {
        return Err(RunnerError::Config(format!(
            "run has no results for repetition {}",
            repetition
        )));
    }
    let result_by_id: BTreeMap<&str, &EvaluationResult> =
        results.iter().map(|r| (r.instance_id.as_str(), r)).collect();

    let analysis_dir = run_dir.join("analysis");
    std::fs::create_dir_all(&analysis_dir).map_err(|e| io_err(&analysis_dir, e))?;
    let stage = |name: &str| analysis_dir.join(name);

    // Stage 1: classification.
    let cases_path = stage("cases.json");
    let agreement_path = stage("agreement.json");
    let (mut cases, agreement) = if cases_path.exists() && agreement_path.exists() {
        let archive: CaseArchive = read_json(&cases_path)?;
        (archive.cases, read_json(&agreement_path)?)
    } else {
        let (cases, agreement) = classify_mismatches(&results, &instances, &descriptor)?;
        write_json_atomic(&cases_path, &CaseArchive::new(cases.clone()))?;
        write_json_atomic(&agreement_path, &agreement)?;
        (cases, agreement)
    };

    if cases.is_empty() {
        let note = format!(
            "no mismatches: {} scored results all agree with the labels \
             ({} high, {} low, {} failed)\n",
            agreement.agree_high + agreement.agree_low,
            agreement.agree_high,
            agreement.agree_low,
            agreement.failed_results
        );
        std::fs::write(stage("distribution.txt"), &note)
            .map_err(|e| io_err(&analysis_dir, e))?;
        let outcome = AnalysisOutcome {
            repetition,
            agreement,
            taxonomy: Vec::new(),
            distribution: None,
        };
        write_json_atomic(&stage("outcome.json"), &outcome)?;
        return Ok(outcome);
    }

    let lookup = |case: &crate::model::MismatchCase| -> Result<
        (&TaskInstance, &EvaluationResult),
        RunnerError,
    > {
        let inst = instance_by_id
            .get(case.instance_id.as_str())
            .ok_or_else(|| MismatchError::UnknownInstance(case.instance_id.clone()))?;
        let result = result_by_id
            .get(case.instance_id.as_str())
            .ok_or_else(|| MismatchError::UnknownInstance(case.instance_id.clone()))?;
        Ok((inst, result))
    };

    // Stage 2: diagnosis.
    let diagnosed_path = stage("diagnosed.json");
    if diagnosed_path.exists() {
        cases = read_json::<CaseArchive>(&diagnosed_path)?.cases;
    } else {
        let diagnoses: Vec<Result<String, RunnerError>> =
            parallel_map(&cases, run.manifest.workers, |_, case| {
                let (inst, result) = lookup(case)?;
                diagnose_case(
                    case,
                    inst,
                    result,
                    &descriptor,
                    gateway,
                    &run.manifest.analyst_model_id,
                )
                .map_err(RunnerError::from)
            });
        for (case, diagnosis) in cases.iter_mut().zip(diagnoses) {
            case.diagnosis = Some(diagnosis?);
        }
        write_json_atomic(&diagnosed_path, &CaseArchive::new(cases.clone()))?;
    }

    // Stage 3: open coding.
    let labeled_path = stage("labeled.json");
    if labeled_path.exists() {
        cases = read_json::<CaseArchive>(&labeled_path)?.cases;
    } else {
        let labels: Vec<Result<Vec<String>, RunnerError>> =
            parallel_map(&cases, run.manifest.workers, |_, case| {
                extract_labels(case, &descriptor, gateway, &run.manifest.analyst_model_id)
                    .map_err(RunnerError::from)
            });
        for (case, result) in cases.iter_mut().zip(labels) {
            case.limitation_labels = result?;
        }
        write_json_atomic(&labeled_path, &CaseArchive::new(cases.clone()))?;
    }

    // Stage 4: preclustering.
    let preclusters_path = stage("preclusters.json");
    let preclusters: Vec<Precluster> = if preclusters_path.exists() {
        read_json(&preclusters_path)?
    } else {
        let pcs = precluster_labels(
            &cases,
            &instances,
            gateway,
            &run.manifest.embedding_model_id,
            cluster_cutoff,
        )?;
        write_json_atomic(&preclusters_path, &pcs)?;
        pcs
    };

    // Stage 5: consolidation.
    let taxonomy_path = stage("taxonomy.json");
    let mut taxonomy: Vec<TaxonomyCategory> = if taxonomy_path.exists() {
        read_json(&taxonomy_path)?
    } else {
        let categories =
            consolidate_taxonomy(&preclusters, gateway, &run.manifest.analyst_model_id)?;
        write_json_atomic(&taxonomy_path, &categories)?;
        categories
    };

    // Stage 6: distribution. Fills the taxonomy's distribution maps, so
    // taxonomy.json is rewritten with the final view.
    let distribution = distribution_report(&mut taxonomy, &preclusters, &cases);
    write_json_atomic(&taxonomy_path, &taxonomy)?;
    write_json_atomic(&stage("distribution.json"), &distribution)?;
    std::fs::write(
        stage("distribution.txt"),
        render_distribution(&distribution),
    )
    .map_err(|e| io_err(&analysis_dir, e))?;

    let outcome = AnalysisOutcome {
        repetition,
        agreement,
        taxonomy,
        distribution: Some(distribution),
    };
    write_json_atomic(&stage("outcome.json"), &outcome)?;
    Ok(outcome)
}

pub fn render_distribution(report: &DistributionReport) -> String {
    let mut out = format!(
        "{} mismatch cases: {} missed errors, {} false alarms\n\n",
        report.total_cases, report.missed_errors, report.false_alarms
    );
    for cat in &report.categories {
        out.push_str(&format!(
            "{}: {} cases ({:.1}% of {})\n",
            cat.name, cat.case_count, cat.share_of_cases_pct, report.total_cases
        ));
        let fmt_map = |map: &BTreeMap<String, f64>| {
            map.iter()
                .map(|(k, v)| format!("{} {:.1}%", k, v))
                .collect::<Vec<_>>()
                .join(", ")
        };
        if !cat.evaluator_pct.is_empty() {
            out.push_str(&format!("  evaluators: {}\n", fmt_map(&cat.evaluator_pct)));
        }
        if !cat.error_type_pct.is_empty() {
            out.push_str(&format!("  error types: {}\n", fmt_map(&cat.error_type_pct)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::write_dataset;
    use crate::eval::default_registry;
    use crate::eval::testutil::instance;
    use crate::gateway::mock::{MockChatProvider, MockRule, MockScript};
    use crate::gateway::GatewayConfig;
    use crate::model::{DatasetRef, ResultStatus};
    use std::sync::Arc;

    fn rule(contains: &[&str], reply: &str) -> MockRule {
        MockRule {
            when_contains: contains.iter().map(|s| s.to_string()).collect(),
            reply: reply.to_string(),
            ..Default::default()
        }
    }

    fn stage1_rule(question: &str, r: i64) -> MockRule {
        rule(
            &[question, "strict evaluator"],
            &format!(r#"{{"score": {r}, "reason": "fixture judgment"}}"#),
        )
    }

    fn stage2_rule(question: &str, a: f64, h: f64) -> MockRule {
        rule(
            &[question, "Task Ambiguity Level"],
            &format!(
                r#"{{"ambiguity_level": {a}, "handling_quality": {h}, "handling_issues": "none"}}"#
            ),
        )
    }

    /// Four instances: two labelled correct scoring high/low, two labelled
    /// incorrect scoring low/high — one mismatch in each direction.
    fn fixture_instances() -> Vec<TaskInstance> {
        let specs = [
            ("inst-a", 1u8, "Reverse a linked list."),
            ("inst-b", 1, "Merge two sorted arrays."),
            ("inst-c", 0, "Balance a binary tree."),
            ("inst-d", 0, "Parse a date string."),
        ];
        specs
            .iter()
            .map(|(id, label, q)| {
                let mut inst = instance(id);
                inst.label = *label;
                inst.question = q.to_string();
                inst
            })
            .collect()
    }

    fn fixture_rules() -> Vec<MockRule> {
        vec![
            // a: correct, scored high (agreement).
            stage1_rule("Reverse a linked list.", 9),
            stage2_rule("Reverse a linked list.", 0.1, 0.5),
            // b: correct, scored low (false alarm).
            stage1_rule("Merge two sorted arrays.", 2),
            stage2_rule("Merge two sorted arrays.", 0.2, 0.5),
            // c: incorrect, scored low (agreement).
            stage1_rule("Balance a binary tree.", 3),
            stage2_rule("Balance a binary tree.", 0.1, 0.5),
            // d: incorrect, scored high (missed error).
            stage1_rule("Parse a date string.", 8),
            stage2_rule("Parse a date string.", 0.3, 0.5),
        ]
    }

    struct Fixture {
        _tmp: tempfile::TempDir,
        manifest: RunManifest,
        run_dir: PathBuf,
        gateway: Gateway,
        chat: Arc<MockChatProvider>,
    }

    fn fixture_with(rules: Vec<MockRule>, repetitions: u32, cache: bool) -> Fixture {
        let tmp = tempfile::tempdir().unwrap();
        let data_path = tmp.path().join("fixture.jsonl");
        write_dataset(&data_path, &fixture_instances()).unwrap();
        let mut manifest = RunManifest::new("vera");
        manifest.datasets = vec![DatasetRef {
            dataset_id: "fixture".to_string(),
            path: data_path,
        }];
        manifest.repetitions = repetitions;
        let script = MockScript {
            rules,
            ..Default::default()
        };
        let (gateway, chat) = Gateway::mock_with_handle(
            script,
            GatewayConfig {
                cache_dir: cache.then(|| tmp.path().join("cache")),
                retry_base_ms: 0,
                ..GatewayConfig::default()
            },
        );
        Fixture {
            run_dir: tmp.path().join("run"),
            _tmp: tmp,
            manifest,
            gateway,
            chat,
        }
    }

    #[test]
    fn run_produces_one_record_per_cell() {
        let fx = fixture_with(fixture_rules(), 3, false);
        let outcome =
            run_experiment(&fx.manifest, &fx.run_dir, &fx.gateway, &default_registry()).unwrap();
        assert_eq!(outcome.summary.total_results, 12);
        assert_eq!(outcome.summary.ok_results, 12);
        assert!(!outcome.failure_rate_exceeded);
        for rep in 0..3 {
            for id in ["inst-a", "inst-b", "inst-c", "inst-d"] {
                assert!(result_path(&fx.run_dir, rep, "fixture", id).exists());
            }
        }
        let summary: RunSummary = read_json(&fx.run_dir.join("summary.json")).unwrap();
        assert_eq!(summary, outcome.summary);
    }

    #[test]
    fn completed_run_resumes_without_provider_calls() {
        let fx = fixture_with(fixture_rules(), 2, false);
        let registry = default_registry();
        let first =
            run_experiment(&fx.manifest, &fx.run_dir, &fx.gateway, &registry).unwrap();
        let calls_after_first = fx.chat.calls();
        assert!(calls_after_first > 0);
        let second =
            run_experiment(&fx.manifest, &fx.run_dir, &fx.gateway, &registry).unwrap();
        assert_eq!(fx.chat.calls(), calls_after_first);
        assert_eq!(first.summary, second.summary);
    }

    #[test]
    fn conflicting_manifest_is_rejected() {
        let fx = fixture_with(fixture_rules(), 1, false);
        let registry = default_registry();
        run_experiment(&fx.manifest, &fx.run_dir, &fx.gateway, &registry).unwrap();
        let mut changed = fx.manifest.clone();
        changed.tau = 0.7;
        let err = run_experiment(&changed, &fx.run_dir, &fx.gateway, &registry)
            .err()
            .expect("manifest mismatch");
        assert!(err.to_string().contains("different manifest"));
    }

    #[test]
    fn scripted_failure_is_recorded_not_fatal() {
        // No rules for inst-d: its stage-1 call errors out.
        let rules: Vec<MockRule> = fixture_rules()
            .into_iter()
            .filter(|r| !r.when_contains.contains(&"Parse a date string.".to_string()))
            .collect();
        let fx = fixture_with(rules, 1, false);
        let outcome =
            run_experiment(&fx.manifest, &fx.run_dir, &fx.gateway, &default_registry()).unwrap();
        assert_eq!(outcome.summary.failed_results, 1);
        assert_eq!(outcome.summary.ok_results, 3);
        assert_eq!(outcome.summary.failures.len(), 1);
        assert_eq!(outcome.summary.failures[0].instance_id, "inst-d");
        // 1/4 failed > default 0.1 tolerance.
        assert!(outcome.failure_rate_exceeded);

        let table = compute_report(&[fx.run_dir.clone()], false).unwrap();
        assert_eq!(table.rows[0].ok_results, 3);
        assert_eq!(table.rows[0].failed_results, 1);
    }

    #[test]
    fn failure_tolerance_is_configurable() {
        let rules: Vec<MockRule> = fixture_rules()
            .into_iter()
            .filter(|r| !r.when_contains.contains(&"Parse a date string.".to_string()))
            .collect();
        let mut fx = fixture_with(rules, 1, false);
        fx.manifest.max_failure_rate = 0.5;
        let outcome =
            run_experiment(&fx.manifest, &fx.run_dir, &fx.gateway, &default_registry()).unwrap();
        assert!(!outcome.failure_rate_exceeded);
    }

    #[test]
    fn failed_records_are_retried_on_rerun() {
        let rules: Vec<MockRule> = fixture_rules()
            .into_iter()
            .filter(|r| !r.when_contains.contains(&"Parse a date string.".to_string()))
            .collect();
        let fx = fixture_with(rules, 1, false);
        let registry = default_registry();
        let mut relaxed = fx.manifest.clone();
        relaxed.max_failure_rate = 1.0;
        run_experiment(&relaxed, &fx.run_dir, &fx.gateway, &registry).unwrap();
        let failed_path = result_path(&fx.run_dir, 0, "fixture", "inst-d");
        let record: EvaluationResult = read_json(&failed_path).unwrap();
        assert_eq!(record.status, ResultStatus::Failed);

        // Second execution with rules present for inst-d heals the record.
        let healed = fixture_with(fixture_rules(), 1, false);
        let calls_before = healed.chat.calls();
        // Point the healed gateway at the original run dir and dataset.
        let outcome =
            run_experiment(&relaxed, &fx.run_dir, &healed.gateway, &registry).unwrap();
        assert_eq!(outcome.summary.failed_results, 0);
        // Only inst-d was recomputed: stage 1 + stage 2.
        assert_eq!(healed.chat.calls() - calls_before, 2);
    }

    #[test]
    fn report_single_repetition_matches_direct_metric_calls() {
        let fx = fixture_with(fixture_rules(), 1, false);
        run_experiment(&fx.manifest, &fx.run_dir, &fx.gateway, &default_registry()).unwrap();
        let table = compute_report(&[fx.run_dir.clone()], false).unwrap();
        let row = &table.rows[0];

        // Scores follow from the scripted ranks: (r-1)/9 with no penalty
        // (every a < 0.4). Labels a,b correct; c,d incorrect.
        let samples = vec![
            ScoredSample::new(8.0 / 9.0, 1),
            ScoredSample::new(1.0 / 9.0, 1),
            ScoredSample::new(2.0 / 9.0, 0),
            ScoredSample::new(7.0 / 9.0, 0),
        ];
        let direct = metrics::compute_report(&samples).unwrap();
        assert_eq!(row.somers_d, direct.somers_d);
        assert_eq!(row.spearman_rho, direct.spearman_rho);
        assert_eq!(row.aucroc, direct.aucroc);
        assert_eq!(row.auprc, direct.auprc);
    }

    #[test]
    fn identical_repetitions_average_to_the_single_rep_value() {
        let fx1 = fixture_with(fixture_rules(), 1, false);
        run_experiment(&fx1.manifest, &fx1.run_dir, &fx1.gateway, &default_registry()).unwrap();
        let single = compute_report(&[fx1.run_dir.clone()], false).unwrap();

        let fx3 = fixture_with(fixture_rules(), 3, false);
        run_experiment(&fx3.manifest, &fx3.run_dir, &fx3.gateway, &default_registry()).unwrap();
        let triple = compute_report(&[fx3.run_dir.clone()], false).unwrap();

        assert_eq!(single.rows[0].somers_d, triple.rows[0].somers_d);
        assert_eq!(single.rows[0].aucroc, triple.rows[0].aucroc);
        assert_eq!(single.rows[0].auprc, triple.rows[0].auprc);
    }

    /// Builds a run directory by hand with two repetitions whose scores
    /// differ, to pin the cross-repetition arithmetic mean.
    #[test]
    fn metrics_are_averaged_across_repetitions() {
        let tmp = tempfile::tempdir().unwrap();
        let data_path = tmp.path().join("fixture.jsonl");
        write_dataset(&data_path, &fixture_instances()).unwrap();
        let mut manifest = RunManifest::new("llm_judge");
        manifest.datasets = vec![DatasetRef {
            dataset_id: "fixture".to_string(),
            path: data_path,
        }];
        manifest.repetitions = 2;
        let run_dir = tmp.path().join("run");
        std::fs::create_dir_all(&run_dir).unwrap();
        write_json_atomic(&run_dir.join("manifest.json"), &manifest).unwrap();

        // Rep 0: perfect ranking (AUCROC 1.0). Rep 1: one inversion over
        // the 2x2 grid (AUCROC 0.75). Mean must be 0.875.
        let scores = [
            [("inst-a", 0.9), ("inst-b", 0.8), ("inst-c", 0.2), ("inst-d", 0.1)],
            [("inst-a", 0.9), ("inst-b", 0.2), ("inst-c", 0.3), ("inst-d", 0.1)],
        ];
        for (rep, rep_scores) in scores.iter().enumerate() {
            for (id, score) in rep_scores {
                let mut result = EvaluationResult::failed(id, "llm_judge", rep as u32, "", CostStats::default(), vec![]);
                result.status = ResultStatus::Ok;
                result.error = None;
                result.final_score = *score;
                let path = result_path(&run_dir, rep as u32, "fixture", id);
                std::fs::create_dir_all(path.parent().unwrap()).unwrap();
                write_json_atomic(&path, &result).unwrap();
            }
        }
        let table = compute_report(&[run_dir.clone()], false).unwrap();
        assert!((table.rows[0].aucroc.unwrap() - 0.875).abs() < 1e-12);

        let pooled = compute_report(&[run_dir], true).unwrap();
        assert!(pooled.pooled);
        // Pooling concatenates the eight samples instead of averaging.
        assert!(pooled.rows[0].aucroc.unwrap() != 0.875);
    }

    #[test]
    fn ablations_share_data_and_skip_stage_two_when_disabled() {
        let mut rules = fixture_rules();
        // Stage-1 replies for the search-free variant, which renders a
        // different prompt (no verification instructions).
        for (q, r) in [
            ("Reverse a linked list.", 9),
            ("Merge two sorted arrays.", 2),
            ("Balance a binary tree.", 3),
            ("Parse a date string.", 8),
        ] {
            rules.push(rule(
                &[q, "evaluator of AI reasoning"],
                &format!(r#"{{"score": {r}, "reason": "fixture judgment"}}"#),
            ));
        }
        let mut fx = fixture_with(rules, 1, false);
        fx.manifest.max_failure_rate = 1.0;
        let out_root = fx.run_dir.clone();
        let (report, outcomes) =
            run_ablations(&fx.manifest, &out_root, &fx.gateway, &default_registry()).unwrap();
        assert_eq!(outcomes.len(), 3);
        assert_eq!(report.rows.len(), 3);
        let variants: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(variants, vec!["full", "no_verification", "no_ambiguity"]);

        // Every scripted a is below tau, so the penalty never fires and
        // the no-ambiguity row equals the full row.
        let full = &report.rows[0].row;
        let no_ambiguity = &report.rows[2].row;
        assert_eq!(full.somers_d, no_ambiguity.somers_d);
        assert_eq!(full.aucroc, no_ambiguity.aucroc);

        // Stage-2 ran in the full and no-verification runs only: 4
        // instances each. The no-ambiguity run added none.
        assert_eq!(fx.chat.calls_matching("Task Ambiguity Level"), 8);
        assert!(out_root.join("ablation_report.txt").exists());
    }

    #[test]
    fn tau_sweep_recombines_from_recorded_breakdowns() {
        let mut rules = Vec::new();
        // High ambiguity, poorly handled: penalty fires once tau <= a.
        for (q, r, a, h) in [
            ("Reverse a linked list.", 9, 0.8, 0.2),
            ("Merge two sorted arrays.", 7, 0.5, 0.1),
            ("Balance a binary tree.", 3, 0.1, 0.5),
            ("Parse a date string.", 8, 0.0, 0.5),
        ] {
            rules.push(stage1_rule(q, r));
            rules.push(stage2_rule(q, a, h));
        }
        let fx = fixture_with(rules, 1, false);
        run_experiment(&fx.manifest, &fx.run_dir, &fx.gateway, &default_registry()).unwrap();

        let taus: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).chain([1.01]).collect();
        let report = tau_sweep(&fx.run_dir, &taus).unwrap();
        assert_eq!(report.cells.len(), 12);

        // Oracle: recompute each tau's samples from the scripted values.
        let scripted = [
            (9.0, 0.8, 0.2, 1u8),
            (7.0, 0.5, 0.1, 1),
            (3.0, 0.1, 0.5, 0),
            (8.0, 0.0, 0.5, 0),
        ];
        for cell in &report.cells {
            let samples: Vec<ScoredSample> = scripted
                .iter()
                .map(|&(r, a, h, label)| {
                    let p = (r - 1.0) / 9.0;
                    ScoredSample::new(combine(p, compute_penalty(a, h, cell.tau)), label)
                })
                .collect();
            let direct = metrics::compute_report(&samples).unwrap();
            assert_eq!(cell.aucroc, direct.aucroc, "tau={}", cell.tau);
            assert_eq!(cell.somers_d, direct.somers_d, "tau={}", cell.tau);
        }

        // tau=1.01 equals the no-penalty scores outright.
        let gate_closed = report.cells.iter().find(|c| c.tau == 1.01).unwrap();
        let plain: Vec<ScoredSample> = scripted
            .iter()
            .map(|&(r, _, _, label)| ScoredSample::new((r - 1.0) / 9.0, label))
            .collect();
        assert_eq!(
            gate_closed.aucroc,
            metrics::compute_report(&plain).unwrap().aucroc
        );
    }

    #[test]
    fn tau_sweep_requires_stage_two_outputs() {
        let mut fx = fixture_with(fixture_rules(), 1, false);
        fx.manifest.no_ambiguity = true;
        run_experiment(&fx.manifest, &fx.run_dir, &fx.gateway, &default_registry()).unwrap();
        let err = tau_sweep(&fx.run_dir, &[0.4]).err().expect("missing a,h");
        match err {
            RunnerError::MissingStageOutputs { keys, .. } => {
                assert!(keys.contains('a') && keys.contains('h'));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    fn analysis_rules() -> Vec<MockRule> {
        let mut rules = fixture_rules();
        rules.extend([
            rule(
                &["gave a high score"],
                "The judge accepted an unverified claim about the API.",
            ),
            rule(
                &["gave a low score"],
                "The judge over-penalized a legitimate stylistic choice.",
            ),
            rule(
                &["missed_error"],
                r#"{"limitations": ["accepts_unverified_claims", "skips_evidence_check"]}"#,
            ),
            rule(
                &["false_alarm"],
                r#"{"limitations": ["penalizes_valid_style", "misreads_task_intent"]}"#,
            ),
            rule(
                &["strictly MECE"],
                r#"{"categories": [
                    {"name": "verification_gaps", "definition": "Fails to check claims.",
                     "boundary_rule": "Any unverified acceptance.",
                     "assigned_preclusters": ["accepts_unverified_claims", "skips_evidence_check"]},
                    {"name": "intent_misreading", "definition": "Misjudges what the task allows.",
                     "boundary_rule": "Any wrong-requirement penalty.",
                     "assigned_preclusters": ["penalizes_valid_style", "misreads_task_intent"]}
                ]}"#,
            ),
        ]);
        rules
    }

    #[test]
    fn analysis_runs_end_to_end_and_checkpoints() {
        let fx = fixture_with(analysis_rules(), 1, false);
        let registry = default_registry();
        run_experiment(&fx.manifest, &fx.run_dir, &fx.gateway, &registry).unwrap();

        let outcome = analyze_mismatches(&fx.run_dir, 0, &fx.gateway, &registry, 0.35).unwrap();
        assert_eq!(outcome.agreement.missed_errors, 1);
        assert_eq!(outcome.agreement.false_alarms, 1);
        assert_eq!(outcome.taxonomy.len(), 2);
        let distribution = outcome.distribution.as_ref().unwrap();
        assert_eq!(distribution.total_cases, 2);
        for name in [
            "cases.json",
            "diagnosed.json",
            "labeled.json",
            "preclusters.json",
            "taxonomy.json",
            "distribution.json",
            "distribution.txt",
        ] {
            assert!(fx.run_dir.join("analysis").join(name).exists(), "{name}");
        }

        // Checkpointed stages never re-ask the analyst.
        let calls_before = fx.chat.calls();
        let again = analyze_mismatches(&fx.run_dir, 0, &fx.gateway, &registry, 0.35).unwrap();
        assert_eq!(fx.chat.calls(), calls_before);
        assert_eq!(outcome, again);
    }

    #[test]
    fn zero_mismatch_run_reports_no_mismatches() {
        // All four agree: correct instances scored high, incorrect low.
        let rules = vec![
            stage1_rule("Reverse a linked list.", 9),
            stage2_rule("Reverse a linked list.", 0.1, 0.5),
            stage1_rule("Merge two sorted arrays.", 8),
            stage2_rule("Merge two sorted arrays.", 0.2, 0.5),
            stage1_rule("Balance a binary tree.", 3),
            stage2_rule("Balance a binary tree.", 0.1, 0.5),
            stage1_rule("Parse a date string.", 2),
            stage2_rule("Parse a date string.", 0.3, 0.5),
        ];
        let fx = fixture_with(rules, 1, false);
        let registry = default_registry();
        run_experiment(&fx.manifest, &fx.run_dir, &fx.gateway, &registry).unwrap();
        let outcome = analyze_mismatches(&fx.run_dir, 0, &fx.gateway, &registry, 0.35).unwrap();
        assert!(outcome.taxonomy.is_empty());
        assert!(outcome.distribution.is_none());
        let note =
            std::fs::read_to_string(fx.run_dir.join("analysis").join("distribution.txt")).unwrap();
        assert!(note.contains("no mismatches"));
    }

    #[test]
    fn sanitize_keeps_safe_names_and_hashes_odd_ones() {
        assert_eq!(sanitize("inst-07.json_ok"), "inst-07.json_ok");
        let odd = sanitize("a/b c");
        assert!(odd.starts_with("a_b_c-"));
        assert_ne!(sanitize("a/b"), sanitize("a_b"));
    }
}
