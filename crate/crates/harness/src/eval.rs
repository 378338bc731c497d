//! Scoring a directory of predicted records against ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use oncex_core::evaluation::{
    blb_ci, disagreement_score, evaluate, rank_for_review, BlbConfig, ConfidenceInterval, MatchPolicy, MetricsReport,
};
use oncex_core::schema::{PatientRecord, SchemaRegistry};

use crate::{io_err, HarnessError};

pub const REVIEW_TOP_N: usize = 50;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    pub report_path: PathBuf,
    /// Metric-time tolerance; alignment always uses exact dates.
    pub date_tolerance_days: u32,
    pub blb: BlbConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MacroIntervals {
    pub precision: Option<ConfidenceInterval>,
    pub recall: Option<ConfidenceInterval>,
    pub f1: Option<ConfidenceInterval>,
    pub subset_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub disagreement: BTreeMap<String, u64>,
    pub review_order: Vec<String>,
    pub intervals: MacroIntervals,
    pub flags: Vec<String>,
}

/// Reads every `*.json` record directly under `dir`, keyed by patient id.
pub fn load_records(dir: &Path, registry: &SchemaRegistry) -> Result<BTreeMap<String, PatientRecord>, HarnessError> {
    if !dir.is_dir() {
        return Err(HarnessError::MissingInput(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let record = PatientRecord::from_json(&text, registry).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
        out.insert(record.patient_id.clone(), record);
    }
    Ok(out)
}

/// Pairs records by patient; a patient on one side only is scored
/// against an empty record.
pub fn pair_records(
    gt: BTreeMap<String, PatientRecord>,
    mut pred: BTreeMap<String, PatientRecord>,
    flags: &mut Vec<String>,
) -> BTreeMap<String, (PatientRecord, PatientRecord)> {
    let mut pairs = BTreeMap::new();
    for (pid, g) in gt {
        let p = pred.remove(&pid).unwrap_or_else(|| {
            flags.push(format!("{pid}: no prediction; every ground-truth instance is unmatched"));
            PatientRecord::new(pid.clone())
        });
        pairs.insert(pid, (g, p));
    }
    for (pid, p) in pred {
        flags.push(format!("{pid}: no ground truth; every predicted instance is unmatched"));
        pairs.insert(pid.clone(), (PatientRecord::new(pid), p));
    }
    pairs
}

pub fn evaluate_pairs(
    registry: &SchemaRegistry,
    pairs: &BTreeMap<String, (PatientRecord, PatientRecord)>,
    date_tolerance_days: u32,
    blb: &BlbConfig,
    mut flags: Vec<String>,
) -> Result<EvalReport, HarnessError> {
    let fail = |e: oncex_core::evaluation::EvaluationError| HarnessError::Run(e.to_string());
    let align = MatchPolicy::alignment();
    let metrics = evaluate(registry, pairs, &align, &MatchPolicy::with_tolerance(date_tolerance_days)).map_err(fail)?;
    let mut disagreement = BTreeMap::new();
    for (pid, (g, p)) in pairs {
        disagreement.insert(pid.clone(), disagreement_score(registry, g, p, &align).map_err(fail)?);
    }
    let review_order = rank_for_review(&disagreement, REVIEW_TOP_N);

    let n = metrics.patient_scores.len();
    let mut intervals = MacroIntervals::default();
    if n > 0 {
        let mut cfg = *blb;
        if cfg.subset_size > n {
            flags.push(format!("bootstrap subset size reduced from {} to the cohort size {n}", cfg.subset_size));
            cfg.subset_size = n;
        }
        intervals.subset_size = cfg.subset_size;
        let column = |f: fn(&oncex_core::evaluation::Scores) -> f64| -> Vec<f64> { metrics.patient_scores.values().map(f).collect() };
        intervals.precision = Some(blb_ci(&column(|s| s.precision), &cfg).map_err(fail)?);
        intervals.recall = Some(blb_ci(&column(|s| s.recall), &cfg).map_err(fail)?);
        intervals.f1 = Some(blb_ci(&column(|s| s.f1), &cfg).map_err(fail)?);
    }
    flags.extend(metrics.flags.iter().cloned());
    Ok(EvalReport {
        metrics,
        disagreement,
        review_order,
        intervals,
        flags,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn summary(&self) -> String {
        let mut out = self.metrics.summary();
        let fmt = |ci: &Option<ConfidenceInterval>| match ci {
            Some(c) => format!("[{:.4}, {:.4}]", c.lower, c.upper),
            None => "n/a".to_string(),
        };
        out.push_str(&format!(
            "\n95% intervals (subset size {}): precision {} recall {} f1 {}\n",
            self.intervals.subset_size,
            fmt(&self.intervals.precision),
            fmt(&self.intervals.recall),
            fmt(&self.intervals.f1)
        ));
        out.push_str("\nreview order:\n");
        for pid in &self.review_order {
            out.push_str(&format!("  {pid} {}\n", self.disagreement[pid]));
        }
        for f in self.flags.iter().filter(|f| !self.metrics.flags.contains(f)) {
            out.push_str(&format!("note: {f}\n"));
        }
        out
    }
}

/// Writes the JSON report and a `.txt` summary beside it.
pub fn run_eval(opts: &EvalOptions) -> Result<EvalReport, HarnessError> {
    let registry = SchemaRegistry::bundled();
    let gt = load_records(&opts.gt_dir, &registry)?;
    let pred = load_records(&opts.pred_dir, &registry)?;
    let mut flags = Vec::new();
    let pairs = pair_records(gt, pred, &mut flags);
    let report = evaluate_pairs(&registry, &pairs, opts.date_tolerance_days, &opts.blb, flags)?;
    if let Some(parent) = opts.report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&opts.report_path, report.to_json()).map_err(io_err(&opts.report_path))?;
    let txt = opts.report_path.with_extension("txt");
    fs::write(&txt, report.summary()).map_err(io_err(&txt))?;
    Ok(report)
}
