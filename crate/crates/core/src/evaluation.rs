//! Alignment of predicted against ground-truth instances, extraction
//! metrics, review prioritization, adjudication rates and bag of little
//! bootstraps confidence intervals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{
    AlignmentScheme, AttributeSpec, EntityInstance, EntityTypeSpec, PatientRecord, SchemaRegistry, TypedValue,
};

/// Slack when comparing a weighted score against its threshold.
pub const SCORE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPolicy {
    pub date_tolerance_days: u32,
    /// Relative tolerance for numeric comparison.
    pub numeric_epsilon: f64,
}

impl MatchPolicy {
    pub fn with_tolerance(days: u32) -> Self {
        MatchPolicy {
            date_tolerance_days: days,
            numeric_epsilon: 1e-9,
        }
    }

    /// Exact dates, used while aligning.
    pub fn alignment() -> Self {
        Self::with_tolerance(0)
    }
}

impl Default for MatchPolicy {
    fn default() -> Self {
        Self::alignment()
    }
}

/// Whether two values of one attribute agree. Two nulls never match.
pub fn match_attribute(
    spec: &AttributeSpec,
    policy: &MatchPolicy,
    a: Option<&TypedValue>,
    b: Option<&TypedValue>,
) -> bool {
    let (Some(a), Some(b)) = (a, b) else { return false };
    match (a, b) {
        (TypedValue::Date(x), TypedValue::Date(y)) => {
            (*x - *y).num_days().unsigned_abs() <= policy.date_tolerance_days as u64
        }
        (TypedValue::Integer(x), TypedValue::Integer(y)) => x == y,
        (TypedValue::Boolean(x), TypedValue::Boolean(y)) => x == y,
        (TypedValue::Integer(_) | TypedValue::Decimal(_), TypedValue::Integer(_) | TypedValue::Decimal(_)) => {
            let (x, y) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            x == y || (x - y).abs() <= policy.numeric_epsilon * x.abs().max(y.abs())
        }
        (TypedValue::Categorical(x) | TypedValue::Text(x), TypedValue::Categorical(y) | TypedValue::Text(y)) => {
            spec.canonicalize(x) == spec.canonicalize(y)
        }
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignedPair {
    pub gt: usize,
    pub pred: usize,
    pub score: f64,
}

/// One-to-one pairing, by index into the inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AlignmentResult {
    pub pairs: Vec<AlignedPair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("instance of `{found}` passed to alignment for `{expected}`")]
    EntityMismatch { expected: String, found: String },
    #[error("bag of little bootstraps needs subset size {m} <= population {n}")]
    SubsetTooLarge { m: usize, n: usize },
    #[error("bag of little bootstraps parameters must be positive")]
    EmptyConfig,
}

/// Score of a candidate pair, or `None` if the pair cannot align.
pub fn pair_score(spec: &EntityTypeSpec, policy: &MatchPolicy, gt: &EntityInstance, pred: &EntityInstance) -> Option<f64> {
    match &spec.alignment {
        AlignmentScheme::Root { root_attribute } => {
            let attr = spec.attribute(root_attribute)?;
            match_attribute(attr, policy, gt.value(root_attribute), pred.value(root_attribute)).then_some(1.0)
        }
        AlignmentScheme::Weighted { threshold, .. } => {
            let score: f64 = spec
                .attributes
                .iter()
                .filter_map(|a| {
                    let w = a.weight?;
                    match_attribute(a, policy, gt.value(&a.name), pred.value(&a.name)).then_some(w)
                })
                .sum();
            (score + SCORE_SLACK >= *threshold).then_some(score)
        }
    }
}

/// Greedy one-to-one alignment: candidates by descending score, ties by
/// ground-truth index and then prediction index.
pub fn align_entities(
    spec: &EntityTypeSpec,
    policy: &MatchPolicy,
    gt: &[EntityInstance],
    pred: &[EntityInstance],
) -> Result<AlignmentResult, EvaluationError> {
    for inst in gt.iter().chain(pred) {
        if inst.entity_type != spec.name {
            return Err(EvaluationError::EntityMismatch {
                expected: spec.name.clone(),
                found: inst.entity_type.clone(),
            });
        }
    }
    let mut candidates: Vec<AlignedPair> = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            if let Some(score) = pair_score(spec, policy, g, p) {
                candidates.push(AlignedPair { gt: i, pred: j, score });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.gt.cmp(&b.gt))
            .then(a.pred.cmp(&b.pred))
    });
    let mut used_gt = vec![false; gt.len()];
    let mut used_pred = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !used_gt[c.gt] && !used_pred[c.pred] {
            used_gt[c.gt] = true;
            used_pred[c.pred] = true;
            pairs.push(c);
        }
    }
    pairs.sort_by_key(|p| (p.gt, p.pred));
    Ok(AlignmentResult {
        pairs,
        unmatched_gt: (0..gt.len()).filter(|&i| !used_gt[i]).collect(),
        unmatched_pred: (0..pred.len()).filter(|&j| !used_pred[j]).collect(),
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn scores(&self) -> Scores {
        let pred = self.tp + self.fp;
        let gt = self.tp + self.fn_;
        let precision = if pred > 0 { self.tp as f64 / pred as f64 } else { 0.0 };
        let recall = if gt > 0 { self.tp as f64 / gt as f64 } else { 0.0 };
        Scores {
            precision,
            recall,
            f1: f1(precision, recall),
            undefined: pred == 0 || gt == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a denominator was zero and a score defaulted to 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AttributeMetrics {
    pub attribute: String,
    pub counts: Counts,
    pub scores: Scores,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EntityMetrics {
    pub entity: String,
    pub n_gt: u64,
    pub n_pred: u64,
    pub aligned: u64,
    /// Aligned pairs whose driver attribute disagrees; not counted as TP.
    pub driver_mismatch: u64,
    pub counts: Counts,
    pub scores: Scores,
    pub attributes: Vec<AttributeMetrics>,
}

/// Confusion counts for one entity over one alignment.
pub fn entity_counts(
    spec: &EntityTypeSpec,
    policy: &MatchPolicy,
    gt: &[EntityInstance],
    pred: &[EntityInstance],
    alignment: &AlignmentResult,
) -> EntityMetrics {
    let driver = spec.driver_spec();
    let mut m = EntityMetrics {
        entity: spec.name.clone(),
        n_gt: gt.len() as u64,
        n_pred: pred.len() as u64,
        aligned: alignment.pairs.len() as u64,
        ..Default::default()
    };
    let mut attrs: BTreeMap<&str, Counts> = spec.attributes.iter().map(|a| (a.name.as_str(), Counts::default())).collect();
    for pair in &alignment.pairs {
        let (g, p) = (&gt[pair.gt], &pred[pair.pred]);
        if match_attribute(driver, policy, g.value(&driver.name), p.value(&driver.name)) {
            m.counts.tp += 1;
        } else {
            m.driver_mismatch += 1;
        }
        for a in &spec.attributes {
            let (gv, pv) = (g.value(&a.name), p.value(&a.name));
            let c = attrs.get_mut(a.name.as_str()).unwrap();
            if match_attribute(a, policy, gv, pv) {
                c.tp += 1;
            } else {
                c.fp += pv.is_some() as u64;
                c.fn_ += gv.is_some() as u64;
            }
        }
    }
    for &j in &alignment.unmatched_pred {
        for (name, _) in pred[j].non_null() {
            if let Some(c) = attrs.get_mut(name) {
                c.fp += 1;
            }
        }
    }
    for &i in &alignment.unmatched_gt {
        for (name, _) in gt[i].non_null() {
            if let Some(c) = attrs.get_mut(name) {
                c.fn_ += 1;
            }
        }
    }
    m.counts.fp = m.n_pred - m.counts.tp;
    m.counts.fn_ = m.n_gt - m.counts.tp;
    m.scores = m.counts.scores();
    m.attributes = spec
        .attributes
        .iter()
        .map(|a| {
            let counts = attrs[a.name.as_str()];
            AttributeMetrics {
                attribute: a.name.clone(),
                counts,
                scores: counts.scores(),
            }
        })
        .collect();
    m
}

/// Accumulates entity metrics across patients.
fn merge_entity(into: &mut EntityMetrics, other: &EntityMetrics) {
    if into.entity.is_empty() {
        into.entity = other.entity.clone();
    }
    into.n_gt += other.n_gt;
    into.n_pred += other.n_pred;
    into.aligned += other.aligned;
    into.driver_mismatch += other.driver_mismatch;
    into.counts.add(other.counts);
    into.scores = into.counts.scores();
    if into.attributes.is_empty() {
        into.attributes = other.attributes.clone();
    } else {
        for (a, b) in into.attributes.iter_mut().zip(&other.attributes) {
            a.counts.add(b.counts);
            a.scores = a.counts.scores();
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub date_tolerance_days: u32,
    pub entities: Vec<EntityMetrics>,
    pub macro_scores: Scores,
    /// Per patient macro scores over the entities present on either side.
    pub patient_scores: BTreeMap<String, Scores>,
    pub flags: Vec<String>,
}

fn macro_scores<'a>(entities: impl Iterator<Item = &'a EntityMetrics>) -> Scores {
    let defined: Vec<&Scores> = entities.map(|e| &e.scores).collect();
    if defined.is_empty() {
        return Scores {
            undefined: true,
            ..Default::default()
        };
    }
    let n = defined.len() as f64;
    Scores {
        precision: defined.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: defined.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: defined.iter().map(|s| s.f1).sum::<f64>() / n,
        undefined: false,
    }
}

/// Entity types present in either record, in canonical name order.
fn entity_types<'a>(registry: &'a SchemaRegistry, a: &PatientRecord, b: &PatientRecord) -> Vec<&'a EntityTypeSpec> {
    let names: BTreeSet<&str> = a.instances.iter().chain(&b.instances).map(|i| i.entity_type.as_str()).collect();
    let mut specs: Vec<&EntityTypeSpec> = names.into_iter().filter_map(|n| registry.get(n)).collect();
    specs.sort_by(|x, y| x.name.cmp(&y.name));
    specs.dedup_by(|x, y| x.name == y.name);
    specs
}

fn of_type(record: &PatientRecord, spec: &EntityTypeSpec) -> Vec<EntityInstance> {
    record
        .instances
        .iter()
        .filter(|i| i.entity_type == spec.name || spec.aliases.contains(&i.entity_type))
        .map(|i| EntityInstance {
            entity_type: spec.name.clone(),
            ..i.clone()
        })
        .collect()
}

/// Aligns and scores every patient, pooling counts per entity.
/// `pairs` maps a patient id to its (ground truth, prediction) records.
pub fn evaluate(
    registry: &SchemaRegistry,
    pairs: &BTreeMap<String, (PatientRecord, PatientRecord)>,
    align_policy: &MatchPolicy,
    metric_policy: &MatchPolicy,
) -> Result<MetricsReport, EvaluationError> {
    let mut pooled: BTreeMap<String, EntityMetrics> = BTreeMap::new();
    let mut report = MetricsReport {
        date_tolerance_days: metric_policy.date_tolerance_days,
        ..Default::default()
    };
    for (pid, (gt, pred)) in pairs {
        let mut per_patient = Vec::new();
        for spec in entity_types(registry, gt, pred) {
            let (g, p) = (of_type(gt, spec), of_type(pred, spec));
            let alignment = align_entities(spec, align_policy, &g, &p)?;
            let m = entity_counts(spec, metric_policy, &g, &p, &alignment);
            merge_entity(pooled.entry(spec.name.clone()).or_default(), &m);
            per_patient.push(m);
        }
        report.patient_scores.insert(pid.clone(), macro_scores(per_patient.iter()));
    }
    report.entities = pooled.into_values().collect();
    for e in &report.entities {
        if e.scores.undefined {
            report.flags.push(format!("{}: a denominator was zero; scores default to 0", e.entity));
        }
        if e.driver_mismatch > 0 {
            report.flags.push(format!("{}: {} aligned pairs disagree on the driver attribute", e.entity, e.driver_mismatch));
        }
    }
    report.macro_scores = macro_scores(report.entities.iter());
    Ok(report)
}

impl MetricsReport {
    pub fn entity(&self, name: &str) -> Option<&EntityMetrics> {
        self.entities.iter().find(|e| e.entity == name)
    }

    /// Plain-text tables of entity and attribute scores.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "date tolerance: {} days", self.date_tolerance_days);
        let _ = writeln!(out, "{:<24} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}", "entity", "tp", "fp", "fn", "precision", "recall", "f1");
        for e in &self.entities {
            let _ = writeln!(
                out,
                "{:<24} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4}",
                e.entity, e.counts.tp, e.counts.fp, e.counts.fn_, e.scores.precision, e.scores.recall, e.scores.f1
            );
        }
        let m = &self.macro_scores;
        let _ = writeln!(out, "{:<24} {:>30.4} {:>9.4} {:>9.4}", "macro", m.precision, m.recall, m.f1);
        for e in &self.entities {
            let _ = writeln!(out, "\n{}", e.entity);
            for a in e.attributes.iter().filter(|a| a.counts != Counts::default()) {
                let _ = writeln!(
                    out,
                    "  {:<28} {:>5} {:>5} {:>5} {:>9.4} {:>9.4} {:>9.4}",
                    a.attribute, a.counts.tp, a.counts.fp, a.counts.fn_, a.scores.precision, a.scores.recall, a.scores.f1
                );
            }
        }
        for f in &self.flags {
            let _ = writeln!(out, "note: {f}");
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Review prioritization
// ---------------------------------------------------------------------------

/// Mismatched attributes over aligned pairs (two nulls are not a
/// mismatch), plus every non-null attribute of an unmatched instance.
pub fn disagreement_score(
    registry: &SchemaRegistry,
    gt: &PatientRecord,
    pred: &PatientRecord,
    policy: &MatchPolicy,
) -> Result<u64, EvaluationError> {
    let mut ds = 0;
    for spec in entity_types(registry, gt, pred) {
        let (g, p) = (of_type(gt, spec), of_type(pred, spec));
        let alignment = align_entities(spec, policy, &g, &p)?;
        for pair in &alignment.pairs {
            let (a, b) = (&g[pair.gt], &p[pair.pred]);
            ds += spec
                .attributes
                .iter()
                .filter(|attr| {
                    let (x, y) = (a.value(&attr.name), b.value(&attr.name));
                    (x.is_some() || y.is_some()) && !match_attribute(attr, policy, x, y)
                })
                .count() as u64;
        }
        for &i in &alignment.unmatched_gt {
            ds += g[i].non_null().count() as u64;
        }
        for &j in &alignment.unmatched_pred {
            ds += p[j].non_null().count() as u64;
        }
    }
    Ok(ds)
}

/// Highest scores first, ties by patient id, at most `n`.
pub fn rank_for_review(scores: &BTreeMap<String, u64>, n: usize) -> Vec<String> {
    let mut ranked: Vec<(&String, &u64)> = scores.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(n).map(|(p, _)| p.clone()).collect()
}

// ---------------------------------------------------------------------------
// Adjudication
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationTally {
    pub n_correct: u64,
    pub n_incorrect: u64,
    pub n_missing: u64,
}

impl AdjudicationTally {
    pub fn n_extracted(&self) -> u64 {
        self.n_correct + self.n_incorrect
    }

    pub fn add(&mut self, other: AdjudicationTally) {
        self.n_correct += other.n_correct;
        self.n_incorrect += other.n_incorrect;
        self.n_missing += other.n_missing;
    }
}

/// Rates over pooled tallies; `None` where a denominator is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AdjudicationRates {
    /// Approved items over extracted items.
    pub acceptance: Option<f64>,
    /// Edited items over extracted items.
    pub edit_rate: Option<f64>,
    /// Added items over extracted plus added items.
    pub missing_rate: Option<f64>,
    /// Approved, edited and added items as shares of all reviewed items.
    pub approved_share: Option<f64>,
    pub edit_share: Option<f64>,
    pub missing_share: Option<f64>,
}

pub fn acceptance_and_missing(tallies: &[AdjudicationTally]) -> AdjudicationRates {
    let mut t = AdjudicationTally::default();
    tallies.iter().for_each(|x| t.add(*x));
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    let extracted = t.n_extracted();
    let all = extracted + t.n_missing;
    AdjudicationRates {
        acceptance: ratio(t.n_correct, extracted),
        edit_rate: ratio(t.n_incorrect, extracted),
        missing_rate: ratio(t.n_missing, all),
        approved_share: ratio(t.n_correct, all),
        edit_share: ratio(t.n_incorrect, all),
        missing_share: ratio(t.n_missing, all),
    }
}

// ---------------------------------------------------------------------------
// Bag of little bootstraps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlbConfig {
    pub subsets: usize,
    pub subset_size: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Two-sided coverage, e.g. 0.95.
    pub level: f64,
}

impl Default for BlbConfig {
    fn default() -> Self {
        BlbConfig {
            subsets: 10,
            subset_size: 128,
            replicates: 100,
            seed: 0,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Linear-interpolation percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean computed relative to the first element so constant input is
/// reproduced exactly.
fn shifted_mean(xs: &[f64]) -> f64 {
    let shift = xs[0];
    shift + xs.iter().map(|x| x - shift).sum::<f64>() / xs.len() as f64
}

/// Percentile interval of the mean by the bag of little bootstraps.
///
/// Each of `subsets` subsets draws `subset_size` distinct values; each
/// replicate draws `N` multinomial counts over the subset and takes the
/// count-weighted mean. Subset interval endpoints are averaged.
pub fn blb_ci(values: &[f64], cfg: &BlbConfig) -> Result<ConfidenceInterval, EvaluationError> {
    let n = values.len();
    let m = cfg.subset_size;
    if cfg.subsets == 0 || m == 0 || cfg.replicates == 0 {
        return Err(EvaluationError::EmptyConfig);
    }
    if m > n {
        return Err(EvaluationError::SubsetTooLarge { m, n });
    }
    let alpha = (1.0 - cfg.level) / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lowers = Vec::with_capacity(cfg.subsets);
    let mut uppers = Vec::with_capacity(cfg.subsets);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.subsets {
        for i in 0..m {
            let j = rng.random_range(i..n);
            order.swap(i, j);
        }
        let subset: Vec<f64> = order[..m].iter().map(|&i| values[i]).collect();
        let shift = subset[0];
        let mut stats = Vec::with_capacity(cfg.replicates);
        let mut counts = vec![0u64; m];
        for _ in 0..cfg.replicates {
            counts.iter_mut().for_each(|c| *c = 0);
            for _ in 0..n {
                counts[rng.random_range(0..m)] += 1;
            }
            let weighted: f64 = counts.iter().zip(&subset).map(|(&c, &x)| c as f64 * (x - shift)).sum();
            stats.push(shift + weighted / n as f64);
        }
        stats.sort_by(f64::total_cmp);
        lowers.push(percentile(&stats, alpha));
        uppers.push(percentile(&stats, 1.0 - alpha));
        // Restore the identity order so each subset draw starts fresh.
        order.sort_unstable();
    }
    Ok(ConfidenceInterval {
        lower: shifted_mean(&lowers),
        upper: shifted_mean(&uppers),
        level: cfg.level,
    })
}
