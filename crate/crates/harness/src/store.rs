//! Append-only adjudication log with derived tallies.
//!
//! Each patient has `<store>/<patient_id>.jsonl`; every line is one
//! decision or completion mark. Lines are fsynced before a decision is
//! acknowledged. `snapshot.json` holds derived tallies for readers that
//! do not replay the log; the log is always authoritative.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use oncex_core::evaluation::{acceptance_and_missing, AdjudicationRates, AdjudicationTally};
use oncex_core::schema::{validate_json_value, EntityInstance, PatientRecord, RawInstance, SchemaRegistry};

pub const SNAPSHOT_FILE: &str = "snapshot.json";
const SNAPSHOT_EVERY: u64 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Approve,
    Edit,
    Add,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decision {
    /// Position in the store, assigned on append.
    #[serde(default)]
    pub seq: u64,
    pub patient_id: String,
    #[serde(default)]
    pub instance_id: Option<String>,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_attributes: Option<BTreeMap<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_instance: Option<RawInstance>,
    pub reviewer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Completion {
    #[serde(default)]
    pub seq: u64,
    pub patient_id: String,
    pub complete: bool,
    #[serde(default)]
    pub reviewer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Decision(Decision),
    Completion(Completion),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("corrupt store {path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("unknown patient `{0}`")]
    UnknownPatient(String),
    #[error("unknown instance `{instance}` for patient `{patient}`")]
    UnknownInstance { patient: String, instance: String },
    #[error("invalid decision: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |e| StoreError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Tallies per patient, then per entity type.
pub type Tallies = BTreeMap<String, BTreeMap<String, AdjudicationTally>>;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EntityDashboard {
    #[serde(flatten)]
    pub rates: AdjudicationRates,
    pub counts: AdjudicationTally,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Dashboard {
    pub approved_rate: Option<f64>,
    pub edit_rate: Option<f64>,
    pub missing_rate: Option<f64>,
    pub approved_share: Option<f64>,
    pub edit_share: Option<f64>,
    pub missing_share: Option<f64>,
    pub counts: AdjudicationTally,
    pub per_entity: BTreeMap<String, EntityDashboard>,
    pub patients_complete: usize,
    pub patients_total: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    tallies: BTreeMap<String, BTreeMap<String, AdjudicationTally>>,
}

#[derive(Debug)]
pub struct ReviewStore {
    dir: PathBuf,
    registry: SchemaRegistry,
    records: BTreeMap<String, PatientRecord>,
    log: BTreeMap<String, Vec<Decision>>,
    complete: BTreeMap<String, bool>,
    seq: u64,
}

/// Superseding key: the target instance, or the added instance's id.
fn decision_key(d: &Decision) -> String {
    match (&d.instance_id, &d.new_instance) {
        (Some(id), _) => id.clone(),
        (None, Some(raw)) => format!("added:{}", raw.instance_id.clone().unwrap_or_default()),
        (None, None) => String::new(),
    }
}

impl ReviewStore {
    /// Opens (or creates) a store over a set of pipeline outputs and
    /// replays its log. A malformed line refuses the open without touching
    /// the files.
    pub fn open(dir: &Path, registry: SchemaRegistry, records: BTreeMap<String, PatientRecord>) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut store = ReviewStore {
            dir: dir.to_path_buf(),
            registry,
            records,
            log: BTreeMap::new(),
            complete: BTreeMap::new(),
            seq: 0,
        };
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        for path in files {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            for (i, raw) in text.split_inclusive('\n').enumerate() {
                let corrupt = |reason: String| StoreError::Corrupt {
                    path: path.clone(),
                    line: i + 1,
                    reason,
                };
                if !raw.ends_with('\n') {
                    return Err(corrupt("truncated line".into()));
                }
                let line: LogLine = serde_json::from_str(raw).map_err(|e| corrupt(e.to_string()))?;
                match line {
                    LogLine::Decision(mut d) => {
                        if d.patient_id != stem {
                            return Err(corrupt(format!("decision for `{}` in another patient's log", d.patient_id)));
                        }
                        store.check(&mut d).map_err(|e| corrupt(e.to_string()))?;
                        store.seq = store.seq.max(d.seq);
                        store.log.entry(stem.clone()).or_default().push(d);
                    }
                    LogLine::Completion(c) => {
                        store.seq = store.seq.max(c.seq);
                        store.complete.insert(c.patient_id, c.complete);
                    }
                }
            }
        }
        let snap_path = dir.join(SNAPSHOT_FILE);
        if snap_path.is_file() {
            let text = fs::read_to_string(&snap_path).map_err(io_err(&snap_path))?;
            match serde_json::from_str::<Snapshot>(&text) {
                Ok(s) if s.seq > store.seq => {
                    return Err(StoreError::Corrupt {
                        path: snap_path,
                        line: 0,
                        reason: format!("snapshot is at {} but the log ends at {}", s.seq, store.seq),
                    })
                }
                Ok(s) if s.seq == store.seq && s.tallies != store.tallies() => {
                    warn!("snapshot disagrees with the log; rebuilding it")
                }
                Ok(_) => {}
                Err(e) => warn!("unreadable snapshot ({e}); rebuilding it"),
            }
        }
        store.write_snapshot()?;
        Ok(store)
    }

    pub fn registry(&self) -> &SchemaRegistry {
        &self.registry
    }

    pub fn records(&self) -> &BTreeMap<String, PatientRecord> {
        &self.records
    }

    pub fn decisions(&self, patient_id: &str) -> &[Decision] {
        self.log.get(patient_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Validates a decision and normalizes its payload in place.
    fn check(&self, d: &mut Decision) -> Result<(), StoreError> {
        let record = self
            .records
            .get(&d.patient_id)
            .ok_or_else(|| StoreError::UnknownPatient(d.patient_id.clone()))?;
        let invalid = |m: &str| Err(StoreError::Invalid(m.to_string()));
        match d.action {
            Action::Approve | Action::Edit => {
                if d.new_instance.is_some() {
                    return invalid("only Add carries new_instance");
                }
                let id = d.instance_id.as_deref().ok_or_else(|| StoreError::Invalid("instance_id is required".into()))?;
                let inst = record.find(id).ok_or_else(|| StoreError::UnknownInstance {
                    patient: d.patient_id.clone(),
                    instance: id.to_string(),
                })?;
                match (d.action, &d.edited_attributes) {
                    (Action::Approve, Some(_)) => return invalid("Approve carries no edited_attributes"),
                    (Action::Edit, None) => return invalid("Edit requires edited_attributes"),
                    (Action::Edit, Some(edits)) if edits.is_empty() => return invalid("Edit requires edited_attributes"),
                    (Action::Edit, Some(edits)) => {
                        let spec = self.registry.get(&inst.entity_type).expect("outputs were typed against the registry");
                        for (k, v) in edits {
                            let attr = spec
                                .resolve_attribute(k)
                                .ok_or_else(|| StoreError::Invalid(format!("{} has no attribute `{k}`", spec.name)))?;
                            validate_json_value(attr, v).map_err(|e| StoreError::Invalid(format!("{k}: {e}")))?;
                        }
                    }
                    _ => {}
                }
            }
            Action::Add => {
                if d.instance_id.is_some() || d.edited_attributes.is_some() {
                    return invalid("Add carries only new_instance");
                }
                let raw = d.new_instance.as_mut().ok_or_else(|| StoreError::Invalid("Add requires new_instance".into()))?;
                let typed = raw.clone().into_instance(&self.registry).map_err(|e| StoreError::Invalid(e.to_string()))?;
                let fresh = EntityInstance::new(typed.entity_type.clone(), typed.attributes.clone(), vec![]);
                raw.entity_type = typed.entity_type;
                raw.instance_id = Some(raw.instance_id.clone().unwrap_or(fresh.instance_id));
            }
        }
        if d.reviewer.trim().is_empty() {
            return invalid("reviewer is required");
        }
        Ok(())
    }

    fn append(&mut self, patient_id: &str, line: &LogLine) -> Result<(), StoreError> {
        let path = self.dir.join(format!("{patient_id}.jsonl"));
        let mut text = serde_json::to_string(line).expect("log line serializes");
        text.push('\n');
        let mut f: File = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        f.write_all(text.as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))?;
        Ok(())
    }

    /// Validates, appends and fsyncs a decision, then returns the
    /// patient's updated tallies. Nothing is written on rejection.
    pub fn record(&mut self, mut d: Decision) -> Result<BTreeMap<String, AdjudicationTally>, StoreError> {
        self.check(&mut d)?;
        d.seq = self.seq + 1;
        d.timestamp.get_or_insert_with(Utc::now);
        let pid = d.patient_id.clone();
        self.append(&pid, &LogLine::Decision(d.clone()))?;
        self.seq = d.seq;
        self.log.entry(pid.clone()).or_default().push(d);
        if self.seq.is_multiple_of(SNAPSHOT_EVERY) {
            self.write_snapshot()?;
        }
        Ok(self.patient_tallies(&pid))
    }

    pub fn set_complete(&mut self, patient_id: &str, complete: bool, reviewer: &str) -> Result<(), StoreError> {
        if !self.records.contains_key(patient_id) {
            return Err(StoreError::UnknownPatient(patient_id.to_string()));
        }
        let c = Completion {
            seq: self.seq + 1,
            patient_id: patient_id.to_string(),
            complete,
            reviewer: reviewer.to_string(),
            timestamp: Some(Utc::now()),
        };
        self.append(patient_id, &LogLine::Completion(c))?;
        self.seq += 1;
        self.complete.insert(patient_id.to_string(), complete);
        Ok(())
    }

    pub fn is_complete(&self, patient_id: &str) -> bool {
        self.complete.get(patient_id).copied().unwrap_or(false)
    }

    /// The latest decision per target, in log order.
    pub fn final_decisions(&self, patient_id: &str) -> Vec<&Decision> {
        let mut latest: BTreeMap<String, &Decision> = BTreeMap::new();
        for d in self.decisions(patient_id) {
            latest.insert(decision_key(d), d);
        }
        let mut out: Vec<&Decision> = latest.into_values().collect();
        out.sort_by_key(|d| d.seq);
        out
    }

    /// Instances added by reviewers and not superseded.
    pub fn added_instances(&self, patient_id: &str) -> Vec<EntityInstance> {
        self.final_decisions(patient_id)
            .into_iter()
            .filter_map(|d| d.new_instance.clone())
            .filter_map(|raw| raw.into_instance(&self.registry).ok())
            .collect()
    }

    fn entity_of(&self, d: &Decision) -> String {
        match (&d.instance_id, &d.new_instance) {
            (Some(id), _) => self
                .records
                .get(&d.patient_id)
                .and_then(|r| r.find(id))
                .map(|i| i.entity_type.clone())
                .unwrap_or_default(),
            (None, Some(raw)) => raw.entity_type.clone(),
            _ => String::new(),
        }
    }

    pub fn patient_tallies(&self, patient_id: &str) -> BTreeMap<String, AdjudicationTally> {
        let mut out: BTreeMap<String, AdjudicationTally> = BTreeMap::new();
        for d in self.final_decisions(patient_id) {
            let t = out.entry(self.entity_of(d)).or_default();
            match d.action {
                Action::Approve => t.n_correct += 1,
                Action::Edit => t.n_incorrect += 1,
                Action::Add => t.n_missing += 1,
            }
        }
        out
    }

    pub fn tallies(&self) -> Tallies {
        self.log
            .keys()
            .map(|pid| (pid.clone(), self.patient_tallies(pid)))
            .filter(|(_, t)| !t.is_empty())
            .collect()
    }

    pub fn dashboard(&self) -> Dashboard {
        let mut per_entity: BTreeMap<String, AdjudicationTally> = BTreeMap::new();
        let mut all = Vec::new();
        for t in self.tallies().into_values() {
            for (entity, tally) in t {
                per_entity.entry(entity).or_default().add(tally);
                all.push(tally);
            }
        }
        let rates = acceptance_and_missing(&all);
        let mut counts = AdjudicationTally::default();
        all.iter().for_each(|t| counts.add(*t));
        Dashboard {
            approved_rate: rates.acceptance,
            edit_rate: rates.edit_rate,
            missing_rate: rates.missing_rate,
            approved_share: rates.approved_share,
            edit_share: rates.edit_share,
            missing_share: rates.missing_share,
            counts,
            per_entity: per_entity
                .into_iter()
                .map(|(e, t)| {
                    (
                        e,
                        EntityDashboard {
                            rates: acceptance_and_missing(&[t]),
                            counts: t,
                        },
                    )
                })
                .collect(),
            patients_complete: self.records.keys().filter(|p| self.is_complete(p)).count(),
            patients_total: self.records.len(),
        }
    }

    pub fn write_snapshot(&self) -> Result<(), StoreError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let snap = Snapshot {
            seq: self.seq,
            tallies: self.tallies(),
        };
        fs::write(&tmp, serde_json::to_string_pretty(&snap).expect("snapshot serializes")).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}
