//! Configuration loading and per-patient orchestration of retrieval,
//! synthesis and collation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collation::{
    collate, AuditEntry, CollationContext, CollationError, CollationRule, CollatorChain, CycleError,
    MissingDependencyPolicy,
};
use crate::corpus::{extract_document_metadata, Chunk, Document, PatientCorpus};
use crate::retrieval::{
    build_index, hybrid_retrieve, regex_retrieve, ChunkIndex, EmbeddingProvider, Query, RetrievalError,
};
use crate::schema::{
    canonicalize, AttributeKind, EntityInstance, EntityTypeSpec, PatientRecord, SchemaRegistry, TypedValue,
};
use crate::synthesis::{
    attach_provenance, concat_chunks, enumerate_then_detail, order_chunks, render_text, synthesize_with_reflection,
    GenerationParams, ParseOptions, PartialExtraction, PromptError, PromptTemplate, SynthesizerClient,
};

/// Placeholders the engine binds on its own.
pub const SNIPPET: &str = "SNIPPET";
pub const PATIENT_ID: &str = "PATIENT_ID";
pub const ENTITY: &str = "ENTITY";
/// Topic assigned to documents no topic predicate claims.
pub const GENERAL_TOPIC: &str = "general";

// ---------------------------------------------------------------------------
// Dates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DateConvention {
    /// `02/11/2019` is February 11.
    #[default]
    MonthFirst,
    DayFirst,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("unrecognized date `{0}`")]
pub struct DateError(pub String);

fn month_number(name: &str) -> Option<u32> {
    const MONTHS: [&str; 12] = [
        "january", "february", "march", "april", "may", "june", "july", "august", "september", "october", "november",
        "december",
    ];
    let name = name.trim_end_matches('.');
    if name == "sept" {
        return Some(9);
    }
    MONTHS
        .iter()
        .position(|m| *m == name || (name.len() == 3 && m.starts_with(name)))
        .map(|i| i as u32 + 1)
}

fn date_patterns() -> &'static [Regex; 8] {
    static RE: OnceLock<[Regex; 8]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            r"^(\d{4})[-/](\d{1,2})[-/](\d{1,2})$",
            r"^(\d{1,2})[/-](\d{1,2})[/-](\d{4})$",
            r"^([a-z]+\.?)\s+(\d{1,2})(?:st|nd|rd|th)?,?\s+(\d{4})$",
            r"^(\d{1,2})(?:st|nd|rd|th)?\s+([a-z]+\.?),?\s+(\d{4})$",
            r"^([a-z]+\.?),?\s+(\d{4})$",
            r"^(\d{1,2})/(\d{4})$",
            r"^(\d{4})-(\d{1,2}|\?\?)(?:-\?\?)?$",
            r"^(\d{4})$",
        ]
        .map(|p| Regex::new(p).unwrap())
    })
}

fn full(y: &str, m: u32, d: &str, raw: &str) -> Result<String, DateError> {
    let err = || DateError(raw.to_string());
    let y: i32 = y.parse().map_err(|_| err())?;
    let d: u32 = d.parse().map_err(|_| err())?;
    NaiveDate::from_ymd_opt(y, m, d)
        .map(|date| date.format("%Y-%m-%d").to_string())
        .ok_or_else(err)
}

fn partial(y: &str, m: Option<u32>, raw: &str) -> Result<String, DateError> {
    match m {
        Some(m) if (1..=12).contains(&m) => Ok(format!("{y}-{m:02}-??")),
        Some(_) => Err(DateError(raw.to_string())),
        None => Ok(format!("{y}-??-??")),
    }
}

/// Normalizes a free-form date to `YYYY-MM-DD`, or to `YYYY-MM-??` /
/// `YYYY-??-??` when the source omits the day or month.
pub fn normalize_date_with(raw: &str, convention: DateConvention) -> Result<String, DateError> {
    let s = raw.trim().to_lowercase();
    let s = s.trim_end_matches('.');
    let p = date_patterns();
    let num = |x: &str| x.parse::<u32>().ok();
    if let Some(c) = p[0].captures(s) {
        return full(&c[1], num(&c[2]).unwrap_or(0), &c[3], raw);
    }
    if let Some(c) = p[1].captures(s) {
        let (m, d) = match convention {
            DateConvention::MonthFirst => (&c[1], &c[2]),
            DateConvention::DayFirst => (&c[2], &c[1]),
        };
        return full(&c[3], num(m).unwrap_or(0), d, raw);
    }
    if let Some(c) = p[2].captures(s) {
        let m = month_number(&c[1]).ok_or_else(|| DateError(raw.to_string()))?;
        return full(&c[3], m, &c[2], raw);
    }
    if let Some(c) = p[3].captures(s) {
        let m = month_number(&c[2]).ok_or_else(|| DateError(raw.to_string()))?;
        return full(&c[3], m, &c[1], raw);
    }
    if let Some(c) = p[4].captures(s) {
        let m = month_number(&c[1]).ok_or_else(|| DateError(raw.to_string()))?;
        return partial(&c[2], Some(m), raw);
    }
    if let Some(c) = p[5].captures(s) {
        return partial(&c[2], num(&c[1]), raw);
    }
    if let Some(c) = p[6].captures(s) {
        return partial(&c[1], if &c[2] == "??" { None } else { num(&c[2]) }, raw);
    }
    if let Some(c) = p[7].captures(s) {
        return partial(&c[1], None, raw);
    }
    Err(DateError(raw.to_string()))
}

/// [`normalize_date_with`] under the month-first convention.
pub fn normalize_date(raw: &str) -> Result<String, DateError> {
    normalize_date_with(raw, DateConvention::MonthFirst)
}

/// Normalizes to a complete calendar date; partial dates are errors.
pub fn normalize_to_date(raw: &str, convention: DateConvention) -> Result<NaiveDate, DateError> {
    let s = normalize_date_with(raw, convention)?;
    NaiveDate::parse_from_str(&s, "%Y-%m-%d").map_err(|_| DateError(raw.to_string()))
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SingleStep,
    MultiStep,
    Topical,
    SequentialDocuments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrieverKind {
    #[serde(rename = "vector")]
    Vector,
    #[serde(rename = "regex")]
    Regex,
    #[serde(rename = "regex+vector")]
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverConfig {
    #[serde(rename = "type")]
    pub kind: RetrieverKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_template: Option<String>,
    /// Additional queries; results are merged before synthesis.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub queries: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<String>,
    pub prompt_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loop_over: Option<String>,
    /// Placeholder that receives each enumerated variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loop_variable: Option<String>,
    /// Attribute that receives the variant when the detail stage omits it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loop_attribute: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SynthesizerConfig {
    Single(StageConfig),
    Stages(Vec<StageConfig>),
}

impl SynthesizerConfig {
    pub fn stages(&self) -> &[StageConfig] {
        match self {
            SynthesizerConfig::Single(s) => std::slice::from_ref(s),
            SynthesizerConfig::Stages(v) => v,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollatorConfig {
    #[serde(default)]
    pub rules: Vec<CollationRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub doc_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_file: Option<String>,
}

impl TopicConfig {
    pub fn matches(&self, doc: &Document) -> bool {
        let by_type = doc
            .metadata
            .doc_type
            .as_deref()
            .is_some_and(|t| self.doc_types.iter().any(|d| canonicalize(d) == canonicalize(t)));
        let text = doc.text.to_lowercase();
        by_type || self.keywords.iter().any(|k| text.contains(&k.to_lowercase()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    pub retriever: RetrieverConfig,
    pub synthesizer: SynthesizerConfig,
    #[serde(default)]
    pub collator: CollatorConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub topics: Vec<TopicConfig>,
}

impl EntityConfig {
    /// The configured strategy, or the default for this entity.
    pub fn strategy(&self, canonical_name: &str) -> Strategy {
        if let Some(s) = self.strategy {
            return s;
        }
        if self.synthesizer.stages().len() >= 2 {
            Strategy::MultiStep
        } else if !self.topics.is_empty() {
            Strategy::Topical
        } else if matches!(canonical_name, "Staging" | "Surgery") {
            Strategy::SequentialDocuments
        } else {
            Strategy::SingleStep
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostProcessor {
    ValidateAgainstSchema,
    Iso8601DateNormalizer,
    ConvertUnits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_alignment_method")]
    pub alignment_method: String,
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default = "default_date_tolerance")]
    pub date_tolerance_days: u32,
}

fn default_alignment_method() -> String {
    "root_or_weighted".to_string()
}

fn default_date_tolerance() -> u32 {
    7
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            alignment_method: default_alignment_method(),
            metrics: vec!["precision".into(), "recall".into(), "f1".into()],
            date_tolerance_days: default_date_tolerance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "provider", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    Hash {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Http {
        endpoint: String,
        dimension: usize,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_dimension() -> usize {
    256
}

fn default_timeout() -> u64 {
    60
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hash {
            seed: 0,
            dimension: default_dimension(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionConfig {
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitConversion {
    pub from: String,
    pub to: String,
    pub factor: f64,
}

pub fn default_unit_conversions() -> Vec<UnitConversion> {
    [("g", "mg", 1000.0), ("Gy", "cGy", 100.0), ("cm", "mm", 10.0)]
        .into_iter()
        .map(|(from, to, factor)| UnitConversion {
            from: from.into(),
            to: to.into(),
            factor,
        })
        .collect()
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

fn default_chunk_size() -> usize {
    crate::corpus::DEFAULT_MAX_CHARS
}

fn default_prompt_budget() -> usize {
    12_000
}

fn is_default_chunk_size(v: &usize) -> bool {
    *v == default_chunk_size()
}

fn is_default_prompt_budget(v: &usize) -> bool {
    *v == default_prompt_budget()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline_name: String,
    pub entities: Vec<EntityConfig>,
    #[serde(default)]
    pub post_processors: Vec<PostProcessor>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Reference date for `today` in collation rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_date: Option<NaiveDate>,
    #[serde(default = "default_chunk_size", skip_serializing_if = "is_default_chunk_size")]
    pub chunk_size: usize,
    /// Maximum snippet characters per synthesis call.
    #[serde(default = "default_prompt_budget", skip_serializing_if = "is_default_prompt_budget")]
    pub prompt_budget: usize,
    #[serde(default, skip_serializing_if = "is_default")]
    pub date_convention: DateConvention,
    #[serde(default, skip_serializing_if = "is_default")]
    pub missing_dependency: MissingDependencyPolicy,
    #[serde(default, skip_serializing_if = "is_default")]
    pub generation: GenerationParams,
    #[serde(default, skip_serializing_if = "is_default")]
    pub embedding: EmbeddingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<CompletionConfig>,
    /// Prompt used to fill missing document metadata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata_prompt_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_conversions: Option<Vec<UnitConversion>>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed pipeline config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config names unregistered entity `{0}`")]
    UnknownEntity(String),
    #[error("entity `{0}` is configured twice")]
    DuplicateEntity(String),
    #[error("entity `{entity}`: {source}")]
    Rule {
        entity: String,
        #[source]
        source: CollationError,
    },
    #[error("entity `{entity}`: {reason}")]
    Invalid { entity: String, reason: String },
    #[error("entity `{entity}`: {source}")]
    Retrieval {
        entity: String,
        #[source]
        source: RetrievalError,
    },
    #[error("prompt `{file}`: {source}")]
    Prompt {
        file: String,
        #[source]
        source: PromptError,
    },
    #[error("reading {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

/// Parses and validates a pipeline configuration against a registry.
pub fn load_config(source: &str, registry: &SchemaRegistry) -> Result<PipelineConfig, ConfigError> {
    let config: PipelineConfig = serde_json::from_str(source)?;
    let mut seen = BTreeSet::new();
    for e in &config.entities {
        let spec = registry
            .get(&e.name)
            .ok_or_else(|| ConfigError::UnknownEntity(e.name.clone()))?;
        if !seen.insert(spec.name.clone()) {
            return Err(ConfigError::DuplicateEntity(spec.name.clone()));
        }
        let invalid = |reason: &str| ConfigError::Invalid {
            entity: e.name.clone(),
            reason: reason.to_string(),
        };
        CollatorChain::new(registry, &spec.name, &e.collator.rules).map_err(|source| ConfigError::Rule {
            entity: e.name.clone(),
            source,
        })?;
        let r = &e.retriever;
        if matches!(r.kind, RetrieverKind::Vector | RetrieverKind::Hybrid) && r.k.unwrap_or(0) == 0 {
            return Err(invalid("vector retrieval needs a positive `k`"));
        }
        if matches!(r.kind, RetrieverKind::Regex | RetrieverKind::Hybrid) && r.patterns.is_empty() {
            return Err(invalid("regex retrieval needs `patterns`"));
        }
        crate::retrieval::compile_patterns(&r.patterns).map_err(|source| ConfigError::Retrieval {
            entity: e.name.clone(),
            source,
        })?;
        let stages = e.synthesizer.stages();
        match e.strategy(&spec.name) {
            Strategy::MultiStep if stages.len() < 2 => return Err(invalid("multi-step strategy needs two stages")),
            Strategy::Topical if e.topics.is_empty() => return Err(invalid("topical strategy needs `topics`")),
            _ => {}
        }
        if stages.is_empty() || stages.len() > 2 {
            return Err(invalid("synthesizer must have one or two stages"));
        }
        if let Some(a) = stages.iter().filter_map(|s| s.loop_attribute.as_deref()).next() {
            if spec.resolve_attribute(a).is_none() {
                return Err(invalid(&format!("unknown loop attribute `{a}`")));
            }
        }
    }
    if config.chunk_size == 0 || config.prompt_budget == 0 {
        return Err(ConfigError::Invalid {
            entity: String::new(),
            reason: "chunk_size and prompt_budget must be positive".into(),
        });
    }
    Ok(config)
}

impl PipelineConfig {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialization");
        s.push('\n');
        s
    }

    fn date_normalization(&self) -> bool {
        self.post_processors.contains(&PostProcessor::Iso8601DateNormalizer)
    }
}

// ---------------------------------------------------------------------------
// Runtime
// ---------------------------------------------------------------------------

struct EntityPlan {
    config: EntityConfig,
    spec: EntityTypeSpec,
    chain: CollatorChain,
    strategy: Strategy,
    stages: Vec<PromptTemplate>,
    /// Topic name to its prompt, when a topic overrides the entity stages.
    topic_prompts: BTreeMap<String, PromptTemplate>,
    loop_variable: Option<String>,
    loop_attribute: String,
}

/// A validated configuration with its prompts loaded and rules bound.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub registry: SchemaRegistry,
    plans: Vec<EntityPlan>,
    metadata_prompt: Option<PromptTemplate>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("pipeline_name", &self.config.pipeline_name)
            .field("entities", &self.plans.iter().map(|p| &p.spec.name).collect::<Vec<_>>())
            .finish()
    }
}

impl Pipeline {
    /// Loads a config file; prompt paths resolve against its directory.
    pub fn load(path: &Path, registry: SchemaRegistry) -> Result<Self, ConfigError> {
        let source = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let config = load_config(&source, &registry)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(config, registry, |file| {
            let p = base.join(file);
            fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))
        })
    }

    /// Builds a pipeline, reading prompt sources through `read_prompt`.
    pub fn new(
        config: PipelineConfig,
        registry: SchemaRegistry,
        read_prompt: impl Fn(&str) -> Result<String, String>,
    ) -> Result<Self, ConfigError> {
        let load = |file: &str, spec: Option<&EntityTypeSpec>| -> Result<PromptTemplate, ConfigError> {
            let wrap = |source| ConfigError::Prompt {
                file: file.to_string(),
                source,
            };
            let text = read_prompt(file).map_err(|reason| {
                wrap(PromptError::Io {
                    path: file.to_string(),
                    reason,
                })
            })?;
            let stem = Path::new(file).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut t = PromptTemplate::parse(&stem, &text).map_err(wrap)?;
            if let Some(spec) = spec {
                t.bind_targets(spec).map_err(wrap)?;
            }
            Ok(t)
        };

        let mut plans = Vec::new();
        for e in &config.entities {
            let spec = registry.get(&e.name).ok_or_else(|| ConfigError::UnknownEntity(e.name.clone()))?.clone();
            let chain = CollatorChain::new(&registry, &spec.name, &e.collator.rules).map_err(|source| {
                ConfigError::Rule {
                    entity: e.name.clone(),
                    source,
                }
            })?;
            let stage_cfgs = e.synthesizer.stages();
            let mut stages = Vec::new();
            for (i, s) in stage_cfgs.iter().enumerate() {
                // The enumerate stage of a two-stage pipeline returns a list,
                // not attributes.
                let bind = stage_cfgs.len() == 1 || i == 1;
                stages.push(load(&s.prompt_file, bind.then_some(&spec))?);
            }
            let mut topic_prompts = BTreeMap::new();
            for t in &e.topics {
                if let Some(f) = &t.prompt_file {
                    topic_prompts.insert(t.name.clone(), load(f, Some(&spec))?);
                }
            }
            let detail_cfg = stage_cfgs.last().expect("validated non-empty");
            let loop_attribute = detail_cfg
                .loop_attribute
                .as_deref()
                .and_then(|a| spec.resolve_attribute(a))
                .map_or_else(|| spec.driver().to_string(), |a| a.name.clone());
            let loop_variable = if stages.len() == 2 {
                let detail = &stages[1];
                let var = match &detail_cfg.loop_variable {
                    Some(v) => Some(v.clone()),
                    None => {
                        let free: Vec<&String> = detail
                            .placeholders
                            .iter()
                            .filter(|p| ![SNIPPET, PATIENT_ID, ENTITY].contains(&p.as_str()))
                            .collect();
                        (free.len() == 1).then(|| free[0].clone())
                    }
                };
                Some(var.ok_or_else(|| ConfigError::Invalid {
                    entity: e.name.clone(),
                    reason: format!("cannot determine the loop placeholder of `{}`", detail.id),
                })?)
            } else {
                None
            };
            plans.push(EntityPlan {
                strategy: e.strategy(&spec.name),
                config: e.clone(),
                spec,
                chain,
                stages,
                topic_prompts,
                loop_variable,
                loop_attribute,
            });
        }
        let metadata_prompt = config.metadata_prompt_file.as_deref().map(|f| load(f, None)).transpose()?;
        Ok(Pipeline {
            config,
            registry,
            plans,
            metadata_prompt,
        })
    }

    /// Configured entities in dependency order.
    pub fn entity_order(&self) -> Result<Vec<String>, CycleError> {
        let configured: BTreeSet<&str> = self.plans.iter().map(|p| p.spec.name.as_str()).collect();
        Ok(self
            .registry
            .dependency_graph()
            .topo_order()?
            .into_iter()
            .filter(|e| configured.contains(e.as_str()))
            .collect())
    }

    pub fn strategy(&self, entity: &str) -> Option<Strategy> {
        self.plan(entity).map(|p| p.strategy)
    }

    fn plan(&self, entity: &str) -> Option<&EntityPlan> {
        let name = self.registry.get(entity)?.name.as_str();
        self.plans.iter().find(|p| p.spec.name == name)
    }

    /// Every template the pipeline can render, by template id.
    pub fn templates(&self) -> Vec<&PromptTemplate> {
        self.plans
            .iter()
            .flat_map(|p| p.stages.iter().chain(p.topic_prompts.values()))
            .chain(self.metadata_prompt.as_ref())
            .collect()
    }

    fn params(&self, stage: Option<&StageConfig>) -> GenerationParams {
        let mut p = self.config.generation.clone();
        if let Some(m) = stage.and_then(|s| s.max_tokens) {
            p.max_tokens = Some(m);
        }
        p
    }
}

/// Providers used by a run.
#[derive(Clone, Copy)]
pub struct Clients<'a> {
    pub synthesizer: &'a dyn SynthesizerClient,
    pub embedder: &'a dyn EmbeddingProvider,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown or unconfigured entity `{0}`")]
    UnknownEntity(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Collation(#[from] CollationError),
    #[error(transparent)]
    Cycle(#[from] CycleError),
    #[error("query template: missing binding `{0}`")]
    QueryBinding(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EntityRun {
    pub entity: String,
    pub strategy: Option<Strategy>,
    pub retrieved_chunks: usize,
    pub synthesis_calls: usize,
    pub instances: Vec<EntityInstance>,
    pub warnings: Vec<String>,
    pub collation: Vec<AuditEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A group of chunks sent together in one synthesis call.
struct ChunkGroup<'a> {
    topic: Option<String>,
    chunks: Vec<&'a Chunk>,
}

fn pack_groups<'a>(chunks: Vec<&'a Chunk>, budget: usize, topic: Option<&str>) -> Vec<ChunkGroup<'a>> {
    let mut groups: Vec<ChunkGroup<'a>> = Vec::new();
    let mut size = 0;
    for c in chunks {
        let len = c.len_chars();
        match groups.last_mut() {
            Some(g) if size + len <= budget => {
                g.chunks.push(c);
                size += len;
            }
            _ => {
                groups.push(ChunkGroup {
                    topic: topic.map(str::to_string),
                    chunks: vec![c],
                });
                size = len;
            }
        }
    }
    groups
}

impl Pipeline {
    fn queries(&self, plan: &EntityPlan, patient_id: &str) -> Result<Vec<Query>, PipelineError> {
        let r = &plan.config.retriever;
        let Some(k) = r.k else { return Ok(Vec::new()) };
        let bindings = BTreeMap::from([
            (PATIENT_ID.to_string(), patient_id.to_string()),
            (ENTITY.to_string(), plan.spec.name.clone()),
        ]);
        let mut texts: Vec<String> = r.query_template.iter().chain(&r.queries).cloned().collect();
        if texts.is_empty() {
            texts.push(format!("{} {}", plan.spec.name, plan.spec.driver().replace('_', " ")));
        }
        texts
            .iter()
            .map(|t| {
                render_text(t, &bindings)
                    .map(|text| Query { text, top_k: k })
                    .map_err(PipelineError::QueryBinding)
            })
            .collect()
    }

    /// Retrieval restricted to the chunks of `docs` (all when `None`).
    fn retrieve<'c>(
        &self,
        plan: &EntityPlan,
        corpus: &'c PatientCorpus,
        index: &ChunkIndex,
        embedder: &dyn EmbeddingProvider,
        docs: Option<&BTreeSet<&str>>,
    ) -> Result<Vec<&'c Chunk>, PipelineError> {
        let keep = |d: &str| docs.is_none_or(|set| set.contains(d));
        let sub_index = index.filtered(|d, _| keep(d));
        let sub_chunks: Vec<Chunk> = corpus.chunks.iter().filter(|c| keep(&c.document_id)).cloned().collect();
        let r = &plan.config.retriever;
        let queries = match r.kind {
            RetrieverKind::Regex => Vec::new(),
            _ => self.queries(plan, &corpus.patient_id)?,
        };
        let patterns = match r.kind {
            RetrieverKind::Vector => Vec::new(),
            _ => r.patterns.clone(),
        };
        let hits = if queries.is_empty() {
            regex_retrieve(&sub_chunks, &patterns)?
        } else {
            hybrid_retrieve(&sub_index, embedder, &sub_chunks, &queries, &patterns)?
        };
        let lookup: BTreeMap<(&str, usize), &'c Chunk> =
            corpus.chunks.iter().map(|c| ((c.document_id.as_str(), c.chunk_index), c)).collect();
        Ok(hits.iter().filter_map(|h| lookup.get(&h.key()).copied()).collect())
    }

    fn ordered_documents<'c>(&self, corpus: &'c PatientCorpus) -> Vec<&'c Document> {
        let mut docs: Vec<&Document> = corpus.documents.iter().collect();
        docs.sort_by(|a, b| {
            let key = |d: &Document| (d.metadata.encounter_date.is_none(), d.metadata.encounter_date);
            key(a).cmp(&key(b)).then_with(|| a.document_id.cmp(&b.document_id))
        });
        docs
    }

    /// Runs one entity end to end over a patient's corpus.
    pub fn run_entity_pipeline(
        &self,
        entity: &str,
        corpus: &PatientCorpus,
        index: &ChunkIndex,
        clients: Clients<'_>,
        dependencies: &BTreeMap<String, Vec<EntityInstance>>,
        today: NaiveDate,
    ) -> Result<EntityRun, PipelineError> {
        let plan = self.plan(entity).ok_or_else(|| PipelineError::UnknownEntity(entity.to_string()))?;
        let mut run = EntityRun {
            entity: plan.spec.name.clone(),
            strategy: Some(plan.strategy),
            ..Default::default()
        };
        let dates = corpus.document_dates();
        let budget = self.config.prompt_budget;

        let groups: Vec<ChunkGroup> = match plan.strategy {
            Strategy::SingleStep | Strategy::MultiStep => {
                let chunks = self.retrieve(plan, corpus, index, clients.embedder, None)?;
                run.retrieved_chunks = chunks.len();
                pack_groups(order_chunks(&chunks, &dates), budget, None)
            }
            Strategy::SequentialDocuments => {
                let mut groups = Vec::new();
                for doc in self.ordered_documents(corpus) {
                    let only = BTreeSet::from([doc.document_id.as_str()]);
                    let chunks = self.retrieve(plan, corpus, index, clients.embedder, Some(&only))?;
                    run.retrieved_chunks += chunks.len();
                    groups.extend(pack_groups(order_chunks(&chunks, &dates), budget, None));
                }
                groups
            }
            Strategy::Topical => {
                let mut members: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
                for doc in &corpus.documents {
                    let mut assigned = false;
                    for t in &plan.config.topics {
                        if t.matches(doc) {
                            members.entry(t.name.clone()).or_default().insert(&doc.document_id);
                            assigned = true;
                        }
                    }
                    if !assigned {
                        members.entry(GENERAL_TOPIC.to_string()).or_default().insert(&doc.document_id);
                    }
                }
                let mut groups = Vec::new();
                for (topic, docs) in &members {
                    let chunks = self.retrieve(plan, corpus, index, clients.embedder, Some(docs))?;
                    run.retrieved_chunks += chunks.len();
                    groups.extend(pack_groups(order_chunks(&chunks, &dates), budget, Some(topic)));
                }
                groups
            }
        };

        let normalizer = |s: &str| normalize_date_with(s, self.config.date_convention).ok();
        let opts = ParseOptions {
            date_normalizer: self.config.date_normalization().then_some(&normalizer as &dyn Fn(&str) -> Option<String>),
        };
        let mut extractions: Vec<PartialExtraction> = Vec::new();
        for group in &groups {
            let mut bindings = BTreeMap::from([
                (SNIPPET.to_string(), concat_chunks(&group.chunks, &dates)),
                (PATIENT_ID.to_string(), corpus.patient_id.clone()),
                (ENTITY.to_string(), plan.spec.name.clone()),
            ]);
            let topic_prompt = group.topic.as_ref().and_then(|t| plan.topic_prompts.get(t));
            let found = match (topic_prompt, plan.stages.as_slice()) {
                (Some(t), _) | (None, [t]) => {
                    let stage_cfg = plan.config.synthesizer.stages().first();
                    bindings.retain(|k, _| t.placeholders.contains(k));
                    synthesize_with_reflection(clients.synthesizer, t, &bindings, &plan.spec, &self.params(stage_cfg), opts)
                        .map(|o| {
                            run.synthesis_calls += o.calls as usize;
                            run.warnings.extend(o.warnings);
                            o.extractions
                        })
                }
                (None, [stage1, stage2]) => enumerate_then_detail(
                    clients.synthesizer,
                    stage1,
                    stage2,
                    plan.loop_variable.as_deref().expect("two-stage plan has a loop variable"),
                    &plan.loop_attribute,
                    &bindings,
                    &plan.spec,
                    &self.params(plan.config.synthesizer.stages().last()),
                    opts,
                )
                .map(|o| {
                    run.synthesis_calls += 1 + o.variants.len();
                    run.warnings.extend(o.warnings);
                    o.extractions
                }),
                _ => unreachable!("plans have one or two stages"),
            };
            match found {
                Ok(list) => {
                    for mut e in list {
                        attach_provenance(&mut e, &group.chunks);
                        extractions.push(e);
                    }
                }
                Err(e) => run.warnings.push(format!("{}: synthesis skipped for a chunk group: {e}", plan.spec.name)),
            }
        }

        let driver = plan.spec.driver();
        let mut inputs = Vec::new();
        for e in extractions {
            if e.is_empty() {
                continue;
            }
            if e.attributes.get(driver).is_none_or(Option::is_none) {
                run.warnings.push(format!("{}: dropped extraction without `{driver}`", plan.spec.name));
                continue;
            }
            inputs.push(e.into_instance());
        }

        let ctx = CollationContext {
            today,
            dependencies: dependencies.clone(),
            document_dates: dates,
            missing_dependency: self.config.missing_dependency,
            single_lineage: plan.strategy == Strategy::SequentialDocuments,
        };
        let out = collate(&plan.chain, &ctx, inputs)?;
        run.instances = out.instances;
        run.collation = out.audit;
        Ok(run)
    }

    /// Fills missing document metadata through the metadata prompt.
    pub fn prepare_corpus(&self, corpus: &mut PatientCorpus, client: &dyn SynthesizerClient) -> Vec<String> {
        let Some(template) = &self.metadata_prompt else {
            return Vec::new();
        };
        let mut warnings = Vec::new();
        for doc in &mut corpus.documents {
            let out = extract_document_metadata(doc, client, template, &self.config.generation);
            doc.metadata = out.metadata;
            warnings.extend(out.warnings);
        }
        warnings
    }

    /// Runs every configured entity in dependency order and applies the
    /// post-processors to the assembled record.
    pub fn run_patient(
        &self,
        corpus: &PatientCorpus,
        clients: Clients<'_>,
        today: NaiveDate,
    ) -> Result<PatientRun, PipelineError> {
        let order = self.entity_order()?;
        let mut corpus = corpus.clone();
        let mut audit = PatientAudit {
            patient_id: corpus.patient_id.clone(),
            pipeline_name: self.config.pipeline_name.clone(),
            run_date: today,
            entity_order: order.clone(),
            metadata_warnings: self.prepare_corpus(&mut corpus, clients.synthesizer),
            entities: Vec::new(),
            post_processing: Vec::new(),
        };
        let index = build_index(&corpus, clients.embedder)?;
        let mut done: BTreeMap<String, Vec<EntityInstance>> = BTreeMap::new();
        for entity in &order {
            let plan = self.plan(entity).expect("ordered entities are configured");
            let deps: BTreeMap<String, Vec<EntityInstance>> = plan
                .spec
                .depends_on
                .iter()
                .filter_map(|d| done.get(d).map(|v| (d.clone(), v.clone())))
                .collect();
            match self.run_entity_pipeline(entity, &corpus, &index, clients, &deps, today) {
                Ok(run) => {
                    done.insert(entity.clone(), run.instances.clone());
                    audit.entities.push(run);
                }
                Err(e) => audit.entities.push(EntityRun {
                    entity: entity.clone(),
                    strategy: Some(plan.strategy),
                    error: Some(e.to_string()),
                    ..Default::default()
                }),
            }
        }

        let mut record = PatientRecord::new(corpus.patient_id.clone());
        for entity in &order {
            record.instances.extend(done.remove(entity).unwrap_or_default());
        }
        let conversions = self.config.unit_conversions.clone().unwrap_or_else(default_unit_conversions);
        for p in &self.config.post_processors {
            let notes = match p {
                PostProcessor::ValidateAgainstSchema => validate_record(&self.registry, &mut record),
                // Date strings are normalized while model output is parsed,
                // so typed dates here are already ISO-8601.
                PostProcessor::Iso8601DateNormalizer => Vec::new(),
                PostProcessor::ConvertUnits => convert_units(&self.registry, &mut record, &conversions),
            };
            audit.post_processing.extend(notes);
        }
        merge_duplicate_ids(&mut record);
        Ok(PatientRun { record, audit })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientAudit {
    pub patient_id: String,
    pub pipeline_name: String,
    pub run_date: NaiveDate,
    pub entity_order: Vec<String>,
    pub metadata_warnings: Vec<String>,
    pub entities: Vec<EntityRun>,
    pub post_processing: Vec<String>,
}

impl PatientAudit {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("audit serialization");
        s.push('\n');
        s
    }

    pub fn failed_entities(&self) -> impl Iterator<Item = &EntityRun> {
        self.entities.iter().filter(|e| e.error.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRun {
    pub record: PatientRecord,
    pub audit: PatientAudit,
}

/// Drops instances that fail schema validation.
pub fn validate_record(registry: &SchemaRegistry, record: &mut PatientRecord) -> Vec<String> {
    let mut notes = Vec::new();
    record.instances.retain(|inst| match crate::schema::validate_instance(registry, inst.clone()) {
        Ok(_) => true,
        Err(e) => {
            notes.push(format!("validate_against_schema: dropped {}: {e}", inst.instance_id));
            false
        }
    });
    notes
}

/// Numeric attribute paired with a unit attribute (`x_unit`/`x_units`
/// next to `x`, `x_value` or `x_quantity`).
fn unit_pairs(spec: &EntityTypeSpec) -> Vec<(String, String)> {
    let numeric = |n: &str| {
        spec.attribute(n)
            .is_some_and(|a| matches!(a.kind(), AttributeKind::Decimal | AttributeKind::Integer))
    };
    spec.attributes
        .iter()
        .filter(|a| a.kind() == AttributeKind::Text)
        .filter_map(|a| {
            let base = a.name.strip_suffix("_units").or_else(|| a.name.strip_suffix("_unit"))?;
            [base.to_string(), format!("{base}_value"), format!("{base}_quantity")]
                .into_iter()
                .find(|n| numeric(n))
                .map(|n| (n, a.name.clone()))
        })
        .collect()
}

/// Rewrites value/unit pairs into the target unit of each conversion.
pub fn convert_units(registry: &SchemaRegistry, record: &mut PatientRecord, table: &[UnitConversion]) -> Vec<String> {
    let mut notes = Vec::new();
    for inst in &mut record.instances {
        let Some(spec) = registry.get(&inst.entity_type) else { continue };
        let mut changed = false;
        for (value_attr, unit_attr) in unit_pairs(spec) {
            let (Some(v), Some(TypedValue::Text(unit))) = (inst.value(&value_attr), inst.value(&unit_attr)) else {
                continue;
            };
            let Some(conv) = table.iter().find(|c| c.from.to_lowercase() == unit.trim().to_lowercase()) else {
                continue;
            };
            let scaled = v.as_f64().unwrap_or(0.0) * conv.factor;
            let new_value = match v {
                TypedValue::Integer(_) if scaled.fract() == 0.0 && scaled.abs() < i64::MAX as f64 => {
                    TypedValue::Integer(scaled as i64)
                }
                TypedValue::Integer(_) => {
                    notes.push(format!(
                        "convert_units: {}.{value_attr} not converted, {scaled} is not an integer",
                        inst.instance_id
                    ));
                    continue;
                }
                _ => TypedValue::Decimal(scaled),
            };
            notes.push(format!(
                "convert_units: {}.{value_attr} {v} {unit} -> {new_value} {}",
                inst.instance_id, conv.to
            ));
            inst.attributes.insert(value_attr, Some(new_value));
            inst.attributes.insert(unit_attr, Some(TypedValue::Text(conv.to.clone())));
            changed = true;
        }
        if changed {
            inst.refresh_id();
        }
    }
    notes
}

/// Folds instances whose content ids collide, keeping the first position.
fn merge_duplicate_ids(record: &mut PatientRecord) {
    let mut out: Vec<EntityInstance> = Vec::with_capacity(record.instances.len());
    for inst in record.instances.drain(..) {
        match out.iter_mut().find(|o| o.instance_id == inst.instance_id) {
            Some(existing) => {
                existing.provenance.extend(inst.provenance);
                existing.provenance.sort();
                existing.provenance.dedup();
            }
            None => out.push(inst),
        }
    }
    record.instances = out;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn date_formats() {
        for (raw, want) in [
            ("02/11/2019", "2019-02-11"),
            ("2/3/2019", "2019-02-03"),
            ("2019-02-11", "2019-02-11"),
            ("February 11, 2019", "2019-02-11"),
            ("Feb 11 2019", "2019-02-11"),
            ("11 February 2019", "2019-02-11"),
            ("Feb 2019", "2019-02-??"),
            ("February, 2019", "2019-02-??"),
            ("2019", "2019-??-??"),
            ("2019-02-??", "2019-02-??"),
            ("Sept. 4, 2018", "2018-09-04"),
        ] {
            assert_eq!(normalize_date(raw).as_deref(), Ok(want), "{raw}");
        }
        assert_eq!(normalize_date_with("02/11/2019", DateConvention::DayFirst).as_deref(), Ok("2019-11-02"));
        for bad in ["yesterday", "13/01/2019", "2019-02-30", "Foo 3, 2019", ""] {
            assert!(normalize_date(bad).is_err(), "{bad}");
        }
        assert!(normalize_to_date("Feb 2019", DateConvention::MonthFirst).is_err());
    }

    #[test]
    fn loads_published_config() {
        let reg = SchemaRegistry::bundled();
        let cfg = load_config(include_str!("../assets/reference_pipeline.json"), &reg).unwrap();
        assert_eq!(
            cfg.post_processors,
            vec![
                PostProcessor::ValidateAgainstSchema,
                PostProcessor::Iso8601DateNormalizer,
                PostProcessor::ConvertUnits
            ]
        );
        let bio = &cfg.entities[0];
        assert_eq!(bio.retriever.kind, RetrieverKind::Vector);
        assert_eq!(bio.retriever.k, Some(12));
        assert_eq!(bio.strategy("Biomarker"), Strategy::SingleStep);
        let med = &cfg.entities[1];
        assert_eq!(med.retriever.kind, RetrieverKind::Hybrid);
        assert_eq!(med.synthesizer.stages().len(), 2);
        assert_eq!(med.collator.rules.len(), 3);
        assert_eq!(med.strategy("Medication"), Strategy::MultiStep);
        assert_eq!(cfg.evaluation.date_tolerance_days, 7);

        let again = load_config(&cfg.to_json(), &reg).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let reg = SchemaRegistry::bundled();
        let base = include_str!("../assets/reference_pipeline.json");
        let foo = base.replace("\"name\": \"Biomarker\"", "\"name\": \"Foo\"");
        assert!(matches!(load_config(&foo, &reg), Err(ConfigError::UnknownEntity(e)) if e == "Foo"));
        let rule = base.replace("prefer_latest: result_date", "frobnicate: x");
        assert!(matches!(load_config(&rule, &reg), Err(ConfigError::Json(_))));
        let pp = base.replace("\"convert_units\"", "\"shrink\"");
        assert!(load_config(&pp, &reg).is_err());
        let extra = base.replace("\"pipeline_name\"", "\"surprise\": 1, \"pipeline_name\"");
        assert!(load_config(&extra, &reg).is_err());
        let attr = base.replace("prefer_latest: result_date", "prefer_latest: nope");
        assert!(matches!(load_config(&attr, &reg), Err(ConfigError::Rule { .. })));
    }

    #[test]
    fn unit_pairs_follow_naming() {
        let reg = SchemaRegistry::bundled();
        let pairs = unit_pairs(reg.get("Radiation").unwrap());
        assert_eq!(pairs, vec![("total_dose_delivered_value".into(), "total_dose_delivered_unit".into())]);
        let bio = unit_pairs(reg.get("Biomarker").unwrap());
        assert_eq!(bio, vec![("value_quantity".into(), "value_unit".into())]);
    }

    #[test]
    fn converts_units() {
        let reg = SchemaRegistry::bundled();
        let mut attrs = crate::schema::AttributeMap::new();
        attrs.insert("modality".into(), Some(TypedValue::Text("EBRT".into())));
        attrs.insert("total_dose_delivered_value".into(), Some(TypedValue::Decimal(30.0)));
        attrs.insert("total_dose_delivered_unit".into(), Some(TypedValue::Text("Gy".into())));
        let mut record = PatientRecord::new("p");
        record.instances.push(EntityInstance::new("Radiation", attrs, vec![]));
        let notes = convert_units(&reg, &mut record, &default_unit_conversions());
        assert_eq!(notes.len(), 1);
        let inst = &record.instances[0];
        assert_eq!(inst.value("total_dose_delivered_value"), Some(&TypedValue::Decimal(3000.0)));
        assert_eq!(inst.value("total_dose_delivered_unit"), Some(&TypedValue::Text("cGy".into())));
        assert!(convert_units(&reg, &mut record, &default_unit_conversions()).is_empty());
    }
}
