//! Prompt templates, completion clients and schema-checked parsing of
//! model output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::hash::Hasher;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use chrono::NaiveDate;
use fnv::FnvHasher;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::corpus::Chunk;
use crate::schema::{
    self, canonicalize, AttributeKind, AttributeMap, EntityInstance, EntityTypeSpec, Provenance, SchemaRegistry,
    TypedValue, ValidationError,
};

/// Appended as a final user turn on the single retry.
pub const REFLECTION_SUFFIX: &str = "Some required fields were missing or the answer could not be parsed. \
Re-read the context above and answer again with a single JSON object using only the requested keys. \
Use null for values that are truly absent.";

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn parse_header(line: &str) -> Option<Role> {
        match line.trim_end() {
            "system:" => Some(Role::System),
            "user:" => Some(Role::User),
            "assistant:" => Some(Role::Assistant),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("template `{template}` has no role sections")]
    Empty { template: String },
    #[error("template `{template}` line {line}: text before the first role header")]
    Preamble { template: String, line: usize },
    #[error("template `{template}`: unknown directive `{directive}`")]
    Directive { template: String, directive: String },
    #[error("template `{template}`: missing binding for `{{{{{placeholder}}}}}`")]
    MissingBinding { template: String, placeholder: String },
    #[error("template `{template}`: binding `{placeholder}` has no placeholder")]
    UnknownBinding { template: String, placeholder: String },
    #[error("template `{template}`: target attribute `{attribute}` is not on `{entity}`")]
    UnknownTarget {
        template: String,
        entity: String,
        attribute: String,
    },
    #[error("reading prompt {path}: {reason}")]
    Io { path: String, reason: String },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").unwrap())
}

/// Names of the `{{NAME}}` placeholders in `text`.
pub fn placeholders(text: &str) -> BTreeSet<String> {
    placeholder_re()
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

/// Substitutes placeholders in one pass; bound values are never re-expanded.
pub fn render_text(text: &str, bindings: &BTreeMap<String, String>) -> Result<String, String> {
    let mut missing = None;
    let out = placeholder_re().replace_all(text, |c: &regex::Captures| match bindings.get(&c[1]) {
        Some(v) => v.clone(),
        None => {
            missing.get_or_insert_with(|| c[1].to_string());
            String::new()
        }
    });
    match missing {
        Some(m) => Err(m),
        None => Ok(out.into_owned()),
    }
}

/// A role-sectioned prompt. Source format:
///
/// ```text
/// @id: biomarker_extract
/// @targets: biomarker_tested, interpretation
/// @required: biomarker_tested
/// system:
/// You extract biomarker results.
/// user:
/// {{SNIPPET}}
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub id: String,
    pub messages: Vec<Message>,
    pub target_attributes: Vec<String>,
    /// Attributes whose absence triggers the reflection retry; the entity
    /// driver when unset.
    pub required: Option<Vec<String>>,
    pub placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn parse(default_id: &str, source: &str) -> Result<Self, PromptError> {
        let mut id = default_id.to_string();
        let mut targets = Vec::new();
        let mut required = None;
        let mut messages: Vec<Message> = Vec::new();
        let list = |v: &str| -> Vec<String> {
            v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
        };
        for (n, line) in source.lines().enumerate() {
            if let Some(role) = Role::parse_header(line) {
                messages.push(Message {
                    role,
                    content: String::new(),
                });
                continue;
            }
            match messages.last_mut() {
                Some(m) => {
                    if !m.content.is_empty() || !line.is_empty() {
                        if !m.content.is_empty() {
                            m.content.push('\n');
                        }
                        m.content.push_str(line);
                    }
                }
                None => {
                    let t = line.trim();
                    if t.is_empty() || t.starts_with('#') {
                        continue;
                    }
                    let Some((key, value)) = t.strip_prefix('@').and_then(|d| d.split_once(':')) else {
                        return Err(PromptError::Preamble {
                            template: id,
                            line: n + 1,
                        });
                    };
                    match key.trim() {
                        "id" => id = value.trim().to_string(),
                        "targets" => targets = list(value),
                        "required" => required = Some(list(value)),
                        other => {
                            return Err(PromptError::Directive {
                                template: id,
                                directive: other.to_string(),
                            })
                        }
                    }
                }
            }
        }
        if messages.is_empty() {
            return Err(PromptError::Empty { template: id });
        }
        for m in &mut messages {
            let trimmed = m.content.trim_end_matches('\n').len();
            m.content.truncate(trimmed);
        }
        let placeholders = messages.iter().flat_map(|m| placeholders(&m.content)).collect();
        Ok(PromptTemplate {
            id,
            messages,
            target_attributes: targets,
            required,
            placeholders,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let source = fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&stem, &source)
    }

    /// Resolves target names (and aliases) against an entity, defaulting to
    /// all of its attributes.
    pub fn bind_targets(&mut self, spec: &EntityTypeSpec) -> Result<(), PromptError> {
        let resolve = |names: &[String]| -> Result<Vec<String>, PromptError> {
            names
                .iter()
                .map(|a| {
                    spec.resolve_attribute(a).map(|s| s.name.clone()).ok_or_else(|| PromptError::UnknownTarget {
                        template: self.id.clone(),
                        entity: spec.name.clone(),
                        attribute: a.clone(),
                    })
                })
                .collect()
        };
        self.target_attributes = if self.target_attributes.is_empty() {
            spec.attributes.iter().map(|a| a.name.clone()).collect()
        } else {
            resolve(&self.target_attributes)?
        };
        if let Some(req) = &self.required {
            self.required = Some(resolve(req)?);
        }
        Ok(())
    }

    /// Renders with bindings that must match the placeholders exactly.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<RenderedPrompt, PromptError> {
        if let Some(extra) = bindings.keys().find(|k| !self.placeholders.contains(*k)) {
            return Err(PromptError::UnknownBinding {
                template: self.id.clone(),
                placeholder: extra.clone(),
            });
        }
        let messages = self
            .messages
            .iter()
            .map(|m| {
                render_text(&m.content, bindings)
                    .map(|content| Message { role: m.role, content })
                    .map_err(|placeholder| PromptError::MissingBinding {
                        template: self.id.clone(),
                        placeholder,
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(RenderedPrompt {
            template_id: self.id.clone(),
            messages,
            fingerprint: fingerprint(bindings),
            attempt: 0,
        })
    }

    /// Renders with whichever of `available` the template uses.
    pub fn render_from(&self, available: &BTreeMap<String, String>) -> Result<RenderedPrompt, PromptError> {
        let used = available
            .iter()
            .filter(|(k, _)| self.placeholders.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        self.render(&used)
    }

    fn required_for(&self, spec: &EntityTypeSpec) -> Vec<String> {
        self.required.clone().unwrap_or_else(|| vec![spec.driver().to_string()])
    }
}

/// Strict rendering entry point.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
) -> Result<RenderedPrompt, PromptError> {
    template.render(bindings)
}

/// 64-bit FNV-1a digest of the bindings in key order.
pub fn fingerprint(bindings: &BTreeMap<String, String>) -> u64 {
    let mut h = FnvHasher::default();
    for (k, v) in bindings {
        h.write(k.as_bytes());
        h.write_u8(0);
        h.write(v.as_bytes());
        h.write_u8(0);
    }
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub messages: Vec<Message>,
    pub fingerprint: u64,
    /// 0 for the first call, 1 for the reflection retry.
    pub attempt: u32,
}

impl RenderedPrompt {
    pub fn fingerprint_hex(&self) -> String {
        format!("{:016x}", self.fingerprint)
    }

    pub fn with_reflection(&self) -> RenderedPrompt {
        let mut retry = self.clone();
        retry.messages.push(Message {
            role: Role::User,
            content: REFLECTION_SUFFIX.to_string(),
        });
        retry.attempt = 1;
        retry
    }
}

// ---------------------------------------------------------------------------
// Clients
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

fn default_top_p() -> f64 {
    0.1
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.0,
            top_p: default_top_p(),
            max_tokens: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("no mock response for template `{template_id}` fingerprint {fingerprint}")]
    UnknownFixture { template_id: String, fingerprint: String },
    #[error("completion transport error: {0}")]
    Transport(String),
}

/// Turns a rendered prompt into raw model text. Implementations must be
/// safe to call concurrently.
pub trait SynthesizerClient: Send + Sync {
    fn complete(&self, prompt: &RenderedPrompt, params: &GenerationParams) -> Result<String, ClientError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownFixturePolicy {
    #[default]
    Error,
    EmptyObject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum FixtureResponses {
    One(String),
    Attempts(Vec<String>),
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    #[serde(default)]
    unknown: UnknownFixturePolicy,
    #[serde(default)]
    responses: BTreeMap<String, BTreeMap<String, FixtureResponses>>,
}

/// A call seen by the mock, kept for inspection and fixture authoring.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CallRecord {
    pub template_id: String,
    pub fingerprint: String,
    pub attempt: u32,
    pub messages: Vec<Message>,
    pub matched: bool,
}

/// Deterministic client answering from a fixture table keyed by
/// `(template_id, fingerprint)`, with one entry per attempt.
#[derive(Debug, Default)]
pub struct MockSynthesizer {
    fixtures: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub unknown: UnknownFixturePolicy,
    calls: AtomicUsize,
    log: Mutex<Vec<CallRecord>>,
}

impl MockSynthesizer {
    pub fn new(unknown: UnknownFixturePolicy) -> Self {
        MockSynthesizer {
            unknown,
            ..Default::default()
        }
    }

    pub fn from_json(source: &str) -> Result<Self, serde_json::Error> {
        let file: FixtureFile = serde_json::from_str(source)?;
        let mut mock = MockSynthesizer::new(file.unknown);
        for (template, entries) in file.responses {
            for (fp, responses) in entries {
                let list = match responses {
                    FixtureResponses::One(s) => vec![s],
                    FixtureResponses::Attempts(v) => v,
                };
                mock.fixtures.entry(template.clone()).or_default().insert(fp.to_ascii_lowercase(), list);
            }
        }
        Ok(mock)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Registers responses for successive attempts of one prompt.
    pub fn insert(&mut self, template_id: &str, fingerprint: u64, responses: Vec<String>) {
        self.fixtures
            .entry(template_id.to_string())
            .or_default()
            .insert(format!("{fingerprint:016x}"), responses);
    }

    pub fn to_json(&self) -> String {
        let file = FixtureFile {
            unknown: self.unknown,
            responses: self
                .fixtures
                .iter()
                .map(|(t, e)| {
                    let e = e
                        .iter()
                        .map(|(fp, r)| {
                            let r = if r.len() == 1 {
                                FixtureResponses::One(r[0].clone())
                            } else {
                                FixtureResponses::Attempts(r.clone())
                            };
                            (fp.clone(), r)
                        })
                        .collect();
                    (t.clone(), e)
                })
                .collect(),
        };
        let mut out = serde_json::to_string_pretty(&file).expect("fixture serialization");
        out.push('\n');
        out
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Calls in arrival order.
    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().expect("mock log poisoned").clone()
    }
}

impl SynthesizerClient for MockSynthesizer {
    fn complete(&self, prompt: &RenderedPrompt, _params: &GenerationParams) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fp = prompt.fingerprint_hex();
        let found = self
            .fixtures
            .get(&prompt.template_id)
            .and_then(|e| e.get(&fp))
            .and_then(|r| r.get(prompt.attempt as usize).or(r.last()))
            .cloned();
        self.log.lock().expect("mock log poisoned").push(CallRecord {
            template_id: prompt.template_id.clone(),
            fingerprint: fp.clone(),
            attempt: prompt.attempt,
            messages: prompt.messages.clone(),
            matched: found.is_some(),
        });
        match (found, self.unknown) {
            (Some(text), _) => Ok(text),
            (None, UnknownFixturePolicy::EmptyObject) => Ok("{}".to_string()),
            (None, UnknownFixturePolicy::Error) => Err(ClientError::UnknownFixture {
                template_id: prompt.template_id.clone(),
                fingerprint: fp,
            }),
        }
    }
}

/// Client for a JSON completion endpoint:
/// `{"messages","temperature","top_p","max_tokens"}` -> `{"text"}`.
pub struct HttpCompletionClient {
    endpoint: String,
    model: Option<String>,
    agent: ureq::Agent,
}

impl fmt::Debug for HttpCompletionClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpCompletionClient").field("endpoint", &self.endpoint).finish()
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    messages: &'a [Message],
    temperature: f64,
    top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

impl HttpCompletionClient {
    pub fn new(endpoint: impl Into<String>, model: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        HttpCompletionClient {
            endpoint: endpoint.into(),
            model,
            agent,
        }
    }
}

impl SynthesizerClient for HttpCompletionClient {
    fn complete(&self, prompt: &RenderedPrompt, params: &GenerationParams) -> Result<String, ClientError> {
        let body = CompletionRequest {
            model: self.model.as_deref(),
            messages: &prompt.messages,
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_tokens,
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let parsed: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(parsed.text)
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("no JSON object found in model output")]
    NoObject,
    #[error("unknown entity type `{0}`")]
    UnknownEntity(String),
    #[error("attribute `{attribute}`: {source}")]
    Value {
        attribute: String,
        #[source]
        source: ValidationError,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("both attempts failed: first: {first_error} (raw {first_raw:?}); retry: {second_error} (raw {second_raw:?})")]
    BothFailed {
        first_raw: String,
        first_error: String,
        second_raw: String,
        second_error: String,
    },
}

pub type DateNormalizer<'a> = &'a dyn Fn(&str) -> Option<String>;

/// Raw-value normalization applied before validation.
#[derive(Clone, Copy, Default)]
pub struct ParseOptions<'a> {
    /// Rewrites free-form date strings to `YYYY-MM-DD` (or a partial form).
    pub date_normalizer: Option<DateNormalizer<'a>>,
}

impl fmt::Debug for ParseOptions<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParseOptions")
            .field("date_normalizer", &self.date_normalizer.is_some())
            .finish()
    }
}

/// Attribute values from one synthesis call, before collation.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialExtraction {
    pub entity_type: String,
    pub attributes: AttributeMap,
    pub provenance: Vec<Provenance>,
}

impl PartialExtraction {
    pub fn is_empty(&self) -> bool {
        self.attributes.values().all(Option::is_none)
    }

    pub fn into_instance(self) -> EntityInstance {
        EntityInstance::new(self.entity_type, self.attributes, self.provenance)
    }
}

impl From<PartialExtraction> for EntityInstance {
    fn from(p: PartialExtraction) -> Self {
        p.into_instance()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub extractions: Vec<PartialExtraction>,
    pub warnings: Vec<String>,
}

/// The first JSON value starting at an opening brace or bracket in `raw`
/// that parses completely; surrounding prose and code fences are ignored.
pub fn extract_json_value(raw: &str, allow_array: bool) -> Option<Value> {
    raw.char_indices()
        .filter(|(_, c)| *c == '{' || (allow_array && *c == '['))
        .find_map(|(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(v @ Value::Object(_))) => Some(v),
                Some(Ok(v @ Value::Array(_))) if allow_array => Some(v),
                _ => None,
            }
        })
}

pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    match extract_json_value(raw, false)? {
        Value::Object(m) => Some(m),
        _ => None,
    }
}

/// Parses the first JSON object in `raw` into a typed extraction. Keys
/// outside `targets` are dropped with a warning; absent targets are null.
pub fn parse_structured_output(
    raw: &str,
    registry: &SchemaRegistry,
    entity_type: &str,
    targets: &[String],
) -> Result<Parsed, SynthesisError> {
    let spec = registry
        .get(entity_type)
        .ok_or_else(|| SynthesisError::UnknownEntity(entity_type.to_string()))?;
    let obj = extract_json_object(raw).ok_or(SynthesisError::NoObject)?;
    let mut warnings = Vec::new();
    let extraction = typed_extraction(spec, &obj, targets, ParseOptions::default(), &mut warnings)?;
    Ok(Parsed {
        extractions: vec![extraction],
        warnings,
    })
}

/// Like [`parse_structured_output`], but also accepts a JSON array of
/// objects, one extraction per element.
pub fn parse_structured_outputs(
    raw: &str,
    spec: &EntityTypeSpec,
    targets: &[String],
    opts: ParseOptions<'_>,
) -> Result<Parsed, SynthesisError> {
    let value = extract_json_value(raw, true).ok_or(SynthesisError::NoObject)?;
    let objects: Vec<Map<String, Value>> = match value {
        Value::Object(m) => vec![m],
        Value::Array(items) => items
            .into_iter()
            .map(|v| match v {
                Value::Object(m) => Ok(m),
                _ => Err(SynthesisError::Invalid("array element is not an object".into())),
            })
            .collect::<Result<_, _>>()?,
        _ => unreachable!("extract_json_value yields objects or arrays"),
    };
    let mut warnings = Vec::new();
    let extractions = objects
        .iter()
        .map(|o| typed_extraction(spec, o, targets, opts, &mut warnings))
        .collect::<Result<_, _>>()?;
    Ok(Parsed { extractions, warnings })
}

fn typed_extraction(
    spec: &EntityTypeSpec,
    obj: &Map<String, Value>,
    targets: &[String],
    opts: ParseOptions<'_>,
    warnings: &mut Vec<String>,
) -> Result<PartialExtraction, SynthesisError> {
    let mut attributes: AttributeMap = targets.iter().map(|t| (t.clone(), None)).collect();
    for (key, value) in obj {
        let Some(attr) = spec.resolve_attribute(key).filter(|a| targets.contains(&a.name)) else {
            warnings.push(format!("{}: dropped non-target key `{key}`", spec.name));
            continue;
        };
        let mut value = value.clone();
        if attr.kind() == AttributeKind::Date {
            if let (Some(norm), Value::String(s)) = (opts.date_normalizer, &value) {
                if let Some(n) = norm(s) {
                    if n.contains('?') {
                        warnings.push(format!("{}.{}: partial date `{s}` treated as null", spec.name, attr.name));
                        value = Value::Null;
                    } else {
                        value = Value::String(n);
                    }
                }
            }
        }
        let typed = schema::validate_json_value(attr, &value).map_err(|source| SynthesisError::Value {
            attribute: attr.name.clone(),
            source,
        })?;
        let slot = attributes.entry(attr.name.clone()).or_default();
        if slot.is_none() {
            *slot = typed;
        }
    }
    Ok(PartialExtraction {
        entity_type: spec.name.clone(),
        attributes,
        provenance: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Synthesis with reflection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutcome {
    pub extractions: Vec<PartialExtraction>,
    pub warnings: Vec<String>,
    pub calls: u32,
}

/// One completion, plus exactly one reflection retry when parsing fails or
/// any extraction lacks a required attribute. The retry result is final.
pub fn synthesize_with_reflection(
    client: &dyn SynthesizerClient,
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
    spec: &EntityTypeSpec,
    params: &GenerationParams,
    opts: ParseOptions<'_>,
) -> Result<SynthesisOutcome, SynthesisError> {
    synthesize_prefilled(client, template, bindings, spec, params, opts, None)
}

/// Reflection loop where `prefill` supplies a value for an attribute the
/// model leaves null, before the required-attribute check.
fn synthesize_prefilled(
    client: &dyn SynthesizerClient,
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
    spec: &EntityTypeSpec,
    params: &GenerationParams,
    opts: ParseOptions<'_>,
    prefill: Option<(&str, &TypedValue)>,
) -> Result<SynthesisOutcome, SynthesisError> {
    let prompt = template.render(bindings)?;
    let required = template.required_for(spec);
    let attempt = |p: &RenderedPrompt| -> (String, Result<Parsed, SynthesisError>) {
        match client.complete(p, params) {
            Ok(raw) => {
                let mut parsed = parse_structured_outputs(&raw, spec, &template.target_attributes, opts);
                if let (Ok(p), Some((attr, value))) = (&mut parsed, prefill) {
                    for e in &mut p.extractions {
                        if let Some(slot @ None) = e.attributes.get_mut(attr) {
                            *slot = Some(value.clone());
                        }
                    }
                }
                (raw, parsed)
            }
            Err(e) => (String::new(), Err(e.into())),
        }
    };

    let (first_raw, first) = attempt(&prompt);
    let complete = |p: &Parsed| {
        p.extractions
            .iter()
            .all(|e| required.iter().all(|r| e.attributes.get(r).is_some_and(Option::is_some)))
    };
    if let Ok(parsed) = &first {
        if complete(parsed) {
            return Ok(SynthesisOutcome {
                extractions: parsed.extractions.clone(),
                warnings: parsed.warnings.clone(),
                calls: 1,
            });
        }
    }
    let (second_raw, second) = attempt(&prompt.with_reflection());
    match second {
        Ok(parsed) => Ok(SynthesisOutcome {
            extractions: parsed.extractions,
            warnings: parsed.warnings,
            calls: 2,
        }),
        Err(second_error) => Err(SynthesisError::BothFailed {
            first_error: match first {
                Ok(_) => "required attribute missing".to_string(),
                Err(e) => e.to_string(),
            },
            first_raw,
            second_raw,
            second_error: second_error.to_string(),
        }),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnumerationOutcome {
    pub variants: Vec<String>,
    pub extractions: Vec<PartialExtraction>,
    pub warnings: Vec<String>,
}

/// Two-stage extraction: stage 1 lists variants (e.g. drug names), stage 2
/// runs once per distinct variant with it bound to `loop_placeholder`.
/// The variant is written into `loop_attribute` when stage 2 leaves it null.
#[allow(clippy::too_many_arguments)]
pub fn enumerate_then_detail(
    client: &dyn SynthesizerClient,
    stage1: &PromptTemplate,
    stage2: &PromptTemplate,
    loop_placeholder: &str,
    loop_attribute: &str,
    bindings: &BTreeMap<String, String>,
    spec: &EntityTypeSpec,
    params: &GenerationParams,
    opts: ParseOptions<'_>,
) -> Result<EnumerationOutcome, SynthesisError> {
    let mut out = EnumerationOutcome::default();
    let prompt = stage1.render_from(bindings)?;
    let mut listed = None;
    let mut errors = Vec::new();
    for p in [prompt.clone(), prompt.with_reflection()] {
        match client.complete(&p, params) {
            Ok(raw) => match parse_variant_list(&raw) {
                Some(v) => {
                    listed = Some(v);
                    break;
                }
                None => errors.push(format!("unparseable variant list {raw:?}")),
            },
            Err(e) => errors.push(e.to_string()),
        }
    }
    let Some(listed) = listed else {
        out.warnings.push(format!("{}: stage 1 `{}` failed: {}", spec.name, stage1.id, errors.join("; ")));
        return Ok(out);
    };

    let attr = spec.attribute(loop_attribute);
    let canon = |s: &str| attr.map_or_else(|| canonicalize(s), |a| a.canonicalize(s));
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    for v in listed {
        let v = v.trim().to_string();
        if !v.is_empty() {
            seen.entry(canon(&v)).or_insert(v);
        }
    }
    out.variants = seen.into_values().collect();

    for variant in &out.variants {
        let mut b = bindings.clone();
        b.insert(loop_placeholder.to_string(), variant.clone());
        let b = b.into_iter().filter(|(k, _)| stage2.placeholders.contains(k)).collect();
        let typed = attr.and_then(|a| schema::validate_value(a, variant).ok());
        let prefill = typed.as_ref().map(|v| (loop_attribute, v));
        match synthesize_prefilled(client, stage2, &b, spec, params, opts, prefill) {
            Ok(result) => {
                out.warnings.extend(result.warnings);
                out.extractions.extend(result.extractions);
            }
            Err(e) => out
                .warnings
                .push(format!("{}: stage 2 `{}` for `{variant}` skipped: {e}", spec.name, stage2.id)),
        }
    }
    Ok(out)
}

/// Accepts `["a","b"]`, or an object whose first array field lists strings.
pub fn parse_variant_list(raw: &str) -> Option<Vec<String>> {
    let list = match extract_json_value(raw, true)? {
        Value::Array(a) => a,
        Value::Object(m) => m.into_iter().find_map(|(_, v)| match v {
            Value::Array(a) => Some(a),
            _ => None,
        })?,
        _ => return None,
    };
    list.into_iter()
        .map(|v| match v {
            Value::String(s) => Some(s),
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Context assembly and provenance
// ---------------------------------------------------------------------------

/// Orders chunks by (document date, missing last; document id; index).
pub fn order_chunks<'a>(chunks: &[&'a Chunk], dates: &BTreeMap<String, NaiveDate>) -> Vec<&'a Chunk> {
    let mut ordered = chunks.to_vec();
    ordered.sort_by(|a, b| {
        let key = |c: &Chunk| {
            let d = dates.get(&c.document_id).copied();
            (d.is_none(), d)
        };
        key(a)
            .cmp(&key(b))
            .then_with(|| a.document_id.cmp(&b.document_id))
            .then_with(|| a.chunk_index.cmp(&b.chunk_index))
    });
    ordered.dedup_by(|a, b| a.key() == b.key());
    ordered
}

/// Joins chunks under per-document headers for one synthesis call.
pub fn concat_chunks(chunks: &[&Chunk], dates: &BTreeMap<String, NaiveDate>) -> String {
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for c in order_chunks(chunks, dates) {
        if current != Some(c.document_id.as_str()) {
            if current.is_some() {
                out.push('\n');
            }
            out.push_str("### Document ");
            out.push_str(&c.document_id);
            if let Some(d) = dates.get(&c.document_id) {
                out.push_str(&format!(" ({})", d.format("%Y-%m-%d")));
            }
            out.push('\n');
            current = Some(&c.document_id);
        }
        out.push_str(c.text.trim_end());
        out.push('\n');
    }
    out
}

/// First case-insensitive occurrence of `needle` that does not start or
/// end inside a word ("CT" does not match within "October").
fn find_ignore_case(haystack: &[char], needle: &[char]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    let word = |c: Option<&char>| c.is_some_and(|c| c.is_alphanumeric());
    (0..=haystack.len() - needle.len()).find(|&i| {
        let end = i + needle.len();
        let clean_start = !(word(needle.first()) && i > 0 && word(haystack.get(i - 1)));
        let clean_end = !(word(needle.last()) && word(haystack.get(end)));
        clean_start
            && clean_end
            && haystack[i..end]
                .iter()
                .zip(needle)
                .all(|(a, b)| a == b || a.to_lowercase().eq(b.to_lowercase()))
    })
}

/// Points an extraction at the spans in `chunks` where its text values
/// occur, or at the whole chunks when none is found.
pub fn attach_provenance(extraction: &mut PartialExtraction, chunks: &[&Chunk]) {
    let needles: Vec<Vec<char>> = extraction
        .attributes
        .values()
        .flatten()
        .filter_map(|v| v.as_str())
        .map(|s| s.chars().collect())
        .collect();
    let mut spans = BTreeSet::new();
    for c in chunks {
        let hay: Vec<char> = c.text.chars().collect();
        for n in &needles {
            if let Some(at) = find_ignore_case(&hay, n) {
                spans.insert(Provenance {
                    document_id: c.document_id.clone(),
                    chunk_index: c.chunk_index,
                    char_start: c.char_start + at,
                    char_end: c.char_start + at + n.len(),
                });
            }
        }
    }
    if spans.is_empty() {
        spans = chunks
            .iter()
            .map(|c| Provenance {
                document_id: c.document_id.clone(),
                chunk_index: c.chunk_index,
                char_start: c.char_start,
                char_end: c.char_end,
            })
            .collect();
    }
    extraction.provenance = spans.into_iter().collect();
}

#[cfg(test)]
mod tests {
    use super::*;

    const BIOMARKER_PROMPT: &str = "@id: bio\n@targets: biomarker_tested, interpretation\nsystem:\nExtract biomarkers.\nuser:\n{{SNIPPET}}\n";

    fn bindings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn bio_template() -> PromptTemplate {
        let reg = SchemaRegistry::bundled();
        let mut t = PromptTemplate::parse("x", BIOMARKER_PROMPT).unwrap();
        t.bind_targets(reg.get("Biomarker").unwrap()).unwrap();
        t
    }

    #[test]
    fn parses_template_sections() {
        let t = bio_template();
        assert_eq!(t.id, "bio");
        assert_eq!(t.messages.len(), 2);
        assert_eq!(t.messages[1].content, "{{SNIPPET}}");
        assert_eq!(t.placeholders, BTreeSet::from(["SNIPPET".to_string()]));
        assert!(PromptTemplate::parse("x", "hello").is_err());
        assert!(PromptTemplate::parse("x", "@bogus: 1\nuser:\nhi").is_err());
    }

    #[test]
    fn rendering_is_literal_and_strict() {
        let t = bio_template();
        let r = t.render(&bindings(&[("SNIPPET", "BRAF V600E detected")])).unwrap();
        assert_eq!(r.messages[1].content, "BRAF V600E detected");
        let r = t.render(&bindings(&[("SNIPPET", "{{X}}")])).unwrap();
        assert_eq!(r.messages[1].content, "{{X}}");
        assert!(matches!(t.render(&BTreeMap::new()), Err(PromptError::MissingBinding { .. })));
        assert!(matches!(
            t.render(&bindings(&[("SNIPPET", "a"), ("DRUG", "b")])),
            Err(PromptError::UnknownBinding { .. })
        ));
        let stage2 = PromptTemplate::parse("d", "user:\nFor the drug \"{{DRUG}}\" extract from {{SNIPPET}}").unwrap();
        assert!(matches!(
            stage2.render(&bindings(&[("SNIPPET", "a")])),
            Err(PromptError::MissingBinding { placeholder, .. }) if placeholder == "DRUG"
        ));
    }

    #[test]
    fn fingerprint_depends_on_every_binding() {
        let a = fingerprint(&bindings(&[("SNIPPET", "x"), ("DRUG", "a")]));
        let b = fingerprint(&bindings(&[("SNIPPET", "x"), ("DRUG", "b")]));
        assert_ne!(a, b);
        assert_eq!(a, fingerprint(&bindings(&[("DRUG", "a"), ("SNIPPET", "x")])));
    }

    #[test]
    fn parses_structured_output() {
        let reg = SchemaRegistry::bundled();
        let targets = vec!["biomarker_tested".to_string(), "interpretation".to_string()];
        let p = parse_structured_output(
            "Sure:\n```json\n{\"biomarker_tested\":\"BRAF\",\"interpretation\":\"Positive\"}\n```",
            &reg,
            "Biomarker",
            &targets,
        )
        .unwrap();
        let e = &p.extractions[0];
        assert_eq!(e.attributes["biomarker_tested"], Some(TypedValue::Text("BRAF".into())));
        assert_eq!(e.attributes["interpretation"], Some(TypedValue::Categorical("Positive".into())));

        let p = parse_structured_output("{}", &reg, "Biomarker", &targets).unwrap();
        assert!(p.extractions[0].is_empty());
        assert_eq!(p.extractions[0].attributes.len(), 2);

        assert!(matches!(
            parse_structured_output("{\"interpretation\":\"Maybe\"}", &reg, "Biomarker", &targets),
            Err(SynthesisError::Value { .. })
        ));
        assert_eq!(parse_structured_output("no json", &reg, "Biomarker", &targets), Err(SynthesisError::NoObject));
        let p = parse_structured_output("{\"biomarker_tested\":\"BRAF\",\"extra\":1}", &reg, "Biomarker", &targets).unwrap();
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn reflection_retries_once() {
        let reg = SchemaRegistry::bundled();
        let spec = reg.get("Biomarker").unwrap();
        let t = bio_template();
        let b = bindings(&[("SNIPPET", "BRAF V600E detected")]);
        let fp = fingerprint(&b);
        let params = GenerationParams::default();

        let mut mock = MockSynthesizer::new(UnknownFixturePolicy::Error);
        mock.insert("bio", fp, vec!["{\"biomarker_tested\":\"BRAF\"}".into()]);
        let out = synthesize_with_reflection(&mock, &t, &b, spec, &params, ParseOptions::default()).unwrap();
        assert_eq!((out.calls, mock.call_count()), (1, 1));

        let mut mock = MockSynthesizer::new(UnknownFixturePolicy::Error);
        mock.insert("bio", fp, vec!["{\"biomarker_tested\":null}".into(), "{\"biomarker_tested\":\"BRAF\"}".into()]);
        let out = synthesize_with_reflection(&mock, &t, &b, spec, &params, ParseOptions::default()).unwrap();
        assert_eq!(mock.call_count(), 2);
        assert_eq!(out.extractions[0].attributes["biomarker_tested"], Some(TypedValue::Text("BRAF".into())));
        assert_eq!(mock.calls()[1].messages.last().unwrap().content, REFLECTION_SUFFIX);

        let mut mock = MockSynthesizer::new(UnknownFixturePolicy::Error);
        mock.insert("bio", fp, vec!["garbage".into(), "more garbage".into()]);
        let err = synthesize_with_reflection(&mock, &t, &b, spec, &params, ParseOptions::default()).unwrap_err();
        assert!(matches!(err, SynthesisError::BothFailed { ref first_raw, .. } if first_raw == "garbage"));
        assert_eq!(mock.call_count(), 2);
    }

    #[test]
    fn enumerates_then_details_distinct_variants() {
        let reg = SchemaRegistry::bundled();
        let spec = reg.get("Medication").unwrap();
        let stage1 = PromptTemplate::parse("enum", "user:\nList all distinct systemic agents in {{SNIPPET}}").unwrap();
        let mut stage2 =
            PromptTemplate::parse("detail", "@targets: medication, start_date\nuser:\nFor the drug \"{{DRUG}}\" extract from {{SNIPPET}}")
                .unwrap();
        stage2.bind_targets(spec).unwrap();
        let snippet = bindings(&[("SNIPPET", "notes")]);
        let params = GenerationParams::default();
        let mut mock = MockSynthesizer::new(UnknownFixturePolicy::Error);
        mock.insert("enum", fingerprint(&snippet), vec!["[\"Nivolumab\",\"nivolumab\",\"Ipilimumab\"]".into()]);
        for (drug, date) in [("Nivolumab", "2019-03-01"), ("Ipilimumab", "2019-04-01")] {
            let b = bindings(&[("SNIPPET", "notes"), ("DRUG", drug)]);
            mock.insert("detail", fingerprint(&b), vec![format!("{{\"start_date\":\"{date}\"}}")]);
        }
        let out =
            enumerate_then_detail(&mock, &stage1, &stage2, "DRUG", "medication", &snippet, spec, &params, ParseOptions::default())
                .unwrap();
        assert_eq!(out.variants, vec!["Ipilimumab", "Nivolumab"]);
        assert_eq!(out.extractions.len(), 2);
        assert_eq!(mock.call_count(), 3);
        assert!(out.extractions.iter().all(|e| e.attributes["medication"].is_some()));

        let mut mock = MockSynthesizer::new(UnknownFixturePolicy::Error);
        mock.insert("enum", fingerprint(&snippet), vec!["[]".into()]);
        let out =
            enumerate_then_detail(&mock, &stage1, &stage2, "DRUG", "medication", &snippet, spec, &params, ParseOptions::default())
                .unwrap();
        assert!(out.extractions.is_empty());
        assert_eq!(mock.call_count(), 1);
    }

    #[test]
    fn mock_fixture_file_round_trips() {
        let src = r#"{"unknown":"empty_object","responses":{"bio":{"00000000000000ff":["a","b"],"0000000000000001":"c"}}}"#;
        let mock = MockSynthesizer::from_json(src).unwrap();
        let again = MockSynthesizer::from_json(&mock.to_json()).unwrap();
        assert_eq!(again.to_json(), mock.to_json());
        let prompt = RenderedPrompt {
            template_id: "zzz".into(),
            messages: vec![],
            fingerprint: 7,
            attempt: 0,
        };
        assert_eq!(mock.complete(&prompt, &GenerationParams::default()).unwrap(), "{}");
    }

    #[test]
    fn provenance_narrows_to_value_spans() {
        let chunk = Chunk {
            document_id: "d1".into(),
            chunk_index: 0,
            char_start: 10,
            char_end: 40,
            text: "Tumor tested: braf mutant.".into(),
        };
        let mut e = PartialExtraction {
            entity_type: "Biomarker".into(),
            attributes: AttributeMap::from([("biomarker_tested".to_string(), Some(TypedValue::Text("BRAF".into())))]),
            provenance: vec![],
        };
        attach_provenance(&mut e, &[&chunk]);
        assert_eq!((e.provenance[0].char_start, e.provenance[0].char_end), (24, 28));
        e.attributes.insert("biomarker_tested".into(), Some(TypedValue::Text("KIT".into())));
        attach_provenance(&mut e, &[&chunk]);
        assert_eq!((e.provenance[0].char_start, e.provenance[0].char_end), (10, 40));
    }
}
