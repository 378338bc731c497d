//! Typed entity/attribute data model.
//!
//! An entity type is a named collection of typed attributes together with
//! its alignment scheme (root attribute or weighted score) and the entity
//! types it depends on. The [`SchemaRegistry`] is loaded once from a JSON
//! schema file and is immutable afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collation::DependencyGraph;

const DEFAULT_SCHEMA: &str = include_str!("../assets/default_schema.json");

/// Tolerance on the sum of weights of a weighted entity.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("malformed schema document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no entities")]
    NoEntities,
    #[error("duplicate entity name `{0}`")]
    DuplicateEntity(String),
    #[error("entity `{0}` has no attributes")]
    NoAttributes(String),
    #[error("duplicate attribute `{attribute}` in entity `{entity}`")]
    DuplicateAttribute { entity: String, attribute: String },
    #[error("categorical attribute `{entity}.{attribute}` has no value set")]
    MissingValueSet { entity: String, attribute: String },
    #[error("attribute `{entity}.{attribute}` declares values but is not categorical")]
    UnexpectedValueSet { entity: String, attribute: String },
    #[error("entity `{entity}` alignment references unknown attribute `{attribute}`")]
    UnknownAlignmentAttribute { entity: String, attribute: String },
    #[error("weighted entity `{entity}` weights sum to {sum}, expected 1")]
    WeightSum { entity: String, sum: f64 },
    #[error("weight {weight} of `{entity}.{attribute}` is outside [0, 1]")]
    WeightRange {
        entity: String,
        attribute: String,
        weight: f64,
    },
    #[error("weighted entity `{0}` has no unique maximum-weight attribute")]
    AmbiguousDriver(String),
    #[error("threshold {threshold} of entity `{entity}` is outside (0, 1]")]
    Threshold { entity: String, threshold: f64 },
    #[error("entity `{entity}` depends on unknown entity `{dependency}`")]
    UnknownDependency { entity: String, dependency: String },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    DependencyCycle(Vec<String>),
    #[error("name or alias `{0}` is used more than once")]
    DuplicateAlias(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("unparseable date `{0}`")]
    Date(String),
    #[error("partial date `{0}` where a calendar date is required")]
    PartialDate(String),
    #[error("unparseable integer `{0}`")]
    Integer(String),
    #[error("unparseable decimal `{0}`")]
    Decimal(String),
    #[error("unparseable boolean `{0}`")]
    Boolean(String),
    #[error("`{value}` is not in the value set of `{attribute}`")]
    NotInValueSet { attribute: String, value: String },
    #[error("attribute `{attribute}` cannot take a JSON {found}")]
    JsonType { attribute: String, found: &'static str },
    #[error("unknown entity type `{0}`")]
    UnknownEntity(String),
    #[error("unknown attribute `{attribute}` for entity `{entity}`")]
    UnknownAttribute { entity: String, attribute: String },
    #[error("attribute `{attribute}` expects {expected}, found {found}")]
    TypeMismatch {
        attribute: String,
        expected: AttributeKind,
        found: AttributeKind,
    },
    #[error("attribute `{attribute}`: {source}")]
    Attribute {
        attribute: String,
        #[source]
        source: Box<ValidationError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Date,
    Integer,
    Decimal,
    Categorical,
    Text,
    Boolean,
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttributeKind::Date => "date",
            AttributeKind::Integer => "integer",
            AttributeKind::Decimal => "decimal",
            AttributeKind::Categorical => "categorical",
            AttributeKind::Text => "text",
            AttributeKind::Boolean => "boolean",
        };
        f.write_str(s)
    }
}

/// Attribute type; only the categorical kind carries a value set.
#[derive(Debug, Clone, PartialEq)]
pub enum AttributeType {
    Date,
    Integer,
    Decimal,
    Categorical(Vec<String>),
    Text,
    Boolean,
}

impl AttributeType {
    pub fn kind(&self) -> AttributeKind {
        match self {
            AttributeType::Date => AttributeKind::Date,
            AttributeType::Integer => AttributeKind::Integer,
            AttributeType::Decimal => AttributeKind::Decimal,
            AttributeType::Categorical(_) => AttributeKind::Categorical,
            AttributeType::Text => AttributeKind::Text,
            AttributeType::Boolean => AttributeKind::Boolean,
        }
    }

    pub fn value_set(&self) -> Option<&[String]> {
        match self {
            AttributeType::Categorical(values) => Some(values),
            _ => None,
        }
    }
}

/// How string values of an attribute are normalized before comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Canonicalization {
    /// Trim, lowercase, collapse internal whitespace.
    #[default]
    Standard,
    /// As `Standard`, then drop all whitespace ("pT2 N0 M0" == "pT2N0M0").
    Compact,
}

/// Trim, lowercase and collapse runs of internal whitespace to one space.
pub fn canonicalize(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSpec {
    pub name: String,
    pub ty: AttributeType,
    pub required: bool,
    /// Alignment weight; only set on attributes of weighted entities.
    pub weight: Option<f64>,
    pub aliases: Vec<String>,
    pub canonical: Canonicalization,
}

impl AttributeSpec {
    pub fn new(name: impl Into<String>, ty: AttributeType) -> Self {
        AttributeSpec {
            name: name.into(),
            ty,
            required: false,
            weight: None,
            aliases: Vec::new(),
            canonical: Canonicalization::Standard,
        }
    }

    pub fn kind(&self) -> AttributeKind {
        self.ty.kind()
    }

    /// Canonical comparison form of a string value of this attribute.
    pub fn canonicalize(&self, raw: &str) -> String {
        match self.canonical {
            Canonicalization::Standard => canonicalize(raw),
            Canonicalization::Compact => raw
                .chars()
                .filter(|c| !c.is_whitespace())
                .flat_map(char::to_lowercase)
                .collect(),
        }
    }

    fn answers_to(&self, name: &str) -> bool {
        self.name == name || self.aliases.iter().any(|a| a == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlignmentScheme {
    Root { root_attribute: String },
    Weighted { threshold: f64, driver: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityTypeSpec {
    pub name: String,
    pub aliases: Vec<String>,
    pub attributes: Vec<AttributeSpec>,
    pub alignment: AlignmentScheme,
    pub depends_on: Vec<String>,
}

impl EntityTypeSpec {
    /// Looks up an attribute by exact name.
    pub fn attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }

    /// Looks up an attribute by name or alias.
    pub fn resolve_attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attribute(name)
            .or_else(|| self.attributes.iter().find(|a| a.answers_to(name)))
    }

    /// The anchor attribute: the root, or the highest-weighted attribute.
    pub fn driver(&self) -> &str {
        match &self.alignment {
            AlignmentScheme::Root { root_attribute } => root_attribute,
            AlignmentScheme::Weighted { driver, .. } => driver,
        }
    }

    pub fn driver_spec(&self) -> &AttributeSpec {
        self.attribute(self.driver())
            .expect("registry invariant: driver attribute exists")
    }

    pub fn date_attributes(&self) -> impl Iterator<Item = &AttributeSpec> {
        self.attributes
            .iter()
            .filter(|a| a.kind() == AttributeKind::Date)
    }

    pub fn required_attributes(&self) -> impl Iterator<Item = &AttributeSpec> {
        self.attributes.iter().filter(|a| a.required)
    }

    fn answers_to(&self, name: &str) -> bool {
        self.name == name || self.aliases.iter().any(|a| a == name)
    }
}

/// The set of registered entity types, keyed by canonical name.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaRegistry {
    entities: BTreeMap<String, EntityTypeSpec>,
}

impl SchemaRegistry {
    /// The bundled registry encoding the sixteen default entity types.
    pub fn bundled() -> Self {
        load_schema(DEFAULT_SCHEMA).expect("bundled schema is valid")
    }

    pub fn bundled_source() -> &'static str {
        DEFAULT_SCHEMA
    }

    /// Resolves an entity by name or alias.
    pub fn get(&self, name: &str) -> Option<&EntityTypeSpec> {
        self.entities
            .get(name)
            .or_else(|| self.entities.values().find(|e| e.answers_to(name)))
    }

    pub fn entities(&self) -> impl Iterator<Item = &EntityTypeSpec> {
        self.entities.values()
    }

    pub fn entity_names(&self) -> impl Iterator<Item = &str> {
        self.entities.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn attribute_count(&self) -> usize {
        self.entities.values().map(|e| e.attributes.len()).sum()
    }

    pub fn dependency_graph(&self) -> DependencyGraph {
        let mut graph = DependencyGraph::default();
        for spec in self.entities.values() {
            graph.add_node(&spec.name);
            for dep in &spec.depends_on {
                graph.add_edge(&spec.name, dep);
            }
        }
        graph
    }

    /// Serializes the registry back to the schema file format.
    pub fn to_json(&self) -> String {
        let file = SchemaFile {
            entities: self.entities.values().map(EntityDef::from_spec).collect(),
        };
        serde_json::to_string_pretty(&file).expect("schema serializes")
    }

    /// One entity type in the schema file format.
    pub fn entity_json(&self, name: &str) -> Option<serde_json::Value> {
        let spec = self.get(name)?;
        Some(serde_json::to_value(EntityDef::from_spec(spec)).expect("schema serializes"))
    }
}

// ---------------------------------------------------------------------------
// Schema file format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    entities: Vec<EntityDef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityDef {
    name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    aliases: Vec<String>,
    alignment: AlignmentDef,
    #[serde(default)]
    depends_on: Vec<String>,
    attributes: Vec<AttributeDef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase", deny_unknown_fields)]
enum AlignmentDef {
    Root {
        root: String,
    },
    Weighted {
        threshold: f64,
        weights: BTreeMap<String, f64>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeDef {
    name: String,
    #[serde(rename = "type")]
    kind: AttributeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    required: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    aliases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    canonical: Option<Canonicalization>,
}

impl EntityDef {
    fn from_spec(spec: &EntityTypeSpec) -> Self {
        let alignment = match &spec.alignment {
            AlignmentScheme::Root { root_attribute } => AlignmentDef::Root {
                root: root_attribute.clone(),
            },
            AlignmentScheme::Weighted { threshold, .. } => AlignmentDef::Weighted {
                threshold: *threshold,
                weights: spec
                    .attributes
                    .iter()
                    .filter_map(|a| a.weight.map(|w| (a.name.clone(), w)))
                    .collect(),
            },
        };
        let driver = spec.driver().to_string();
        EntityDef {
            name: spec.name.clone(),
            aliases: spec.aliases.clone(),
            alignment,
            depends_on: spec.depends_on.clone(),
            attributes: spec
                .attributes
                .iter()
                .map(|a| AttributeDef {
                    name: a.name.clone(),
                    kind: a.kind(),
                    values: a.ty.value_set().map(<[String]>::to_vec),
                    // The driver is required implicitly; only record overrides.
                    required: (a.required != (a.name == driver)).then_some(a.required),
                    aliases: a.aliases.clone(),
                    canonical: (a.canonical != Canonicalization::Standard).then_some(a.canonical),
                })
                .collect(),
        }
    }
}

/// Parses and validates a schema definition document.
pub fn load_schema(source: &str) -> Result<SchemaRegistry, SchemaError> {
    let file: SchemaFile = serde_json::from_str(source)?;
    if file.entities.is_empty() {
        return Err(SchemaError::NoEntities);
    }

    let mut names = BTreeSet::new();
    let mut entities = BTreeMap::new();
    for def in file.entities {
        for n in std::iter::once(&def.name).chain(&def.aliases) {
            if !names.insert(n.clone()) {
                return Err(if *n == def.name {
                    SchemaError::DuplicateEntity(n.clone())
                } else {
                    SchemaError::DuplicateAlias(n.clone())
                });
            }
        }
        let spec = build_entity(def)?;
        entities.insert(spec.name.clone(), spec);
    }

    for spec in entities.values() {
        for dep in &spec.depends_on {
            if !entities.contains_key(dep) {
                return Err(SchemaError::UnknownDependency {
                    entity: spec.name.clone(),
                    dependency: dep.clone(),
                });
            }
        }
    }

    let registry = SchemaRegistry { entities };
    registry
        .dependency_graph()
        .topo_order()
        .map_err(|cycle| SchemaError::DependencyCycle(cycle.0))?;
    Ok(registry)
}

fn build_entity(def: EntityDef) -> Result<EntityTypeSpec, SchemaError> {
    let entity = def.name;
    if def.attributes.is_empty() {
        return Err(SchemaError::NoAttributes(entity));
    }

    let mut seen = BTreeSet::new();
    let mut attributes = Vec::with_capacity(def.attributes.len());
    for a in def.attributes {
        if !seen.insert(a.name.clone()) {
            return Err(SchemaError::DuplicateAttribute {
                entity,
                attribute: a.name,
            });
        }
        let ty = match (a.kind, a.values) {
            (AttributeKind::Categorical, Some(values)) if !values.is_empty() => {
                AttributeType::Categorical(values)
            }
            (AttributeKind::Categorical, _) => {
                return Err(SchemaError::MissingValueSet {
                    entity,
                    attribute: a.name,
                })
            }
            (_, Some(_)) => {
                return Err(SchemaError::UnexpectedValueSet {
                    entity,
                    attribute: a.name,
                })
            }
            (AttributeKind::Date, None) => AttributeType::Date,
            (AttributeKind::Integer, None) => AttributeType::Integer,
            (AttributeKind::Decimal, None) => AttributeType::Decimal,
            (AttributeKind::Text, None) => AttributeType::Text,
            (AttributeKind::Boolean, None) => AttributeType::Boolean,
        };
        attributes.push(AttributeSpec {
            name: a.name,
            ty,
            required: a.required.unwrap_or(false),
            weight: None,
            aliases: a.aliases,
            canonical: a.canonical.unwrap_or_default(),
        });
    }
    for a in &attributes {
        for alias in &a.aliases {
            if attributes.iter().filter(|b| b.answers_to(alias)).count() > 1 {
                return Err(SchemaError::DuplicateAlias(format!("{entity}.{alias}")));
            }
        }
    }

    let unknown = |attribute: &str| SchemaError::UnknownAlignmentAttribute {
        entity: entity.clone(),
        attribute: attribute.to_string(),
    };
    let alignment = match def.alignment {
        AlignmentDef::Root { root } => {
            if !seen.contains(&root) {
                return Err(unknown(&root));
            }
            AlignmentScheme::Root {
                root_attribute: root,
            }
        }
        AlignmentDef::Weighted { threshold, weights } => {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(SchemaError::Threshold { entity, threshold });
            }
            let mut sum = 0.0;
            for (name, &w) in &weights {
                let attr = attributes
                    .iter_mut()
                    .find(|a| &a.name == name)
                    .ok_or_else(|| unknown(name))?;
                if !(0.0..=1.0).contains(&w) {
                    return Err(SchemaError::WeightRange {
                        entity,
                        attribute: name.clone(),
                        weight: w,
                    });
                }
                attr.weight = Some(w);
                sum += w;
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(SchemaError::WeightSum { entity, sum });
            }
            let max = weights.values().cloned().fold(f64::MIN, f64::max);
            let mut top = weights.iter().filter(|(_, &w)| w == max);
            let driver = match (top.next(), top.next()) {
                (Some((name, _)), None) => name.clone(),
                _ => return Err(SchemaError::AmbiguousDriver(entity)),
            };
            AlignmentScheme::Weighted { threshold, driver }
        }
    };

    let mut spec = EntityTypeSpec {
        name: entity,
        aliases: def.aliases,
        attributes,
        alignment,
        depends_on: def.depends_on,
    };
    let driver = spec.driver().to_string();
    for a in spec.attributes.iter_mut() {
        if a.name == driver {
            a.required = true;
        }
    }
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Values
// ---------------------------------------------------------------------------

/// A schema-checked attribute value.
#[derive(Debug, Clone, PartialEq)]
pub enum TypedValue {
    Date(NaiveDate),
    Integer(i64),
    Decimal(f64),
    Categorical(String),
    Text(String),
    Boolean(bool),
}

impl TypedValue {
    pub fn kind(&self) -> AttributeKind {
        match self {
            TypedValue::Date(_) => AttributeKind::Date,
            TypedValue::Integer(_) => AttributeKind::Integer,
            TypedValue::Decimal(_) => AttributeKind::Decimal,
            TypedValue::Categorical(_) => AttributeKind::Categorical,
            TypedValue::Text(_) => AttributeKind::Text,
            TypedValue::Boolean(_) => AttributeKind::Boolean,
        }
    }

    pub fn as_date(&self) -> Option<NaiveDate> {
        match self {
            TypedValue::Date(d) => Some(*d),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            TypedValue::Categorical(s) | TypedValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            TypedValue::Integer(i) => Some(*i as f64),
            TypedValue::Decimal(x) => Some(*x),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::Value;
        match self {
            TypedValue::Date(d) => Value::String(d.format("%Y-%m-%d").to_string()),
            TypedValue::Integer(i) => Value::from(*i),
            TypedValue::Decimal(x) => Value::from(*x),
            TypedValue::Categorical(s) | TypedValue::Text(s) => Value::String(s.clone()),
            TypedValue::Boolean(b) => Value::Bool(*b),
        }
    }
}

impl fmt::Display for TypedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypedValue::Date(d) => write!(f, "{}", d.format("%Y-%m-%d")),
            TypedValue::Integer(i) => write!(f, "{i}"),
            TypedValue::Decimal(x) => write!(f, "{x}"),
            TypedValue::Categorical(s) | TypedValue::Text(s) => f.write_str(s),
            TypedValue::Boolean(b) => write!(f, "{b}"),
        }
    }
}

impl Serialize for TypedValue {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

/// Parses a calendar date in `YYYY-MM-DD` form.
pub fn parse_iso_date(raw: &str) -> Result<NaiveDate, ValidationError> {
    let s = raw.trim();
    if s.contains('?') {
        return Err(ValidationError::PartialDate(s.to_string()));
    }
    let bytes = s.as_bytes();
    if bytes.len() != 10 || bytes[4] != b'-' || bytes[7] != b'-' {
        return Err(ValidationError::Date(s.to_string()));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| ValidationError::Date(s.to_string()))
}

/// Converts a raw string into a value of the attribute's type.
///
/// Categorical input is matched against the value set after
/// canonicalization and the canonical member is returned.
pub fn validate_value(spec: &AttributeSpec, raw: &str) -> Result<TypedValue, ValidationError> {
    let s = raw.trim();
    match &spec.ty {
        AttributeType::Date => parse_iso_date(s).map(TypedValue::Date),
        AttributeType::Integer => s
            .parse::<i64>()
            .map(TypedValue::Integer)
            .map_err(|_| ValidationError::Integer(s.to_string())),
        AttributeType::Decimal => match s.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(TypedValue::Decimal(x)),
            _ => Err(ValidationError::Decimal(s.to_string())),
        },
        AttributeType::Categorical(values) => {
            let wanted = spec.canonicalize(s);
            values
                .iter()
                .find(|v| spec.canonicalize(v) == wanted)
                .map(|v| TypedValue::Categorical(v.clone()))
                .ok_or_else(|| ValidationError::NotInValueSet {
                    attribute: spec.name.clone(),
                    value: s.to_string(),
                })
        }
        AttributeType::Text => Ok(TypedValue::Text(s.to_string())),
        AttributeType::Boolean => match canonicalize(s).as_str() {
            "true" | "yes" | "y" => Ok(TypedValue::Boolean(true)),
            "false" | "no" | "n" => Ok(TypedValue::Boolean(false)),
            _ => Err(ValidationError::Boolean(s.to_string())),
        },
    }
}

/// Converts a JSON value into an optional typed value; `null` and blank
/// strings mean "not found".
pub fn validate_json_value(
    spec: &AttributeSpec,
    value: &serde_json::Value,
) -> Result<Option<TypedValue>, ValidationError> {
    use serde_json::Value;
    let wrong = |found| ValidationError::JsonType {
        attribute: spec.name.clone(),
        found,
    };
    match value {
        Value::Null => Ok(None),
        Value::String(s) if s.trim().is_empty() => Ok(None),
        Value::String(s) => validate_value(spec, s).map(Some),
        Value::Number(n) => match spec.kind() {
            AttributeKind::Integer => n
                .as_i64()
                .map(|i| Some(TypedValue::Integer(i)))
                .ok_or_else(|| ValidationError::Integer(n.to_string())),
            AttributeKind::Decimal => n
                .as_f64()
                .map(|x| Some(TypedValue::Decimal(x)))
                .ok_or_else(|| ValidationError::Decimal(n.to_string())),
            AttributeKind::Date | AttributeKind::Boolean => Err(wrong("number")),
            AttributeKind::Text | AttributeKind::Categorical => {
                validate_value(spec, &n.to_string()).map(Some)
            }
        },
        Value::Bool(b) => match spec.kind() {
            AttributeKind::Boolean => Ok(Some(TypedValue::Boolean(*b))),
            _ => Err(wrong("boolean")),
        },
        Value::Array(_) => Err(wrong("array")),
        Value::Object(_) => Err(wrong("object")),
    }
}

/// Checks that an already-typed value conforms to its attribute.
pub fn check_typed(spec: &AttributeSpec, value: &TypedValue) -> Result<(), ValidationError> {
    if value.kind() != spec.kind() {
        return Err(ValidationError::TypeMismatch {
            attribute: spec.name.clone(),
            expected: spec.kind(),
            found: value.kind(),
        });
    }
    if let (TypedValue::Categorical(v), Some(values)) = (value, spec.ty.value_set()) {
        if !values.iter().any(|m| m == v) {
            return Err(ValidationError::NotInValueSet {
                attribute: spec.name.clone(),
                value: v.clone(),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Instances and records
// ---------------------------------------------------------------------------

/// Character span in a source document that supports an extracted value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub document_id: String,
    pub chunk_index: usize,
    pub char_start: usize,
    pub char_end: usize,
}

pub type AttributeMap = BTreeMap<String, Option<TypedValue>>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityInstance {
    pub instance_id: String,
    pub entity_type: String,
    pub attributes: AttributeMap,
    #[serde(default)]
    pub provenance: Vec<Provenance>,
}

impl EntityInstance {
    /// Builds an instance whose id is derived from its content.
    pub fn new(entity_type: impl Into<String>, attributes: AttributeMap, provenance: Vec<Provenance>) -> Self {
        let entity_type = entity_type.into();
        let instance_id = content_id(&entity_type, &attributes);
        EntityInstance {
            instance_id,
            entity_type,
            attributes,
            provenance,
        }
    }

    pub fn value(&self, attribute: &str) -> Option<&TypedValue> {
        self.attributes.get(attribute).and_then(Option::as_ref)
    }

    pub fn non_null(&self) -> impl Iterator<Item = (&str, &TypedValue)> {
        self.attributes
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.as_str(), v)))
    }

    pub fn refresh_id(&mut self) {
        self.instance_id = content_id(&self.entity_type, &self.attributes);
    }
}

/// Stable 64-bit content fingerprint of an entity's attribute values.
pub fn content_id(entity_type: &str, attributes: &AttributeMap) -> String {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(entity_type.as_bytes());
    for (k, v) in attributes {
        if let Some(v) = v {
            h.write(&[0]);
            h.write(k.as_bytes());
            h.write(&[1]);
            h.write(v.to_json().to_string().as_bytes());
        }
    }
    format!("{:016x}", h.finish())
}

/// Wire form of an instance, before typing against the registry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawInstance {
    #[serde(default)]
    pub instance_id: Option<String>,
    pub entity_type: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub provenance: Vec<Provenance>,
}

impl RawInstance {
    /// Types every attribute against the registry.
    pub fn into_instance(self, registry: &SchemaRegistry) -> Result<EntityInstance, ValidationError> {
        let spec = registry
            .get(&self.entity_type)
            .ok_or_else(|| ValidationError::UnknownEntity(self.entity_type.clone()))?;
        let mut attributes = AttributeMap::new();
        for (key, value) in &self.attributes {
            let attr = spec
                .attribute(key)
                .ok_or_else(|| ValidationError::UnknownAttribute {
                    entity: spec.name.clone(),
                    attribute: key.clone(),
                })?;
            let typed = validate_json_value(attr, value).map_err(|e| ValidationError::Attribute {
                attribute: key.clone(),
                source: Box::new(e),
            })?;
            attributes.insert(key.clone(), typed);
        }
        let mut inst = EntityInstance::new(spec.name.clone(), attributes, self.provenance);
        if let Some(id) = self.instance_id {
            inst.instance_id = id;
        }
        Ok(inst)
    }
}

/// Checks an instance against the registry, returning it with the entity
/// type normalized to its canonical name.
pub fn validate_instance(
    registry: &SchemaRegistry,
    inst: EntityInstance,
) -> Result<EntityInstance, ValidationError> {
    let spec = registry
        .get(&inst.entity_type)
        .ok_or_else(|| ValidationError::UnknownEntity(inst.entity_type.clone()))?;
    validate_instance_against(spec, &inst)?;
    Ok(EntityInstance {
        entity_type: spec.name.clone(),
        ..inst
    })
}

/// Checks attribute names and value types against one entity type.
pub fn validate_instance_against(spec: &EntityTypeSpec, inst: &EntityInstance) -> Result<(), ValidationError> {
    for (key, value) in &inst.attributes {
        let attr = spec
            .attribute(key)
            .ok_or_else(|| ValidationError::UnknownAttribute {
                entity: spec.name.clone(),
                attribute: key.clone(),
            })?;
        if let Some(v) = value {
            check_typed(attr, v)?;
        }
    }
    Ok(())
}

/// Structured output for one patient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub instances: Vec<EntityInstance>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPatientRecord {
    pub patient_id: String,
    #[serde(default)]
    pub instances: Vec<RawInstance>,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("malformed record: {0}")]
    Json(#[from] serde_json::Error),
    #[error("instance {index}: {source}")]
    Instance {
        index: usize,
        #[source]
        source: ValidationError,
    },
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>) -> Self {
        PatientRecord {
            patient_id: patient_id.into(),
            instances: Vec::new(),
        }
    }

    /// Parses a record file and types it against the registry.
    pub fn from_json(source: &str, registry: &SchemaRegistry) -> Result<Self, RecordError> {
        let raw: RawPatientRecord = serde_json::from_str(source)?;
        let mut ids = BTreeSet::new();
        let mut instances = Vec::with_capacity(raw.instances.len());
        for (index, r) in raw.instances.into_iter().enumerate() {
            let inst = r
                .into_instance(registry)
                .map_err(|source| RecordError::Instance { index, source })?;
            if !ids.insert(inst.instance_id.clone()) {
                return Err(RecordError::DuplicateId(inst.instance_id));
            }
            instances.push(inst);
        }
        Ok(PatientRecord {
            patient_id: raw.patient_id,
            instances,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn of_type<'a>(&'a self, entity: &'a str) -> impl Iterator<Item = &'a EntityInstance> + 'a {
        self.instances.iter().filter(move |i| i.entity_type == entity)
    }

    pub fn find(&self, instance_id: &str) -> Option<&EntityInstance> {
        self.instances.iter().find(|i| i.instance_id == instance_id)
    }

    /// Instance ids must be unique within a record.
    pub fn has_unique_ids(&self) -> bool {
        let mut ids = BTreeSet::new();
        self.instances.iter().all(|i| ids.insert(&i.instance_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn categorical(values: &[&str]) -> AttributeSpec {
        AttributeSpec::new(
            "interpretation",
            AttributeType::Categorical(values.iter().map(|s| s.to_string()).collect()),
        )
    }

    fn schema(entities: serde_json::Value) -> String {
        json!({ "entities": entities }).to_string()
    }

    #[test]
    fn bundled_registry_has_every_entity() {
        let reg = SchemaRegistry::bundled();
        assert_eq!(reg.len(), 16);
        assert_eq!(reg.attribute_count(), 100);
        let biomarker = reg.get("Biomarker").unwrap();
        assert!(biomarker.attribute("biomarker_tested").is_some());
        assert_eq!(biomarker.driver(), "biomarker_tested");
        assert!(biomarker.driver_spec().required);
        assert_eq!(reg.get("CancerRelatedMedication").unwrap().name, "Medication");
    }

    #[test]
    fn bundled_weighted_entities_have_unit_weights() {
        for spec in SchemaRegistry::bundled().entities() {
            if let AlignmentScheme::Weighted { driver, .. } = &spec.alignment {
                let weights: Vec<_> = spec.attributes.iter().filter_map(|a| a.weight).collect();
                let sum: f64 = weights.iter().sum();
                assert!((sum - 1.0).abs() <= WEIGHT_SUM_TOLERANCE, "{}", spec.name);
                let max = weights.iter().cloned().fold(0.0, f64::max);
                assert_eq!(spec.attribute(driver).unwrap().weight, Some(max));
            } else {
                assert!(spec.attributes.iter().all(|a| a.weight.is_none()));
            }
        }
    }

    #[test]
    fn empty_entity_list_is_rejected() {
        assert!(matches!(load_schema(&schema(json!([]))), Err(SchemaError::NoEntities)));
    }

    #[test]
    fn two_cycle_is_rejected() {
        let src = schema(json!([
            {"name": "Medication", "alignment": {"scheme": "root", "root": "m"},
             "depends_on": ["Diagnosis"], "attributes": [{"name": "m", "type": "text"}]},
            {"name": "Diagnosis", "alignment": {"scheme": "root", "root": "d"},
             "depends_on": ["Medication"], "attributes": [{"name": "d", "type": "text"}]}
        ]));
        match load_schema(&src) {
            Err(SchemaError::DependencyCycle(path)) => {
                assert!(path.contains(&"Medication".to_string()));
                assert!(path.contains(&"Diagnosis".to_string()));
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn load_errors() {
        let dup_attr = schema(json!([{"name": "A", "alignment": {"scheme": "root", "root": "x"},
            "attributes": [{"name": "x", "type": "text"}, {"name": "x", "type": "date"}]}]));
        assert!(matches!(load_schema(&dup_attr), Err(SchemaError::DuplicateAttribute { .. })));

        let no_values = schema(json!([{"name": "A", "alignment": {"scheme": "root", "root": "x"},
            "attributes": [{"name": "x", "type": "categorical"}]}]));
        assert!(matches!(load_schema(&no_values), Err(SchemaError::MissingValueSet { .. })));

        let bad_sum = schema(json!([{"name": "A",
            "alignment": {"scheme": "weighted", "threshold": 0.9, "weights": {"x": 0.5, "y": 0.4}},
            "attributes": [{"name": "x", "type": "date"}, {"name": "y", "type": "text"}]}]));
        assert!(matches!(load_schema(&bad_sum), Err(SchemaError::WeightSum { .. })));

        let tie = schema(json!([{"name": "A",
            "alignment": {"scheme": "weighted", "threshold": 0.9, "weights": {"x": 0.5, "y": 0.5}},
            "attributes": [{"name": "x", "type": "date"}, {"name": "y", "type": "text"}]}]));
        assert!(matches!(load_schema(&tie), Err(SchemaError::AmbiguousDriver(_))));

        let dup_entity = schema(json!([
            {"name": "A", "alignment": {"scheme": "root", "root": "x"}, "attributes": [{"name": "x", "type": "text"}]},
            {"name": "A", "alignment": {"scheme": "root", "root": "x"}, "attributes": [{"name": "x", "type": "text"}]}
        ]));
        assert!(matches!(load_schema(&dup_entity), Err(SchemaError::DuplicateEntity(_))));

        let unknown_dep = schema(json!([{"name": "A", "alignment": {"scheme": "root", "root": "x"},
            "depends_on": ["B"], "attributes": [{"name": "x", "type": "text"}]}]));
        assert!(matches!(load_schema(&unknown_dep), Err(SchemaError::UnknownDependency { .. })));
    }

    #[test]
    fn categorical_canonicalization() {
        let spec = categorical(&["Positive", "Negative"]);
        assert_eq!(
            validate_value(&spec, " positive ").unwrap(),
            TypedValue::Categorical("Positive".into())
        );
        assert!(matches!(
            validate_value(&spec, "Maybe"),
            Err(ValidationError::NotInValueSet { .. })
        ));
    }

    #[test]
    fn scalar_validation() {
        let date = AttributeSpec::new("d", AttributeType::Date);
        assert_eq!(
            validate_value(&date, "2019-02-11").unwrap(),
            TypedValue::Date(NaiveDate::from_ymd_opt(2019, 2, 11).unwrap())
        );
        assert!(validate_value(&date, "2019-02-30").is_err());
        assert!(matches!(validate_value(&date, "2019-02-??"), Err(ValidationError::PartialDate(_))));
        let int = AttributeSpec::new("i", AttributeType::Integer);
        assert!(matches!(validate_value(&int, "abc"), Err(ValidationError::Integer(_))));
        assert_eq!(validate_value(&int, " 42").unwrap(), TypedValue::Integer(42));
        let dec = AttributeSpec::new("x", AttributeType::Decimal);
        assert!(validate_value(&dec, "NaN").is_err());
        let b = AttributeSpec::new("b", AttributeType::Boolean);
        assert_eq!(validate_value(&b, "Yes").unwrap(), TypedValue::Boolean(true));
    }

    #[test]
    fn compact_canonicalization_ignores_spacing() {
        let reg = SchemaRegistry::bundled();
        let stage = reg.get("Staging").unwrap().attribute("stage_value").unwrap();
        assert_eq!(stage.canonicalize("pT2 N0 M0"), stage.canonicalize("pT2N0M0"));
        assert_ne!(stage.canonicalize("cT2N0M0"), stage.canonicalize("pT2N0M0"));
    }

    #[test]
    fn instance_validation() {
        let reg = SchemaRegistry::bundled();
        let mut attrs = AttributeMap::new();
        attrs.insert("biomarker_tested".into(), Some(TypedValue::Text("BRAF".into())));
        let ok = EntityInstance::new("Biomarker", attrs, vec![]);
        assert!(validate_instance(&reg, ok).is_ok());

        let mut attrs = AttributeMap::new();
        attrs.insert("unknown_field".into(), Some(TypedValue::Text("x".into())));
        let bad = EntityInstance::new("Biomarker", attrs, vec![]);
        assert!(matches!(
            validate_instance(&reg, bad),
            Err(ValidationError::UnknownAttribute { .. })
        ));

        let mut attrs = AttributeMap::new();
        attrs.insert("stage_value".into(), Some(TypedValue::Integer(2)));
        let mismatch = EntityInstance::new("Staging", attrs, vec![]);
        assert!(matches!(
            validate_instance(&reg, mismatch),
            Err(ValidationError::TypeMismatch { .. })
        ));

        let unknown = EntityInstance::new("Foo", AttributeMap::new(), vec![]);
        assert!(matches!(validate_instance(&reg, unknown), Err(ValidationError::UnknownEntity(_))));
    }

    #[test]
    fn record_json_round_trip() {
        let reg = SchemaRegistry::bundled();
        let src = json!({"patient_id": "p1", "instances": [
            {"entity_type": "Medication", "attributes": {"medication": "Nivolumab", "start_date": "2019-03-01", "baseline_cycle_length": 14}}
        ]})
        .to_string();
        let rec = PatientRecord::from_json(&src, &reg).unwrap();
        let again = PatientRecord::from_json(&rec.to_json(), &reg).unwrap();
        assert_eq!(rec, again);
    }

    #[test]
    fn schema_serialization_round_trips() {
        let reg = SchemaRegistry::bundled();
        assert_eq!(load_schema(&reg.to_json()).unwrap(), reg);
    }
}
