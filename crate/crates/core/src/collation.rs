//! Deterministic post-processing of partial extractions.
//!
//! A [`CollatorChain`] applies its rules strictly in order. Every rule is
//! written so that collation is idempotent and independent of input order:
//! grouping uses canonical keys, and merged attribute values are chosen by
//! document date and then by value, never by arrival order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{
    self, AttributeKind, AttributeMap, EntityInstance, EntityTypeSpec, Provenance, SchemaRegistry,
    TypedValue, ValidationError,
};

/// Pseudo-source for end-date inference: the latest date seen among the
/// instances merged into one.
pub const LAST_ADMINISTRATION: &str = "last_administration";

// ---------------------------------------------------------------------------
// Dependency graph
// ---------------------------------------------------------------------------

/// Edges point from an entity to the entities it depends on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DependencyGraph {
    edges: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("dependency cycle: {}", .0.join(" -> "))]
pub struct CycleError(pub Vec<String>);

impl DependencyGraph {
    pub fn add_node(&mut self, node: &str) {
        self.edges.entry(node.to_string()).or_default();
    }

    /// Records that `from` depends on `to`.
    pub fn add_edge(&mut self, from: &str, to: &str) {
        self.add_node(to);
        self.edges
            .entry(from.to_string())
            .or_default()
            .insert(to.to_string());
    }

    pub fn dependencies(&self, node: &str) -> impl Iterator<Item = &str> {
        self.edges.get(node).into_iter().flatten().map(String::as_str)
    }

    /// Orders nodes so each follows everything it depends on; ties are
    /// broken lexicographically.
    pub fn topo_order(&self) -> Result<Vec<String>, CycleError> {
        let mut placed: BTreeSet<&str> = BTreeSet::new();
        let mut order = Vec::with_capacity(self.edges.len());
        while order.len() < self.edges.len() {
            let next = self
                .edges
                .iter()
                .find(|(n, deps)| {
                    !placed.contains(n.as_str()) && deps.iter().all(|d| placed.contains(d.as_str()))
                })
                .map(|(n, _)| n.as_str());
            match next {
                Some(n) => {
                    placed.insert(n);
                    order.push(n.to_string());
                }
                None => return Err(CycleError(self.find_cycle(&placed))),
            }
        }
        Ok(order)
    }

    fn find_cycle(&self, placed: &BTreeSet<&str>) -> Vec<String> {
        // Every unplaced node has an unplaced dependency, so walking those
        // edges must revisit a node.
        let start = self
            .edges
            .keys()
            .find(|n| !placed.contains(n.as_str()))
            .expect("an unplaced node exists");
        let mut path: Vec<&str> = vec![start];
        loop {
            let cur = *path.last().unwrap();
            let next = self.edges[cur]
                .iter()
                .find(|d| !placed.contains(d.as_str()))
                .expect("unplaced node has an unplaced dependency");
            if let Some(pos) = path.iter().position(|p| p == next) {
                let mut cycle: Vec<String> = path[pos..].iter().map(|s| s.to_string()).collect();
                cycle.push(next.clone());
                return cycle;
            }
            path.push(next);
        }
    }
}

/// Orders entities so that every entity follows all of its dependencies.
pub fn topo_order(graph: &DependencyGraph) -> Result<Vec<String>, CycleError> {
    graph.topo_order()
}

// ---------------------------------------------------------------------------
// Rules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
}

impl Comparator {
    fn as_str(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            Comparator::Lt => ord == Ordering::Less,
            Comparator::Le => ord != Ordering::Greater,
            Comparator::Gt => ord == Ordering::Greater,
            Comparator::Ge => ord != Ordering::Less,
        }
    }
}

/// `attribute <cmp> today + offset_days`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    pub attribute: String,
    pub comparator: Comparator,
    pub offset_days: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CollationRule {
    /// Unify instances sharing the root value and every date value.
    DedupByRoot { attribute: String },
    /// Per driver value keep only the instance with the latest date.
    PreferLatest { date_attribute: String },
    /// Merge instances whose key matches and whose dates chain within the window.
    MergeWithinWindow {
        key_attribute: String,
        date_attribute: String,
        window_days: u32,
    },
    /// Fill `target` from the latest `source` date among merged instances.
    InferEndFromLast { source: String, target: String },
    ConditionalSet {
        target_attribute: String,
        value: String,
        condition: Condition,
    },
    /// Drop instances dated before the earliest date of a dependency entity.
    RequireAfter {
        date_attribute: String,
        dependency: String,
        dependency_attribute: String,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum CollationError {
    #[error("cannot parse collation rule `{rule}`: {reason}")]
    Parse { rule: String, reason: &'static str },
    #[error("rule `{rule}` references unknown attribute `{attribute}` of `{entity}`")]
    UnknownAttribute {
        rule: String,
        entity: String,
        attribute: String,
    },
    #[error("rule `{rule}`: attribute `{attribute}` must be a {expected} attribute")]
    AttributeKind {
        rule: String,
        attribute: String,
        expected: &'static str,
    },
    #[error("rule `{rule}`: {source}")]
    Value {
        rule: String,
        #[source]
        source: ValidationError,
    },
    #[error("rule `{rule}`: `{entity}` does not declare a dependency on `{dependency}`")]
    UndeclaredDependency {
        rule: String,
        entity: String,
        dependency: String,
    },
    #[error("unknown entity type `{0}`")]
    UnknownEntity(String),
    #[error("collating `{entity}` requires `{dependency}` instances but none were provided")]
    MissingDependency { entity: String, dependency: String },
    #[error("input instance is of type `{found}`, chain collates `{expected}`")]
    EntityMismatch { expected: String, found: String },
    #[error("invalid input instance: {0}")]
    Invalid(#[from] ValidationError),
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parses the `N` of an `Nd` day count.
fn parse_days(s: &str) -> Option<u32> {
    s.strip_suffix('d')?.parse().ok()
}

/// Parses a rule string. Attribute names are checked later, when the rule
/// is bound to an entity.
pub fn parse_rule(text: &str) -> Result<CollationRule, CollationError> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let err = |reason| CollationError::Parse {
        rule: text.to_string(),
        reason,
    };
    let ident = |s: &str| if is_ident(s) { Ok(s.to_string()) } else { Err(err("expected an attribute name")) };

    if let Some((head, arg)) = compact.split_once(':') {
        return match head {
            "deduplicate_by_root" | "dedupe_by_root" | "dedup_by_root" => Ok(CollationRule::DedupByRoot {
                attribute: ident(arg)?,
            }),
            "prefer_latest" => Ok(CollationRule::PreferLatest {
                date_attribute: ident(arg)?,
            }),
            _ => {
                if let Some(date_attribute) = head.strip_prefix("require_").and_then(|h| h.strip_suffix("_after")) {
                    let (entity, attribute) = arg.split_once('.').ok_or_else(|| err("expected <Entity>.<attribute>"))?;
                    if entity.is_empty() {
                        return Err(err("expected an entity name"));
                    }
                    Ok(CollationRule::RequireAfter {
                        date_attribute: ident(date_attribute)?,
                        dependency: entity.to_string(),
                        dependency_attribute: ident(attribute)?,
                    })
                } else {
                    Err(err("unknown rule"))
                }
            }
        };
    }

    if let Some(rest) = compact.strip_prefix("merge_if_") {
        let (attrs, days) = rest.split_once("<=").ok_or_else(|| err("expected `<=Nd` window"))?;
        let window_days = parse_days(days).ok_or_else(|| err("expected a day count like `7d`"))?;
        let (key, date) = attrs.split_once("_and_").ok_or_else(|| err("expected `<key>_and_<date>`"))?;
        return Ok(CollationRule::MergeWithinWindow {
            key_attribute: ident(key)?,
            date_attribute: ident(date)?,
            window_days,
        });
    }

    if let Some(rest) = compact.strip_prefix("infer_") {
        let (target, source) = rest.split_once("_from_").ok_or_else(|| err("expected `infer_<target>_from_<source>`"))?;
        return Ok(CollationRule::InferEndFromLast {
            source: ident(source)?,
            target: ident(target)?,
        });
    }

    if let Some(rest) = compact.strip_prefix("set_") {
        let (head, cond) = rest.split_once("_if_").ok_or_else(|| err("expected `_if_` condition"))?;
        let (target, value) = head.rsplit_once('_').ok_or_else(|| err("expected `set_<attr>_<value>`"))?;
        let op_at = cond.find(['<', '>']).ok_or_else(|| err("expected a comparison"))?;
        let attribute = ident(&cond[..op_at])?;
        let tail = &cond[op_at..];
        let (comparator, reference) = if let Some(r) = tail.strip_prefix("<=") {
            (Comparator::Le, r)
        } else if let Some(r) = tail.strip_prefix(">=") {
            (Comparator::Ge, r)
        } else if let Some(r) = tail.strip_prefix('<') {
            (Comparator::Lt, r)
        } else {
            (Comparator::Gt, &tail[1..])
        };
        let offset_days = if reference == "today" {
            0
        } else if let Some(d) = reference.strip_prefix("today-") {
            -(parse_days(d).ok_or_else(|| err("expected `today-Nd`"))? as i64)
        } else if let Some(d) = reference.strip_prefix("today+") {
            parse_days(d).ok_or_else(|| err("expected `today+Nd`"))? as i64
        } else {
            return Err(err("comparison reference must be relative to `today`"));
        };
        if value.is_empty() {
            return Err(err("empty value"));
        }
        return Ok(CollationRule::ConditionalSet {
            target_attribute: ident(target)?,
            value: value.to_string(),
            condition: Condition {
                attribute,
                comparator,
                offset_days,
            },
        });
    }

    Err(err("unknown rule"))
}

impl FromStr for CollationRule {
    type Err = CollationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_rule(s)
    }
}

impl fmt::Display for CollationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CollationRule::DedupByRoot { attribute } => write!(f, "deduplicate_by_root: {attribute}"),
            CollationRule::PreferLatest { date_attribute } => write!(f, "prefer_latest: {date_attribute}"),
            CollationRule::MergeWithinWindow {
                key_attribute,
                date_attribute,
                window_days,
            } => write!(f, "merge_if_{key_attribute}_and_{date_attribute}<={window_days}d"),
            CollationRule::InferEndFromLast { source, target } => write!(f, "infer_{target}_from_{source}"),
            CollationRule::ConditionalSet {
                target_attribute,
                value,
                condition,
            } => {
                write!(
                    f,
                    "set_{target_attribute}_{value}_if_{}{}today",
                    condition.attribute,
                    condition.comparator.as_str()
                )?;
                match condition.offset_days.cmp(&0) {
                    Ordering::Less => write!(f, "-{}d", -condition.offset_days),
                    Ordering::Greater => write!(f, "+{}d", condition.offset_days),
                    Ordering::Equal => Ok(()),
                }
            }
            CollationRule::RequireAfter {
                date_attribute,
                dependency,
                dependency_attribute,
            } => write!(f, "require_{date_attribute}_after: {dependency}.{dependency_attribute}"),
        }
    }
}

impl Serialize for CollationRule {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CollationRule {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_rule(&s).map_err(serde::de::Error::custom)
    }
}

impl CollationRule {
    /// Resolves attribute names and aliases against an entity, returning
    /// the rule with canonical attribute names.
    pub fn bind(&self, spec: &EntityTypeSpec, registry: &SchemaRegistry) -> Result<CollationRule, CollationError> {
        let rule = self.to_string();
        let resolve = |name: &str| -> Result<&schema::AttributeSpec, CollationError> {
            spec.resolve_attribute(name).ok_or_else(|| CollationError::UnknownAttribute {
                rule: rule.clone(),
                entity: spec.name.clone(),
                attribute: name.to_string(),
            })
        };
        let date = |name: &str| -> Result<String, CollationError> {
            let a = resolve(name)?;
            if a.kind() != AttributeKind::Date {
                return Err(CollationError::AttributeKind {
                    rule: rule.clone(),
                    attribute: a.name.clone(),
                    expected: "date",
                });
            }
            Ok(a.name.clone())
        };

        Ok(match self {
            CollationRule::DedupByRoot { attribute } => CollationRule::DedupByRoot {
                attribute: resolve(attribute)?.name.clone(),
            },
            CollationRule::PreferLatest { date_attribute } => CollationRule::PreferLatest {
                date_attribute: date(date_attribute)?,
            },
            CollationRule::MergeWithinWindow {
                key_attribute,
                date_attribute,
                window_days,
            } => CollationRule::MergeWithinWindow {
                key_attribute: resolve(key_attribute)?.name.clone(),
                date_attribute: date(date_attribute)?,
                window_days: *window_days,
            },
            CollationRule::InferEndFromLast { source, target } => CollationRule::InferEndFromLast {
                source: if source == LAST_ADMINISTRATION {
                    source.clone()
                } else {
                    date(source)?
                },
                target: date(target)?,
            },
            CollationRule::ConditionalSet {
                target_attribute,
                value,
                condition,
            } => {
                // `set_a_b_c_if_...` splits at the last underscore when parsed;
                // re-split so the longest attribute-name prefix wins.
                let joined = format!("{target_attribute}_{value}");
                let (target, value) = joined
                    .match_indices('_')
                    .map(|(i, _)| (&joined[..i], &joined[i + 1..]))
                    .filter(|(t, v)| !v.is_empty() && spec.resolve_attribute(t).is_some())
                    .max_by_key(|(t, _)| t.len())
                    .ok_or_else(|| CollationError::UnknownAttribute {
                        rule: rule.clone(),
                        entity: spec.name.clone(),
                        attribute: target_attribute.clone(),
                    })?;
                let target_spec = resolve(target)?;
                if target_spec.kind() == AttributeKind::Date || target_spec.name == spec.driver() {
                    return Err(CollationError::AttributeKind {
                        rule: rule.clone(),
                        attribute: target_spec.name.clone(),
                        expected: "non-date, non-driver",
                    });
                }
                let typed = schema::validate_value(target_spec, &value.replace('_', " ")).map_err(|source| {
                    CollationError::Value {
                        rule: rule.clone(),
                        source,
                    }
                })?;
                CollationRule::ConditionalSet {
                    target_attribute: target_spec.name.clone(),
                    value: typed.to_string(),
                    condition: Condition {
                        attribute: date(&condition.attribute)?,
                        ..condition.clone()
                    },
                }
            }
            CollationRule::RequireAfter {
                date_attribute,
                dependency,
                dependency_attribute,
            } => {
                let dep = registry
                    .get(dependency)
                    .ok_or_else(|| CollationError::UnknownEntity(dependency.clone()))?;
                if !spec.depends_on.iter().any(|d| d == &dep.name) {
                    return Err(CollationError::UndeclaredDependency {
                        rule,
                        entity: spec.name.clone(),
                        dependency: dep.name.clone(),
                    });
                }
                let dep_attr = dep.resolve_attribute(dependency_attribute).ok_or_else(|| {
                    CollationError::UnknownAttribute {
                        rule: rule.clone(),
                        entity: dep.name.clone(),
                        attribute: dependency_attribute.clone(),
                    }
                })?;
                if dep_attr.kind() != AttributeKind::Date {
                    return Err(CollationError::AttributeKind {
                        rule,
                        attribute: dep_attr.name.clone(),
                        expected: "date",
                    });
                }
                CollationRule::RequireAfter {
                    date_attribute: date(date_attribute)?,
                    dependency: dep.name.clone(),
                    dependency_attribute: dep_attr.name.clone(),
                }
            }
        })
    }

    /// The dependency entity this rule reads, if any.
    pub fn dependency(&self) -> Option<&str> {
        match self {
            CollationRule::RequireAfter { dependency, .. } => Some(dependency),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Chain execution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingDependencyPolicy {
    Error,
    #[default]
    PassThrough,
}

/// Auxiliary inputs to a collation run.
#[derive(Debug, Clone)]
pub struct CollationContext {
    /// Reference date for `today`-relative conditions.
    pub today: NaiveDate,
    /// Collated instances of upstream entities, keyed by entity name.
    pub dependencies: BTreeMap<String, Vec<EntityInstance>>,
    /// Encounter dates of source documents, used to prefer later evidence.
    pub document_dates: BTreeMap<String, NaiveDate>,
    pub missing_dependency: MissingDependencyPolicy,
    /// Keep each output instance's provenance within a single document.
    pub single_lineage: bool,
}

impl CollationContext {
    pub fn new(today: NaiveDate) -> Self {
        CollationContext {
            today,
            dependencies: BTreeMap::new(),
            document_dates: BTreeMap::new(),
            missing_dependency: MissingDependencyPolicy::default(),
            single_lineage: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct AuditEntry {
    pub rule: String,
    pub action: AuditAction,
    pub instance_ids: Vec<String>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Merged,
    DiscardedValue,
    Dropped,
    Set,
    Warning,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CollationOutput {
    pub instances: Vec<EntityInstance>,
    pub audit: Vec<AuditEntry>,
}

/// An ordered list of bound rules for one entity type.
#[derive(Debug, Clone)]
pub struct CollatorChain {
    pub entity: EntityTypeSpec,
    pub rules: Vec<CollationRule>,
}

impl CollatorChain {
    pub fn new(registry: &SchemaRegistry, entity: &str, rules: &[CollationRule]) -> Result<Self, CollationError> {
        let spec = registry
            .get(entity)
            .ok_or_else(|| CollationError::UnknownEntity(entity.to_string()))?;
        let rules = rules
            .iter()
            .map(|r| r.bind(spec, registry))
            .collect::<Result<_, _>>()?;
        Ok(CollatorChain {
            entity: spec.clone(),
            rules,
        })
    }
}

/// A working instance plus the original instances folded into it.
#[derive(Debug, Clone)]
struct Group {
    inst: EntityInstance,
    members: Vec<EntityInstance>,
}

struct Run<'a> {
    spec: &'a EntityTypeSpec,
    ctx: &'a CollationContext,
    audit: Vec<AuditEntry>,
}

/// Merges, validates, deduplicates and conflict-resolves a set of
/// extractions into final instances.
pub fn collate(
    chain: &CollatorChain,
    ctx: &CollationContext,
    inputs: Vec<EntityInstance>,
) -> Result<CollationOutput, CollationError> {
    let spec = &chain.entity;
    let mut run = Run {
        spec,
        ctx,
        audit: Vec::new(),
    };

    let mut validated = Vec::with_capacity(inputs.len());
    for inst in inputs {
        if inst.entity_type != spec.name && !spec.aliases.contains(&inst.entity_type) {
            return Err(CollationError::EntityMismatch {
                expected: spec.name.clone(),
                found: inst.entity_type,
            });
        }
        let mut inst = inst;
        inst.entity_type = spec.name.clone();
        for (key, value) in &inst.attributes {
            let attr = spec.attribute(key).ok_or_else(|| ValidationError::UnknownAttribute {
                entity: spec.name.clone(),
                attribute: key.clone(),
            })?;
            if let Some(v) = value {
                schema::check_typed(attr, v)?;
            }
        }
        validated.push(inst);
    }

    let mut groups = run.collapse_identical(validated.into_iter().map(|inst| Group {
        members: vec![inst.clone()],
        inst,
    }));

    for rule in &chain.rules {
        let label = rule.to_string();
        groups = match rule {
            CollationRule::DedupByRoot { attribute } => run.dedup_by_root(&label, groups, attribute),
            CollationRule::PreferLatest { date_attribute } => run.prefer_latest(&label, groups, date_attribute),
            CollationRule::MergeWithinWindow {
                key_attribute,
                date_attribute,
                window_days,
            } => run.merge_within_window(&label, groups, key_attribute, date_attribute, *window_days),
            CollationRule::InferEndFromLast { source, target } => run.infer_from_last(&label, groups, source, target),
            CollationRule::ConditionalSet {
                target_attribute,
                value,
                condition,
            } => run.conditional_set(&label, groups, target_attribute, value, condition),
            CollationRule::RequireAfter {
                date_attribute,
                dependency,
                dependency_attribute,
            } => run.require_after(&label, groups, date_attribute, dependency, dependency_attribute)?,
        };
    }

    let groups = run.collapse_identical(groups.into_iter().map(|mut g| {
        g.inst.refresh_id();
        g
    }));
    let mut instances: Vec<EntityInstance> = groups.into_iter().map(|g| g.inst).collect();
    for inst in &instances {
        schema::validate_instance_against(spec, inst)?;
    }
    instances.sort_by(|a, b| output_order(spec, a, b));
    // Sorted for input-order independence, keeping the chain's rule order.
    let labels: Vec<String> = chain.rules.iter().map(ToString::to_string).collect();
    let rank = |e: &AuditEntry| labels.iter().position(|l| *l == e.rule);
    let mut audit = run.audit;
    audit.sort_by(|a, b| (rank(a), a).cmp(&(rank(b), b)));
    audit.dedup();
    Ok(CollationOutput { instances, audit })
}

fn output_order(spec: &EntityTypeSpec, a: &EntityInstance, b: &EntityInstance) -> Ordering {
    let driver = spec.driver_spec();
    let key = |i: &EntityInstance| {
        let d = i.value(&driver.name).map(|v| match v {
            TypedValue::Categorical(s) | TypedValue::Text(s) => driver.canonicalize(s),
            other => other.to_string(),
        });
        let earliest = spec.date_attributes().filter_map(|a| i.value(&a.name)?.as_date()).min();
        // Missing values sort last.
        (d.is_none(), d, earliest.is_none(), earliest)
    };
    key(a).cmp(&key(b)).then_with(|| a.instance_id.cmp(&b.instance_id))
}

fn canonical_key(spec: &EntityTypeSpec, inst: &EntityInstance, attribute: &str) -> Option<String> {
    let attr = spec.attribute(attribute)?;
    inst.value(attribute).map(|v| match v {
        TypedValue::Categorical(s) | TypedValue::Text(s) => attr.canonicalize(s),
        other => other.to_string(),
    })
}

impl Run<'_> {
    /// Latest encounter date among an instance's source documents.
    fn evidence_date(&self, inst: &EntityInstance) -> Option<NaiveDate> {
        inst.provenance
            .iter()
            .filter_map(|p| self.ctx.document_dates.get(&p.document_id).copied())
            .max()
    }

    fn lineage_key(&self, inst: &EntityInstance) -> (bool, Option<NaiveDate>, String) {
        let first = inst.provenance.iter().min();
        let doc = first.map(|p| p.document_id.clone()).unwrap_or_default();
        let date = first.and_then(|p| self.ctx.document_dates.get(&p.document_id).copied());
        (date.is_none(), date, doc)
    }

    /// Collapses groups with identical attribute values.
    fn collapse_identical(&mut self, groups: impl Iterator<Item = Group>) -> Vec<Group> {
        let mut by_id: BTreeMap<String, Vec<Group>> = BTreeMap::new();
        for g in groups {
            by_id.entry(g.inst.instance_id.clone()).or_default().push(g);
        }
        by_id
            .into_values()
            .map(|gs| if gs.len() == 1 { gs.into_iter().next().unwrap() } else { self.merge("identical", gs, None) })
            .collect()
    }

    /// Folds several groups into one. `window` names the date attribute of
    /// a window merge: it takes the earliest value, and its `end`
    /// counterpart (start_date -> end_date) takes the latest.
    fn merge(&mut self, rule: &str, groups: Vec<Group>, window: Option<&str>) -> Group {
        let members: Vec<EntityInstance> = groups.iter().flat_map(|g| g.members.iter().cloned()).collect();
        let parts: Vec<EntityInstance> = groups.into_iter().map(|g| g.inst).collect();
        let end_attr = window.map(|w| w.replacen("start", "end", 1)).filter(|e| Some(e.as_str()) != window);

        let keys: BTreeSet<&String> = parts.iter().flat_map(|p| p.attributes.keys()).collect();
        let mut attributes = AttributeMap::new();
        let mut discarded = Vec::new();
        for key in keys {
            let mut candidates: Vec<(Option<NaiveDate>, String, &TypedValue)> = parts
                .iter()
                .filter_map(|p| p.value(key).map(|v| (self.evidence_date(p), v.to_json().to_string(), v)))
                .collect();
            candidates.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
            candidates.dedup_by(|a, b| a.1 == b.1);
            let chosen = if Some(key.as_str()) == window {
                candidates.iter().min_by_key(|c| c.2.as_date()).map(|c| c.2.clone())
            } else if end_attr.as_deref() == Some(key.as_str()) {
                candidates.iter().max_by_key(|c| c.2.as_date()).map(|c| c.2.clone())
            } else {
                candidates.last().map(|c| c.2.clone())
            };
            if candidates.len() > 1 {
                let chosen_json = chosen.as_ref().map(|v| v.to_json().to_string());
                for c in &candidates {
                    if Some(&c.1) != chosen_json.as_ref() {
                        discarded.push(format!("{key}={}", c.1));
                    }
                }
            }
            attributes.insert(key.clone(), chosen);
        }

        let provenance: Vec<Provenance> = if self.ctx.single_lineage {
            let primary = parts
                .iter()
                .min_by(|a, b| self.lineage_key(a).cmp(&self.lineage_key(b)))
                .expect("merge of at least one group");
            primary.provenance.clone()
        } else {
            parts.iter().flat_map(|p| p.provenance.iter().cloned()).collect()
        };
        let mut provenance = provenance;
        provenance.sort();
        provenance.dedup();

        let mut ids: Vec<String> = parts.iter().map(|p| p.instance_id.clone()).collect();
        ids.sort();
        self.audit.push(AuditEntry {
            rule: rule.to_string(),
            action: AuditAction::Merged,
            instance_ids: ids.clone(),
            detail: String::new(),
        });
        if !discarded.is_empty() {
            discarded.sort();
            self.audit.push(AuditEntry {
                rule: rule.to_string(),
                action: AuditAction::DiscardedValue,
                instance_ids: ids,
                detail: discarded.join("; "),
            });
        }
        Group {
            inst: EntityInstance::new(self.spec.name.clone(), attributes, provenance),
            members,
        }
    }

    fn dedup_by_root(&mut self, rule: &str, groups: Vec<Group>, attribute: &str) -> Vec<Group> {
        let spec = self.spec;
        let dates: Vec<&str> = spec.date_attributes().map(|a| a.name.as_str()).collect();
        let mut buckets: BTreeMap<(String, Vec<Option<NaiveDate>>), Vec<Group>> = BTreeMap::new();
        let mut out = Vec::new();
        for g in groups {
            match canonical_key(spec, &g.inst, attribute) {
                Some(root) => {
                    let key = dates.iter().map(|d| g.inst.value(d).and_then(TypedValue::as_date)).collect();
                    buckets.entry((root, key)).or_default().push(g);
                }
                None => out.push(g),
            }
        }
        for (_, gs) in buckets {
            out.push(if gs.len() == 1 { gs.into_iter().next().unwrap() } else { self.merge(rule, gs, None) });
        }
        out
    }

    fn prefer_latest(&mut self, rule: &str, groups: Vec<Group>, date_attribute: &str) -> Vec<Group> {
        let spec = self.spec;
        let mut buckets: BTreeMap<String, Vec<Group>> = BTreeMap::new();
        let mut out = Vec::new();
        for g in groups {
            match canonical_key(spec, &g.inst, spec.driver()) {
                Some(k) => buckets.entry(k).or_default().push(g),
                None => out.push(g),
            }
        }
        for (_, gs) in buckets {
            let date_of = |g: &Group| g.inst.value(date_attribute).and_then(TypedValue::as_date);
            let Some(latest) = gs.iter().filter_map(date_of).max() else {
                out.extend(gs);
                continue;
            };
            let keep_id = gs
                .iter()
                .filter(|g| date_of(g) == Some(latest))
                .map(|g| g.inst.instance_id.clone())
                .min()
                .unwrap();
            for g in gs {
                if g.inst.instance_id == keep_id {
                    out.push(g);
                } else {
                    self.audit.push(AuditEntry {
                        rule: rule.to_string(),
                        action: AuditAction::Dropped,
                        instance_ids: vec![g.inst.instance_id.clone()],
                        detail: format!("superseded by {keep_id}"),
                    });
                }
            }
        }
        out
    }

    fn merge_within_window(
        &mut self,
        rule: &str,
        groups: Vec<Group>,
        key_attribute: &str,
        date_attribute: &str,
        window_days: u32,
    ) -> Vec<Group> {
        let spec = self.spec;
        let mut buckets: BTreeMap<String, Vec<(NaiveDate, Group)>> = BTreeMap::new();
        let mut out = Vec::new();
        for g in groups {
            let date = g.inst.value(date_attribute).and_then(TypedValue::as_date);
            match (canonical_key(spec, &g.inst, key_attribute), date) {
                (Some(k), Some(d)) => buckets.entry(k).or_default().push((d, g)),
                _ => out.push(g),
            }
        }
        let window = Duration::days(window_days as i64);
        for (_, mut dated) in buckets {
            dated.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.inst.instance_id.cmp(&b.1.inst.instance_id)));
            let mut component: Vec<Group> = Vec::new();
            let mut last: Option<NaiveDate> = None;
            for (d, g) in dated {
                if let Some(prev) = last {
                    if d - prev > window {
                        out.push(self.finish_component(rule, std::mem::take(&mut component), date_attribute));
                    }
                }
                last = Some(d);
                component.push(g);
            }
            if !component.is_empty() {
                out.push(self.finish_component(rule, component, date_attribute));
            }
        }
        out
    }

    fn finish_component(&mut self, rule: &str, component: Vec<Group>, date_attribute: &str) -> Group {
        if component.len() == 1 {
            component.into_iter().next().unwrap()
        } else {
            self.merge(rule, component, Some(date_attribute))
        }
    }

    fn infer_from_last(&mut self, rule: &str, groups: Vec<Group>, source: &str, target: &str) -> Vec<Group> {
        let spec = self.spec;
        groups
            .into_iter()
            .map(|mut g| {
                if g.members.len() < 2 || g.inst.value(target).is_some() {
                    return g;
                }
                let candidates = g.members.iter().flat_map(|m| {
                    spec.date_attributes()
                        .filter(|a| if source == LAST_ADMINISTRATION { a.name != target } else { a.name == source })
                        .filter_map(move |a| m.value(&a.name).and_then(TypedValue::as_date))
                });
                let own_latest = g.inst.non_null().filter_map(|(_, v)| v.as_date()).max();
                if let Some(latest) = candidates.max() {
                    // Only a date later than anything already on the instance
                    // counts as evidence of a later administration.
                    if own_latest.is_none_or(|own| latest > own) {
                        g.inst.attributes.insert(target.to_string(), Some(TypedValue::Date(latest)));
                        self.audit.push(AuditEntry {
                            rule: rule.to_string(),
                            action: AuditAction::Set,
                            instance_ids: vec![g.inst.instance_id.clone()],
                            detail: format!("{target}={latest}"),
                        });
                    }
                }
                g
            })
            .collect()
    }

    fn conditional_set(
        &mut self,
        rule: &str,
        groups: Vec<Group>,
        target: &str,
        value: &str,
        condition: &Condition,
    ) -> Vec<Group> {
        let attr = self.spec.attribute(target).expect("bound rule");
        let typed = schema::validate_value(attr, value).expect("bound rule value validated");
        let reference = self.ctx.today + Duration::days(condition.offset_days);
        groups
            .into_iter()
            .map(|mut g| {
                let hit = g
                    .inst
                    .value(&condition.attribute)
                    .and_then(TypedValue::as_date)
                    .is_some_and(|d| condition.comparator.holds(d.cmp(&reference)));
                if hit && g.inst.value(target) != Some(&typed) {
                    g.inst.attributes.insert(target.to_string(), Some(typed.clone()));
                    self.audit.push(AuditEntry {
                        rule: rule.to_string(),
                        action: AuditAction::Set,
                        instance_ids: vec![g.inst.instance_id.clone()],
                        detail: format!("{target}={typed}"),
                    });
                }
                g
            })
            .collect()
    }

    fn require_after(
        &mut self,
        rule: &str,
        groups: Vec<Group>,
        date_attribute: &str,
        dependency: &str,
        dependency_attribute: &str,
    ) -> Result<Vec<Group>, CollationError> {
        let anchor = self
            .ctx
            .dependencies
            .get(dependency)
            .into_iter()
            .flatten()
            .filter_map(|i| i.value(dependency_attribute).and_then(TypedValue::as_date))
            .min();
        let Some(anchor) = anchor else {
            return match self.ctx.missing_dependency {
                MissingDependencyPolicy::Error => Err(CollationError::MissingDependency {
                    entity: self.spec.name.clone(),
                    dependency: dependency.to_string(),
                }),
                MissingDependencyPolicy::PassThrough => {
                    self.audit.push(AuditEntry {
                        rule: rule.to_string(),
                        action: AuditAction::Warning,
                        instance_ids: Vec::new(),
                        detail: format!("no dated {dependency} instances; rule skipped"),
                    });
                    Ok(groups)
                }
            };
        };
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            match g.inst.value(date_attribute).and_then(TypedValue::as_date) {
                Some(d) if d < anchor => self.audit.push(AuditEntry {
                    rule: rule.to_string(),
                    action: AuditAction::Dropped,
                    instance_ids: vec![g.inst.instance_id.clone()],
                    detail: format!("{date_attribute}={d} precedes {dependency}.{dependency_attribute}={anchor}"),
                }),
                _ => out.push(g),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::SchemaRegistry;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn med(name: &str, start: &str, doc: &str) -> EntityInstance {
        let mut attrs = AttributeMap::new();
        attrs.insert("medication".into(), Some(TypedValue::Text(name.into())));
        attrs.insert("start_date".into(), Some(TypedValue::Date(d(start))));
        EntityInstance::new(
            "Medication",
            attrs,
            vec![Provenance {
                document_id: doc.into(),
                chunk_index: 0,
                char_start: 0,
                char_end: 10,
            }],
        )
    }

    fn chain(entity: &str, rules: &[&str]) -> CollatorChain {
        let reg = SchemaRegistry::bundled();
        let rules: Vec<_> = rules.iter().map(|r| parse_rule(r).unwrap()).collect();
        CollatorChain::new(&reg, entity, &rules).unwrap()
    }

    fn ctx() -> CollationContext {
        CollationContext::new(d("2020-01-01"))
    }

    #[test]
    fn parses_published_rule_strings() {
        assert_eq!(
            parse_rule("prefer_latest: result_date").unwrap(),
            CollationRule::PreferLatest {
                date_attribute: "result_date".into()
            }
        );
        assert_eq!(
            parse_rule("merge_if_medication_and_start_date<=7d").unwrap(),
            CollationRule::MergeWithinWindow {
                key_attribute: "medication".into(),
                date_attribute: "start_date".into(),
                window_days: 7
            }
        );
        assert_eq!(
            parse_rule("deduplicate_by_root: biomarker_tested").unwrap(),
            parse_rule("dedupe_by_root:biomarker_tested").unwrap()
        );
        assert_eq!(
            parse_rule("infer_end_date_from_last_administration").unwrap(),
            CollationRule::InferEndFromLast {
                source: "last_administration".into(),
                target: "end_date".into()
            }
        );
        assert_eq!(
            parse_rule("set_status_discontinued_if_end_date<today-28d").unwrap(),
            CollationRule::ConditionalSet {
                target_attribute: "status".into(),
                value: "discontinued".into(),
                condition: Condition {
                    attribute: "end_date".into(),
                    comparator: Comparator::Lt,
                    offset_days: -28
                }
            }
        );
        assert!(parse_rule("frobnicate: x").is_err());
        assert!(parse_rule("merge_if_a_and_b<=7").is_err());
    }

    #[test]
    fn rules_round_trip_through_display() {
        for text in [
            "deduplicate_by_root: biomarker_tested",
            "prefer_latest: result_date",
            "merge_if_name_and_start<=7d",
            "infer_end_date_from_last_administration",
            "set_status_discontinued_if_end_date<today-28d",
            "set_status_active_if_start_date>=today",
            "require_start_date_after: Diagnosis.diag_date",
        ] {
            let rule = parse_rule(text).unwrap();
            assert_eq!(parse_rule(&rule.to_string()).unwrap(), rule, "{text}");
        }
    }

    #[test]
    fn binding_resolves_aliases_and_rejects_unknown_attributes() {
        let reg = SchemaRegistry::bundled();
        let med = reg.get("Medication").unwrap();
        let bound = parse_rule("merge_if_name_and_start<=7d").unwrap().bind(med, &reg).unwrap();
        assert_eq!(bound.to_string(), "merge_if_medication_and_start_date<=7d");
        let set = parse_rule("set_status_discontinued_if_end_date<today-28d")
            .unwrap()
            .bind(med, &reg)
            .unwrap();
        assert_eq!(set.to_string(), "set_status_Discontinued_if_end_date<today-28d");
        let set = parse_rule("set_status_on_hold_if_end_date<today").unwrap().bind(med, &reg).unwrap();
        assert!(set.to_string().starts_with("set_status_On Hold_if"));
        assert!(matches!(
            parse_rule("prefer_latest: nope").unwrap().bind(med, &reg),
            Err(CollationError::UnknownAttribute { .. })
        ));
        assert!(matches!(
            parse_rule("prefer_latest: medication").unwrap().bind(med, &reg),
            Err(CollationError::AttributeKind { .. })
        ));
        let bio = reg.get("Biomarker").unwrap();
        assert!(matches!(
            parse_rule("require_result_date_after: Diagnosis.diag_date").unwrap().bind(bio, &reg),
            Err(CollationError::UndeclaredDependency { .. })
        ));
    }

    #[test]
    fn topo_order_examples() {
        let mut g = DependencyGraph::default();
        g.add_edge("Medication", "Diagnosis");
        assert_eq!(g.topo_order().unwrap(), vec!["Diagnosis", "Medication"]);

        let mut g = DependencyGraph::default();
        g.add_node("B");
        g.add_node("A");
        assert_eq!(g.topo_order().unwrap(), vec!["A", "B"]);

        let mut g = DependencyGraph::default();
        g.add_edge("A", "B");
        g.add_edge("B", "A");
        let cycle = g.topo_order().unwrap_err().0;
        assert_eq!(cycle.first(), cycle.last());
        assert!(cycle.contains(&"A".to_string()) && cycle.contains(&"B".to_string()));
    }

    #[test]
    fn merges_nivolumab_within_window_keeping_earliest_start() {
        let c = chain("Medication", &["merge_if_name_and_start<=7d"]);
        let out = collate(&c, &ctx(), vec![med("Nivolumab", "2019-03-04", "d2"), med("Nivolumab", "2019-03-01", "d1")]).unwrap();
        assert_eq!(out.instances.len(), 1);
        let m = &out.instances[0];
        assert_eq!(m.value("start_date"), Some(&TypedValue::Date(d("2019-03-01"))));
        assert_eq!(m.provenance.len(), 2);

        let out = collate(&c, &ctx(), vec![med("Nivolumab", "2019-03-01", "d1"), med("Nivolumab", "2019-03-09", "d2")]).unwrap();
        assert_eq!(out.instances.len(), 2);
    }

    #[test]
    fn merging_is_transitive_and_infers_end() {
        let c = chain(
            "Medication",
            &["merge_if_name_and_start<=7d", "infer_end_date_from_last_administration"],
        );
        let out = collate(
            &c,
            &ctx(),
            vec![
                med("Nivolumab", "2019-03-01", "d1"),
                med("nivolumab", "2019-03-07", "d2"),
                med("Nivolumab", "2019-03-13", "d3"),
            ],
        )
        .unwrap();
        assert_eq!(out.instances.len(), 1);
        assert_eq!(out.instances[0].value("end_date"), Some(&TypedValue::Date(d("2019-03-13"))));
    }

    #[test]
    fn prefer_latest_keeps_most_recent_result() {
        let c = chain("Biomarker", &["deduplicate_by_root: biomarker_tested", "prefer_latest: result_date"]);
        let bio = |date: &str| {
            let mut attrs = AttributeMap::new();
            attrs.insert("biomarker_tested".into(), Some(TypedValue::Text("BRAF".into())));
            attrs.insert("result_date".into(), Some(TypedValue::Date(d(date))));
            EntityInstance::new("Biomarker", attrs, vec![])
        };
        let out = collate(&c, &ctx(), vec![bio("2020-01-01"), bio("2020-06-01")]).unwrap();
        assert_eq!(out.instances.len(), 1);
        assert_eq!(out.instances[0].value("result_date"), Some(&TypedValue::Date(d("2020-06-01"))));
    }

    #[test]
    fn conditional_set_uses_context_today() {
        let c = chain("Medication", &["set_status_discontinued_if_end_date<today-28d"]);
        let mut m = med("Nivolumab", "2019-03-01", "d1");
        m.attributes.insert("end_date".into(), Some(TypedValue::Date(d("2019-11-01"))));
        let out = collate(&c, &ctx(), vec![m.clone()]).unwrap();
        assert_eq!(out.instances[0].value("status"), Some(&TypedValue::Categorical("Discontinued".into())));
        let late = CollationContext::new(d("2019-11-15"));
        let out = collate(&c, &late, vec![m]).unwrap();
        assert_eq!(out.instances[0].value("status"), None);
    }

    #[test]
    fn require_after_honors_missing_dependency_policy() {
        let c = chain("Medication", &["require_start_date_after: Diagnosis.diag_date"]);
        let inputs = vec![med("Nivolumab", "2019-03-01", "d1")];
        let mut strict = ctx();
        strict.missing_dependency = MissingDependencyPolicy::Error;
        assert!(matches!(collate(&c, &strict, inputs.clone()), Err(CollationError::MissingDependency { .. })));
        let lenient = ctx();
        let out = collate(&c, &lenient, inputs.clone()).unwrap();
        assert_eq!(out.instances.len(), 1);
        assert!(out.audit.iter().any(|a| a.action == AuditAction::Warning));

        let mut attrs = AttributeMap::new();
        attrs.insert("condition".into(), Some(TypedValue::Text("Melanoma".into())));
        attrs.insert("diag_date".into(), Some(TypedValue::Date(d("2019-04-01"))));
        let mut with_dx = ctx();
        with_dx
            .dependencies
            .insert("Diagnosis".into(), vec![EntityInstance::new("Diagnosis", attrs, vec![])]);
        let out = collate(&c, &with_dx, inputs).unwrap();
        assert!(out.instances.is_empty());
    }

    #[test]
    fn single_lineage_keeps_one_document() {
        let c = chain("Medication", &["merge_if_name_and_start<=7d"]);
        let mut context = ctx();
        context.single_lineage = true;
        context.document_dates.insert("d1".into(), d("2019-03-01"));
        context.document_dates.insert("d2".into(), d("2019-03-05"));
        let out = collate(&c, &context, vec![med("Nivolumab", "2019-03-04", "d2"), med("Nivolumab", "2019-03-01", "d1")]).unwrap();
        assert_eq!(out.instances[0].provenance.len(), 1);
        assert_eq!(out.instances[0].provenance[0].document_id, "d1");
    }

    #[test]
    fn later_document_wins_attribute_conflicts() {
        let c = chain("Medication", &["merge_if_name_and_start<=7d"]);
        let mut context = ctx();
        context.document_dates.insert("d1".into(), d("2019-03-01"));
        context.document_dates.insert("d2".into(), d("2019-03-20"));
        let mut a = med("Nivolumab", "2019-03-01", "d1");
        a.attributes.insert("route".into(), Some(TypedValue::Categorical("Oral".into())));
        a.refresh_id();
        let mut b = med("Nivolumab", "2019-03-03", "d2");
        b.attributes.insert("route".into(), Some(TypedValue::Categorical("Intravenous".into())));
        b.refresh_id();
        let out = collate(&c, &context, vec![a, b]).unwrap();
        assert_eq!(out.instances[0].value("route"), Some(&TypedValue::Categorical("Intravenous".into())));
        assert!(out.audit.iter().any(|e| e.action == AuditAction::DiscardedValue));
    }

    #[test]
    fn rejects_instances_of_other_types() {
        let c = chain("Medication", &[]);
        let mut attrs = AttributeMap::new();
        attrs.insert("condition".into(), Some(TypedValue::Text("Melanoma".into())));
        let dx = EntityInstance::new("Diagnosis", attrs, vec![]);
        assert!(matches!(collate(&c, &ctx(), vec![dx]), Err(CollationError::EntityMismatch { .. })));
    }
}
