//! Independent reference implementations used as test oracles, plus
//! random fixture builders. Shared with the acceptance target.
#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oncex_core::schema::{AlignmentScheme, AttributeMap, AttributeType, Canonicalization, EntityInstance, EntityTypeSpec, TypedValue};

// --- matching -------------------------------------------------------------

fn squash(s: &str, compact: bool) -> String {
    let lower = s.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    if compact {
        words.concat()
    } else {
        words.join(" ")
    }
}

fn number(v: &TypedValue) -> Option<f64> {
    match v {
        TypedValue::Integer(i) => Some(*i as f64),
        TypedValue::Decimal(d) => Some(*d),
        _ => None,
    }
}

pub fn same(spec: &EntityTypeSpec, attr: &str, a: Option<&TypedValue>, b: Option<&TypedValue>, tol: i64) -> bool {
    let (a, b) = match (a, b) {
        (Some(a), Some(b)) => (a, b),
        _ => return false,
    };
    let compact = spec.attribute(attr).map(|s| s.canonical == Canonicalization::Compact).unwrap_or(false);
    if let (TypedValue::Date(x), TypedValue::Date(y)) = (a, b) {
        return (x.signed_duration_since(*y).num_days()).abs() <= tol;
    }
    if let (TypedValue::Boolean(x), TypedValue::Boolean(y)) = (a, b) {
        return x == y;
    }
    if let (Some(x), Some(y)) = (number(a), number(b)) {
        return x == y || (x - y).abs() <= 1e-9 * x.abs().max(y.abs());
    }
    match (a.as_str(), b.as_str()) {
        (Some(x), Some(y)) => squash(x, compact) == squash(y, compact),
        _ => false,
    }
}

// --- alignment ------------------------------------------------------------

pub fn score(spec: &EntityTypeSpec, g: &EntityInstance, p: &EntityInstance) -> Option<f64> {
    match &spec.alignment {
        AlignmentScheme::Root { root_attribute } => {
            same(spec, root_attribute, g.value(root_attribute), p.value(root_attribute), 0).then_some(1.0)
        }
        AlignmentScheme::Weighted { threshold, .. } => {
            let mut s = 0.0;
            for a in &spec.attributes {
                if let Some(w) = a.weight {
                    if same(spec, &a.name, g.value(&a.name), p.value(&a.name), 0) {
                        s += w;
                    }
                }
            }
            (s >= threshold - 1e-9).then_some(s)
        }
    }
}

/// Repeatedly takes the best remaining candidate by a full scan.
pub fn align(spec: &EntityTypeSpec, gt: &[EntityInstance], pred: &[EntityInstance]) -> Vec<(usize, usize)> {
    let mut gt_free = vec![true; gt.len()];
    let mut pred_free = vec![true; pred.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..gt.len() {
            for j in 0..pred.len() {
                if !gt_free[i] || !pred_free[j] {
                    continue;
                }
                if let Some(s) = score(spec, &gt[i], &pred[j]) {
                    // strict improvement keeps the lowest (i, j) among equal scores
                    if best.is_none_or(|(b, _, _)| s > b) {
                        best = Some((s, i, j));
                    }
                }
            }
        }
        match best {
            Some((_, i, j)) => {
                gt_free[i] = false;
                pred_free[j] = false;
                out.push((i, j));
            }
            None => break,
        }
    }
    out.sort();
    out
}

/// (tp, fp, fn) for the entity and for every attribute.
pub type Triple = (u64, u64, u64);

pub fn confusion(
    spec: &EntityTypeSpec,
    gt: &[EntityInstance],
    pred: &[EntityInstance],
    tol: i64,
) -> (Triple, BTreeMap<String, Triple>) {
    let pairs = align(spec, gt, pred);
    let driver = spec.driver().to_string();
    let tp = pairs
        .iter()
        .filter(|&&(i, j)| same(spec, &driver, gt[i].value(&driver), pred[j].value(&driver), tol))
        .count() as u64;
    let entity = (tp, pred.len() as u64 - tp, gt.len() as u64 - tp);

    let mut attrs = BTreeMap::new();
    for a in &spec.attributes {
        let (mut t, mut f_p, mut f_n) = (0, 0, 0);
        for (i, g) in gt.iter().enumerate() {
            let partner = pairs.iter().find(|x| x.0 == i).map(|x| &pred[x.1]);
            let gv = g.value(&a.name);
            match partner {
                Some(p) if same(spec, &a.name, gv, p.value(&a.name), tol) => t += 1,
                _ => f_n += gv.is_some() as u64,
            }
        }
        for (j, p) in pred.iter().enumerate() {
            let partner = pairs.iter().find(|x| x.1 == j).map(|x| &gt[x.0]);
            let pv = p.value(&a.name);
            let hit = partner.is_some_and(|g| same(spec, &a.name, g.value(&a.name), pv, tol));
            if !hit {
                f_p += pv.is_some() as u64;
            }
        }
        attrs.insert(a.name.clone(), (t, f_p, f_n));
    }
    (entity, attrs)
}

// --- fixtures -------------------------------------------------------------

pub fn base_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()
}

fn random_value(rng: &mut ChaCha8Rng, ty: &AttributeType, spread: i64) -> TypedValue {
    match ty {
        AttributeType::Date => TypedValue::Date(base_date() + Duration::days(rng.random_range(0..=spread))),
        AttributeType::Integer => TypedValue::Integer(rng.random_range(1..3)),
        AttributeType::Decimal => TypedValue::Decimal([1.0, 2.5][rng.random_range(0..2)]),
        AttributeType::Boolean => TypedValue::Boolean(rng.random_bool(0.5)),
        AttributeType::Categorical(values) => TypedValue::Categorical(values[rng.random_range(0..values.len().min(2))].clone()),
        AttributeType::Text => {
            let pool = ["Alpha", "ALPHA", "Beta", "pT2 N0 M0", "pT2N0M0", "cT2N0M0"];
            TypedValue::Text(pool[rng.random_range(0..pool.len())].into())
        }
    }
}

/// A random instance; the driver is never null. Weighted attributes are
/// filled more often so that alignments actually occur.
pub fn random_instance(rng: &mut ChaCha8Rng, spec: &EntityTypeSpec, spread: i64) -> EntityInstance {
    let driver = spec.driver().to_string();
    let mut attrs = AttributeMap::new();
    for a in &spec.attributes {
        let keep = if a.name == driver {
            1.0
        } else if a.weight.is_some() {
            0.9
        } else {
            0.4
        };
        let v = rng.random_bool(keep).then(|| random_value(rng, &a.ty, spread));
        attrs.insert(a.name.clone(), v);
    }
    EntityInstance::new(spec.name.clone(), attrs, vec![])
}

/// A prediction derived from a ground-truth instance: dates jittered,
/// some attributes dropped or replaced.
pub fn perturb(rng: &mut ChaCha8Rng, spec: &EntityTypeSpec, g: &EntityInstance, spread: i64) -> EntityInstance {
    let mut attrs = g.attributes.clone();
    for a in &spec.attributes {
        let roll: f64 = rng.random();
        let slot = attrs.entry(a.name.clone()).or_insert(None);
        if roll < 0.15 {
            *slot = None;
        } else if roll < 0.3 {
            *slot = Some(random_value(rng, &a.ty, spread));
        } else if let Some(TypedValue::Date(d)) = slot {
            if roll < 0.6 {
                *d += Duration::days(rng.random_range(-10..=10));
            }
        }
    }
    EntityInstance::new(spec.name.clone(), attrs, vec![])
}

// --- bag of little bootstraps -----------------------------------------------

fn type7(xs: &mut [f64], q: f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (xs.len() as f64 - 1.0);
    let k = pos.floor() as usize;
    if k + 1 >= xs.len() {
        return xs[xs.len() - 1];
    }
    xs[k] + (pos - k as f64) * (xs[k + 1] - xs[k])
}

/// Straightforward reading of the procedure: every subset is a fresh
/// partial shuffle of 0..n, every replicate an explicit resample of size n.
pub fn blb_oracle(values: &[f64], s: usize, m: usize, r: usize, seed: u64, level: f64) -> (f64, f64) {
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (1.0 - level) / 2.0;
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for _ in 0..s {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        let subset: Vec<f64> = idx[..m].iter().map(|&i| values[i]).collect();
        let mut stats = Vec::new();
        for _ in 0..r {
            let mut acc = 0.0;
            let mut counts = vec![0usize; m];
            for _ in 0..n {
                counts[rng.random_range(0..m)] += 1;
            }
            for k in 0..m {
                acc += counts[k] as f64 * subset[k];
            }
            stats.push(acc / n as f64);
        }
        lo.push(type7(&mut stats, a));
        hi.push(type7(&mut stats, 1.0 - a));
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (avg(&lo), avg(&hi))
}
