use chrono::{Duration, NaiveDate};
use proptest::prelude::*;

use oncex_core::collation::{collate, parse_rule, CollationContext, CollatorChain};
use oncex_core::schema::{AttributeMap, EntityInstance, Provenance, SchemaRegistry, TypedValue};

const MED_RULES: [&str; 3] = [
    "merge_if_name_and_start<=7d",
    "infer_end_date_from_last_administration",
    "set_status_discontinued_if_end_date<today-28d",
];

fn day(n: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2019, 3, 1).unwrap() + Duration::days(n)
}

fn chain(entity: &str, rules: &[&str]) -> CollatorChain {
    let reg = SchemaRegistry::bundled();
    let rules: Vec<_> = rules.iter().map(|r| parse_rule(r).unwrap()).collect();
    CollatorChain::new(&reg, entity, &rules).unwrap()
}

fn ctx() -> CollationContext {
    CollationContext::new(NaiveDate::from_ymd_opt(2019, 6, 1).unwrap())
}

fn medication(name: &str, start: Option<i64>, end: Option<i64>, route: Option<&str>, doc: usize) -> EntityInstance {
    let mut a = AttributeMap::new();
    a.insert("medication".into(), Some(TypedValue::Text(name.into())));
    a.insert("start_date".into(), start.map(|d| TypedValue::Date(day(d))));
    if let Some(e) = end {
        a.insert("end_date".into(), Some(TypedValue::Date(day(e))));
    }
    if let Some(r) = route {
        a.insert("route".into(), Some(TypedValue::Categorical(r.into())));
    }
    let prov = vec![Provenance {
        document_id: format!("d{doc}"),
        chunk_index: 0,
        char_start: doc * 10,
        char_end: doc * 10 + 5,
    }];
    EntityInstance::new("Medication", a, prov)
}

fn med_strategy() -> impl Strategy<Value = EntityInstance> {
    (
        prop::sample::select(vec!["Nivolumab", "nivolumab", "Pembrolizumab", "Ipilimumab"]),
        prop::option::weighted(0.9, 0..40i64),
        prop::option::weighted(0.3, 0..120i64),
        prop::option::of(prop::sample::select(vec!["Intravenous", "Oral"])),
        0..4usize,
    )
        .prop_map(|(n, s, e, r, d)| medication(n, s, e, r, d))
}

fn biomarker_strategy() -> impl Strategy<Value = EntityInstance> {
    (
        prop::sample::select(vec!["BRAF", "braf", "NRAS", "KIT"]),
        prop::option::of(0..200i64),
        prop::option::of(prop::sample::select(vec!["Positive", "Negative"])),
    )
        .prop_map(|(g, d, i)| {
            let mut a = AttributeMap::new();
            a.insert("biomarker_tested".into(), Some(TypedValue::Text(g.into())));
            a.insert("result_date".into(), d.map(|d| TypedValue::Date(day(d))));
            a.insert("interpretation".into(), i.map(|i| TypedValue::Categorical(i.into())));
            EntityInstance::new("Biomarker", a, vec![])
        })
}

fn shuffled(v: Vec<EntityInstance>) -> impl Strategy<Value = (Vec<EntityInstance>, Vec<EntityInstance>)> {
    (Just(v.clone()), Just(v).prop_shuffle())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn medication_collation_is_idempotent_and_order_free(
        (inputs, permuted) in prop::collection::vec(med_strategy(), 0..10).prop_flat_map(shuffled)
    ) {
        let c = chain("Medication", &MED_RULES);
        let once = collate(&c, &ctx(), inputs).unwrap();
        let twice = collate(&c, &ctx(), once.instances.clone()).unwrap();
        prop_assert_eq!(&twice.instances, &once.instances);
        let other = collate(&c, &ctx(), permuted).unwrap();
        prop_assert_eq!(&other.instances, &once.instances);
        prop_assert_eq!(&other.audit, &once.audit);
    }

    #[test]
    fn biomarker_collation_is_idempotent_and_order_free(
        (inputs, permuted) in prop::collection::vec(biomarker_strategy(), 0..10).prop_flat_map(shuffled)
    ) {
        let c = chain("Biomarker", &["deduplicate_by_root: biomarker_tested", "prefer_latest: result_date"]);
        let once = collate(&c, &ctx(), inputs).unwrap();
        let twice = collate(&c, &ctx(), once.instances.clone()).unwrap();
        prop_assert_eq!(&twice.instances, &once.instances);
        let other = collate(&c, &ctx(), permuted).unwrap();
        prop_assert_eq!(&other.instances, &once.instances);
        let mut roots: Vec<String> = once.instances.iter().map(|i| i.value("biomarker_tested").unwrap().to_string().to_lowercase()).collect();
        let n = roots.len();
        roots.dedup();
        prop_assert_eq!(roots.len(), n);
    }
}

#[test]
fn window_merges_three_days_but_not_eight() {
    let c = chain("Medication", &MED_RULES[..1]);
    let out = collate(&c, &ctx(), vec![medication("Nivolumab", Some(0), None, None, 0), medication("Nivolumab", Some(3), None, None, 1)]).unwrap();
    assert_eq!(out.instances.len(), 1);
    assert_eq!(out.instances[0].value("start_date"), Some(&TypedValue::Date(day(0))));

    let out = collate(&c, &ctx(), vec![medication("Nivolumab", Some(0), None, None, 0), medication("Nivolumab", Some(8), None, None, 1)]).unwrap();
    assert_eq!(out.instances.len(), 2);
}

#[test]
fn discontinued_status_follows_old_end_dates() {
    let c = chain("Medication", &MED_RULES);
    let out = collate(&c, &ctx(), vec![medication("Nivolumab", Some(0), Some(20), None, 0)]).unwrap();
    assert_eq!(out.instances[0].value("status"), Some(&TypedValue::Categorical("Discontinued".into())));
}
