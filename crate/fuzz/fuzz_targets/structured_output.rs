#![no_main]
use libfuzzer_sys::fuzz_target;
use oncex_core::schema::SchemaRegistry;
use oncex_core::synthesis::{parse_structured_output, parse_variant_list};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let reg = SchemaRegistry::bundled();
    for entity in ["Biomarker", "Medication", "Staging"] {
        let targets: Vec<String> = reg.get(entity).unwrap().attributes.iter().map(|a| a.name.clone()).collect();
        let _ = parse_structured_output(s, &reg, entity, &targets);
    }
    let _ = parse_variant_list(s);
});
