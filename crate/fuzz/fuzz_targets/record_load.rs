#![no_main]
use libfuzzer_sys::fuzz_target;
use oncex_core::schema::{PatientRecord, SchemaRegistry};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let reg = SchemaRegistry::bundled();
        if let Ok(rec) = PatientRecord::from_json(s, &reg) {
            let again = PatientRecord::from_json(&rec.to_json(), &reg).expect("round trip");
            assert_eq!(again, rec);
        }
    }
});
