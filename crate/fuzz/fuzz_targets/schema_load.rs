#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(reg) = oncex_core::schema::load_schema(s) {
            // a loaded registry must reload from its own serialization
            let again = oncex_core::schema::load_schema(&reg.to_json()).expect("round trip");
            assert_eq!(again.to_json(), reg.to_json());
        }
    }
});
