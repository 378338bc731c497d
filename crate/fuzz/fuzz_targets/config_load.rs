#![no_main]
use libfuzzer_sys::fuzz_target;
use oncex_core::pipeline::load_config;
use oncex_core::schema::SchemaRegistry;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let reg = SchemaRegistry::bundled();
        if let Ok(cfg) = load_config(s, &reg) {
            let again = load_config(&cfg.to_json(), &reg).expect("round trip");
            assert_eq!(again, cfg);
        }
    }
});
