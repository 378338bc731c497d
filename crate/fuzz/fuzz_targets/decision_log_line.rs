#![no_main]
use libfuzzer_sys::fuzz_target;
use oncex::store::LogLine;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = serde_json::from_slice::<LogLine>(data) {
        let text = serde_json::to_string(&line).expect("serializes");
        let _: LogLine = serde_json::from_str(&text).expect("round trip");
    }
});
