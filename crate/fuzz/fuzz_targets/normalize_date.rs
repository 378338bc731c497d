#![no_main]
use libfuzzer_sys::fuzz_target;
use oncex_core::pipeline::{normalize_date, normalize_date_with, DateConvention};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(iso) = normalize_date(s) {
            // normalized output is a fixed point
            assert_eq!(normalize_date(&iso).as_deref(), Ok(iso.as_str()));
        }
        let _ = normalize_date_with(s, DateConvention::DayFirst);
    }
});
