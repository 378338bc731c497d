#![no_main]
use std::collections::BTreeMap;

use libfuzzer_sys::fuzz_target;
use oncex_core::synthesis::{render_text, PromptTemplate};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(t) = PromptTemplate::parse("fuzz", s) {
            let bindings: BTreeMap<String, String> = t.placeholders.iter().map(|p| (p.clone(), "x".to_string())).collect();
            let _ = t.render(&bindings);
        }
        let _ = render_text(s, &BTreeMap::new());
    }
});
