#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = bml::config::parse_filtration_json(data) {
        // accepted specs must survive a round trip and evaluate without panicking
        let text = bml::config::filtration_to_json(&f);
        let g = bml::config::parse_filtration_json(text.as_bytes()).expect("round trip");
        assert_eq!(bml::config::filtration_to_json(&g), text);
        let _ = bml::stability::m_na(&f);
    }
});
