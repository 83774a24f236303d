#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(m) = bml::config::parse_zeta_text(s) {
            let _ = bml::bergman::OnePS::new(m);
        }
    }
});
