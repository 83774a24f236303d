#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(p) = bml::config::parse_ps_spec(s) {
            assert_eq!(bml::config::parse_ps_spec(&bml::config::ps_to_spec(&p)).expect("round trip"), p);
        }
    }
});
