#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(b) = bml::config::parse_bundle_spec(s) {
            assert_eq!(bml::config::parse_bundle_spec(&bml::config::bundle_to_spec(&b)).expect("round trip"), b);
        }
    }
});
