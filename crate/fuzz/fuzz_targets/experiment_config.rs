#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = bml::config::parse_config(data) {
        let echo = cfg.to_json();
        assert_eq!(bml::config::parse_config(echo.as_bytes()).expect("echo reparses"), cfg);
    }
});
