//! Replays the checked-in fuzz seeds through the fuzz target bodies. Every
//! seed is a valid input, so each must parse and round-trip.

use std::path::{Path, PathBuf};

use bml::config::*;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let data = std::fs::read(&p).unwrap();
            (p, data)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty());
    out
}

fn text(d: &[u8]) -> &str {
    std::str::from_utf8(d).unwrap()
}

#[test]
fn filtration_json_seeds() {
    for (p, d) in seeds("filtration_json") {
        let f = parse_filtration_json(&d).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let t = filtration_to_json(&f);
        assert_eq!(filtration_to_json(&parse_filtration_json(t.as_bytes()).unwrap()), t);
        bml::stability::m_na(&f).unwrap();
    }
}

#[test]
fn zeta_text_seeds() {
    for (p, d) in seeds("zeta_text") {
        let m = parse_zeta_text(text(&d)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        bml::bergman::OnePS::new(m).unwrap();
    }
}

#[test]
fn experiment_config_seeds() {
    for (p, d) in seeds("experiment_config") {
        let cfg = parse_config(&d).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(parse_config(cfg.to_json().as_bytes()).unwrap(), cfg);
    }
}

#[test]
fn inline_spec_seeds() {
    for (p, d) in seeds("bundle_spec") {
        let b = parse_bundle_spec(text(&d)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(parse_bundle_spec(&bundle_to_spec(&b)).unwrap(), b);
    }
    for (p, d) in seeds("ps_spec") {
        let s = parse_ps_spec(text(&d)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(parse_ps_spec(&ps_to_spec(&s)).unwrap(), s);
    }
}

fn all_seeds() -> Vec<Vec<u8>> {
    ["filtration_json", "zeta_text", "experiment_config", "bundle_spec", "ps_spec"]
        .iter()
        .flat_map(|t| seeds(t).into_iter().map(|(_, d)| d))
        .collect()
}

/// Runs every parser on `data`; only panics matter.
fn parse_everything(data: &[u8]) {
    let _ = parse_filtration_json(data).map(|f| bml::stability::m_na(&f));
    let _ = parse_config(data);
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = parse_zeta_text(s).map(bml::bergman::OnePS::new);
        let _ = parse_bundle_spec(s);
        let _ = parse_ps_spec(s);
    }
}

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn parsers_never_panic_on_bytes(data in prop::collection::vec(any::<u8>(), 0..256)) {
        parse_everything(&data);
    }

    #[test]
    fn parsers_never_panic_on_mutated_seeds(pick in any::<prop::sample::Index>(), edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>(), 0u8..3), 1..8)) {
        let all = all_seeds();
        let mut d = pick.get(&all).clone();
        for (at, byte, op) in edits {
            let i = if d.is_empty() { 0 } else { at.index(d.len()) };
            match op {
                0 if !d.is_empty() => d[i] = byte,
                1 => d.insert(i, byte),
                _ if !d.is_empty() => { d.remove(i); }
                _ => d.push(byte),
            }
        }
        parse_everything(&d);
    }
}
