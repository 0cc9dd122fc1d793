#![no_main]
//! Input layout: config document, then an optional NUL byte followed by
//! newline-separated `key=value` overrides.

use layertie::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let (doc, rest) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    let overrides: Vec<String> = String::from_utf8_lossy(rest)
        .lines()
        .map(str::to_string)
        .collect();
    if let Ok(cfg) = RunConfig::from_json_with_overrides(doc, &overrides) {
        let text = serde_json::to_vec(&cfg).unwrap();
        assert_eq!(RunConfig::from_json_with_overrides(&text, &[]).unwrap(), cfg);
    }
});
