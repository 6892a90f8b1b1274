#![no_main]

use aqua_cli::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // first line doubles as a single override
    let (first, rest) = text.split_once('\n').unwrap_or(("", text));
    let _ = ExperimentConfig::from_toml(text, &[]);
    if first.contains('=') {
        let _ = ExperimentConfig::from_toml(rest, &[first.to_string()]);
    }
});
