#![no_main]

use hirl_core::low_level::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_manifest(text) {
            assert!(!m.actor.contains('/') && !m.actor.starts_with('.'));
        }
    }
});
