#![no_main]

use hirl_core::experiment::{parse_results, results_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_results(text) {
        // Written rows parse back; floats are rounded on write, so compare the text.
        let written = results_to_csv(&rows);
        let reparsed = parse_results(&written).expect("re-reading written rows");
        assert_eq!(results_to_csv(&reparsed), written);
    }
});
