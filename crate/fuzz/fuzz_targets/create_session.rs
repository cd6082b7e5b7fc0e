#![no_main]

use hirl_session::CreateSession;
use libfuzzer_sys::fuzz_target;

// The body of `POST /sessions`.
fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<CreateSession>(data);
});
