#![no_main]

use hirl_session::ProtocolMessage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(msg) = ProtocolMessage::from_bytes(data) {
        let again: ProtocolMessage = serde_json::from_str(&msg.to_json()).expect("re-reading a written message");
        assert_eq!(again, msg);
    }
});
