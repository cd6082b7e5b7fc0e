//! Replays the fuzz corpus seeds for the wire protocol and session requests.

use std::fs;
use std::path::PathBuf;

use hirl_session::{CreateSession, ProtocolMessage};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn protocol_seeds_parse_and_round_trip() {
    let all = seeds("protocol_message");
    assert_eq!(all.len(), 8);
    for (name, bytes) in all {
        let msg = ProtocolMessage::from_bytes(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(ProtocolMessage::from_json(&msg.to_json()).unwrap(), msg, "{name}");
    }
}

#[test]
fn create_session_seeds() {
    for (name, bytes) in seeds("create_session") {
        let req: CreateSession = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(req.algorithm.parse::<hirl_core::Algorithm>().is_ok(), name != "unknown_algorithm", "{name}");
    }
}
