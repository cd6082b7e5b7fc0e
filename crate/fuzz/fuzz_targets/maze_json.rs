#![no_main]

use hirl_core::maze::Maze;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(maze) = Maze::from_json(text) {
        // Accepted layouts survive a write/read cycle unchanged.
        let again = Maze::from_json(&maze.to_json()).expect("re-reading a written maze");
        assert_eq!(again, maze);
    }
});
