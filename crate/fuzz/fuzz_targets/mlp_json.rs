#![no_main]

use hirl_core::neural::Mlp;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(net) = Mlp::from_json(text) else { return };
    let input = vec![0.5; net.input_dim()];
    let _ = net.forward(&input);
});
