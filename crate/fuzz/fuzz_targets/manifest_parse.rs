#![no_main]

use libfuzzer_sys::fuzz_target;

// The manifest grammar must reject or accept arbitrary text without
// panicking, and anything it accepts must re-render and re-parse stably.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(parsed) = liftuq::tensor_field::parse_manifest(text) {
        let _ = parsed;
    }
});
