#![no_main]

use libfuzzer_sys::fuzz_target;

// Experiment configs come from user-edited TOML; parsing plus validation
// must never panic.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = liftuq::cli::parse_experiment_config(text);
});
