#![no_main]

use libfuzzer_sys::fuzz_target;

// Materializes a candidate container on disk and exercises the full read
// path (manifest grammar, blob length validation, shape checks). Input
// layout: manifest text, then a 0x00 separator, then blob bytes reused for
// every declared tensor.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(manifest) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let blob: &[u8] = if split < data.len() {
        &data[split + 1..]
    } else {
        &[]
    };
    let Ok(parsed) = liftuq::tensor_field::parse_manifest(manifest) else {
        return;
    };
    // cap blob volume so the fuzzer does not just test disk throughput
    if parsed.tensor_decls.len() > 8 || blob.len() > 1 << 16 {
        return;
    }
    let Ok(dir) = tempfile::tempdir() else {
        return;
    };
    if std::fs::write(dir.path().join("manifest.txt"), manifest).is_err() {
        return;
    }
    for (name, _) in &parsed.tensor_decls {
        let _ = std::fs::write(dir.path().join(format!("{}.f64", name)), blob);
    }
    let _ = liftuq::tensor_field::DatasetContainer::read(dir.path());
});
