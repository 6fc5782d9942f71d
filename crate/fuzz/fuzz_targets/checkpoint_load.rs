#![no_main]

use libfuzzer_sys::fuzz_target;

// Same disk materialization as container_read, but pushes whatever reads
// successfully through the checkpoint interpreter, which validates kind,
// architecture keys, tensor shapes, and finiteness.
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
    if let Ok(container) = liftuq::tensor_field::DatasetContainer::read(dir.path()) {
        let _ = liftuq::operator_net::params_from_container(&container);
    }
});
