#![no_main]

use dynexit::harness::checkpoint::{backbone_from, exits_from, Manifest};
use libfuzzer_sys::fuzz_target;

// Input layout: manifest text, a NUL byte, then the raw tensor blob.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let blob = data.get(split + 1..).unwrap_or(&[]);
    let Ok(manifest) = Manifest::parse(text) else {
        return;
    };
    assert_eq!(Manifest::parse(&manifest.render()).ok(), Some(manifest.clone()));
    let _ = manifest.decode(blob);
    let _ = backbone_from(&manifest, blob);
    let _ = exits_from(&manifest, blob);
});
