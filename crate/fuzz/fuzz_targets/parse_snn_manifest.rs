#![no_main]

use libfuzzer_sys::fuzz_target;
use vitsnn::convert::SnnManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = SnnManifest::from_json_bytes(data) {
        for (_, ladder) in m.neurons() {
            assert!(ladder.n() >= 1);
        }
    }
});
