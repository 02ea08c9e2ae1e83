#![no_main]
//! Input: little-endian u32 manifest length, manifest bytes, weight blob.

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((len, rest)) = data.split_first_chunk::<4>() else {
        return;
    };
    let len = u32::from_le_bytes(*len) as usize;
    if len > rest.len() {
        return;
    }
    let (manifest, blob) = rest.split_at(len);
    if let Ok(model) = vitsnn::archive::parse_model(manifest, blob) {
        let (m2, b2) = vitsnn::archive::encode_model(&model).expect("re-encode");
        let again = vitsnn::archive::parse_model(&m2, &b2).expect("re-parse");
        assert_eq!(again.config, model.config);
    }
});
