#![no_main]
//! Input: little-endian u32 manifest length, manifest bytes, sample blob.

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
    if let Ok(ds) = vitsnn::archive::parse_dataset(manifest, blob) {
        let (m2, b2) = vitsnn::archive::encode_dataset(&ds).expect("re-encode");
        let again = vitsnn::archive::parse_dataset(&m2, &b2).expect("re-parse");
        assert_eq!(again.labels, ds.labels);
        assert_eq!(again.len(), ds.len());
    }
});
