#![no_main]
//! Input: two little-endian u32 lengths (weight manifest, snn.json), then
//! the weight manifest, snn.json and the weight blob.

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((a, rest)) = data.split_first_chunk::<4>() else {
        return;
    };
    let Some((b, rest)) = rest.split_first_chunk::<4>() else {
        return;
    };
    let (la, lb) = (u32::from_le_bytes(*a) as usize, u32::from_le_bytes(*b) as usize);
    if la.saturating_add(lb) > rest.len() {
        return;
    }
    let (manifest, rest) = rest.split_at(la);
    let (snn_json, blob) = rest.split_at(lb);
    if let Ok(graph) = vitsnn::convert::parse_snn(manifest, blob, snn_json) {
        assert!(vitsnn::convert::check_invariants(&graph).is_empty());
    }
});
