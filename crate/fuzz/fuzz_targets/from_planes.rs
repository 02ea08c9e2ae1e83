#![no_main]
//! Input: first byte is the threshold count, the rest are plane bits.

use libfuzzer_sys::fuzz_target;
use vitsnn::neuron::{from_planes, to_planes};

fuzz_target!(|data: &[u8]| {
    let Some((&n, rest)) = data.split_first() else {
        return;
    };
    let planes_n = (n as usize % 8) + 1;
    let len = rest.len() / (2 * planes_n);
    if len == 0 {
        return;
    }
    let planes: Vec<Vec<bool>> = (0..2 * planes_n)
        .map(|p| rest[p * len..(p + 1) * len].iter().map(|b| b & 1 == 1).collect())
        .collect();
    if let Ok(spikes) = from_planes(&planes) {
        assert_eq!(to_planes(&spikes, planes_n), planes);
    }
});
