#![no_main]

use libfuzzer_sys::fuzz_target;
use vitsnn::calibrate::ThresholdSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = ThresholdSet::from_json_bytes(data) {
        let bytes = set.to_json_bytes().expect("re-encode");
        assert_eq!(ThresholdSet::from_json_bytes(&bytes).expect("re-parse"), set);
    }
});
