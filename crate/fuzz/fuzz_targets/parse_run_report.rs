#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = vitsnn::report::parse_run_report(data) {
        let _ = vitsnn::report::tsweep_csv(&r);
        let _ = vitsnn::report::energy_report(&r);
    }
});
