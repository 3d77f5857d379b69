#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = compdetect::capture::detect_tls(data);
    let _ = compdetect::capture::triage(data, compdetect::capture::DEFAULT_SIGNIFICANCE);
    if data.len() >= 4 {
        let _ = compdetect::features::quadrant_chi_square(data).expect("four or more bytes");
    }
});
