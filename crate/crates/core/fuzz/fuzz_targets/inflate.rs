#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = compdetect::corpus::inflate(data);
    let packed = compdetect::corpus::deflate(data);
    assert_eq!(compdetect::corpus::inflate(&packed).expect("round trip"), data);
});
