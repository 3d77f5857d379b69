#![no_main]

use compdetect::corpus::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Manifest::read(data) {
        let again = Manifest::read(m.to_text().as_bytes()).expect("re-read");
        assert_eq!(again, m);
    }
});
