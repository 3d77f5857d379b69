#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = compdetect::packetize::parse_row(data, 1);
    if let Ok(ds) = compdetect::packetize::read_csv(data) {
        let mut out = Vec::new();
        compdetect::packetize::write_csv(&ds, &mut out).expect("write");
        let again = compdetect::packetize::read_csv(&out[..]).expect("re-read");
        assert_eq!(again.samples.len(), ds.samples.len());
    }
});
