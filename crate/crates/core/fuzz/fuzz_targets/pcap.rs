#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(capture) = compdetect::capture::parse_pcap(data) {
        // Whatever parses must survive a write/read cycle.
        if let Ok(bytes) = compdetect::capture::pcap_bytes(&capture.packets) {
            let again = compdetect::capture::parse_pcap(&bytes).expect("re-parse");
            assert_eq!(again.packets.len(), capture.packets.len());
        }
    }
});
