#![no_main]

use compdetect::models::ModelArtifact;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = ModelArtifact::from_bytes(data) {
        assert_eq!(ModelArtifact::from_bytes(&a.to_bytes()).expect("re-load"), a);
    }
});
