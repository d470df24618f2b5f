#![no_main]

use libfuzzer_sys::fuzz_target;
use pvkit_core::formats::SequenceManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = SequenceManifest::from_json_bytes(data) {
        let again = SequenceManifest::from_json_bytes(m.to_json().unwrap().as_bytes()).unwrap();
        assert_eq!(again, m);
    }
});
