#![no_main]

use libfuzzer_sys::fuzz_target;
use pvkit_core::formats::intrinsics_from_json_bytes;

fuzz_target!(|data: &[u8]| {
    if let Ok(intr) = intrinsics_from_json_bytes(data) {
        assert!(intr.validate().is_ok());
    }
});
