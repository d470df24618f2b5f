#![no_main]

use libfuzzer_sys::fuzz_target;
use pvkit_core::formats::{fusion_params_from_json_bytes, fusion_params_to_json};

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = fusion_params_from_json_bytes(data) {
        let json = fusion_params_to_json(&p).unwrap();
        assert_eq!(fusion_params_from_json_bytes(json.as_bytes()).unwrap(), p);
    }
});
