#![no_main]

use libfuzzer_sys::fuzz_target;
use pvkit_core::formats::Tensor;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Tensor::from_bytes(data) {
        // anything accepted must re-encode to the same bytes
        assert_eq!(t.to_bytes(), data);
    }
});
