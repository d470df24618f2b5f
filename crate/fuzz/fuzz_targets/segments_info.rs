#![no_main]

use libfuzzer_sys::fuzz_target;
use pvkit_core::formats::parse_segments_info;

fuzz_target!(|data: &[u8]| {
    let _ = parse_segments_info(data);
});
