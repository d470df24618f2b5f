#![no_main]

use libfuzzer_sys::fuzz_target;
use pvkit_core::formats::{panoptic_from_png_bytes, panoptic_to_png_bytes, segments_info_to_json};

// Layout: u16 LE length of the segments_info JSON, the JSON, then the PNG.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = u16::from_le_bytes([data[0], data[1]]) as usize;
    let rest = &data[2..];
    let (json, png) = rest.split_at(n.min(rest.len()));
    if let Ok(map) = panoptic_from_png_bytes(png, json) {
        let png = panoptic_to_png_bytes(&map).unwrap();
        let json = segments_info_to_json(&map).unwrap();
        assert_eq!(panoptic_from_png_bytes(&png, json.as_bytes()).unwrap(), map);
    }
});
