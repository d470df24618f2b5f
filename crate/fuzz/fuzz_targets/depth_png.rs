#![no_main]

use libfuzzer_sys::fuzz_target;
use pvkit_core::depth::CameraIntrinsics;
use pvkit_core::formats::{depth_from_png_bytes, DepthPngMode, Gray16};

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = Gray16::from_png_bytes(data) {
        assert_eq!(g.values.len(), g.width * g.height);
    }
    let intr = CameraIntrinsics {
        focal_x: Some(2262.52),
        focal_y: 2265.30,
        principal_x: Some(1096.98),
        principal_y: 513.137,
        baseline: Some(0.209313),
    };
    let _ = depth_from_png_bytes(data, DepthPngMode::Depth256, None);
    let _ = depth_from_png_bytes(data, DepthPngMode::CityscapesDisparity, Some(&intr));
    let _ = depth_from_png_bytes(data, DepthPngMode::CityscapesDisparity, None);
});
