//! Readers and writers for every on-disk artifact.
//!
//! Each file reader has a byte-slice counterpart (`*_from_bytes`,
//! `from_json_bytes`) that does all of the parsing; the path functions only
//! add I/O. Readers are reentrant. Concurrent writes to one path are not
//! coordinated.

mod manifest;
mod png_io;
mod queries;
mod tensor;

pub use manifest::{read_manifest, FrameEntry, SequenceManifest};
pub use png_io::{
    decode_depth256, depth_from_png_bytes, depth_preview_png, depth_to_png_bytes, encode_depth256, encode_disparity,
    id_to_rgb, panoptic_from_png_bytes, panoptic_to_png_bytes, parse_segments_info, read_depth_png,
    read_disparity_values, read_panoptic_png, rgb_to_id, segments_info_to_json, write_depth_png, write_panoptic_png,
    DepthPngMode, Gray16, SegmentsInfoDoc,
};
pub use queries::{query_set_from_parts, read_query_set, write_query_set, QuerySidecar};
pub use tensor::{read_tensor, write_tensor, Dtype, Tensor, TensorData, MAGIC};

use std::path::Path;

use ndarray::Ix3;

use crate::depth::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::fusion::{FeatureMap, FusionParams, FusionParamsDoc};

pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `{focal_x, focal_y, principal_x, principal_y, baseline}`; validated.
pub fn intrinsics_from_json_bytes(bytes: &[u8]) -> Result<CameraIntrinsics> {
    let intr: CameraIntrinsics = serde_json::from_slice(bytes)?;
    intr.validate()?;
    Ok(intr)
}

pub fn read_intrinsics(path: impl AsRef<Path>) -> Result<CameraIntrinsics> {
    intrinsics_from_json_bytes(&read_bytes(path)?)
}

/// Fusion parameters from nested JSON arrays.
pub fn fusion_params_from_json_bytes(bytes: &[u8]) -> Result<FusionParams> {
    serde_json::from_slice::<FusionParamsDoc>(bytes)?.try_into()
}

pub fn fusion_params_to_json(p: &FusionParams) -> Result<String> {
    Ok(serde_json::to_string_pretty(&FusionParamsDoc::from(p))?)
}

/// A rank-3 `[C, H, W]` tensor as a feature map of scale `scale`.
pub fn feature_map_from_tensor(t: &Tensor, scale: u8) -> Result<FeatureMap> {
    let data = t.to_array().into_dimensionality::<Ix3>().map_err(|_| {
        Error::shape(
            "feature map tensor",
            "rank 3 [C, H, W]",
            format!("rank {}", t.dims().len()),
        )
    })?;
    FeatureMap::new(scale, data)
}

pub fn feature_map_to_tensor(f: &FeatureMap, dtype: Dtype) -> Result<Tensor> {
    Tensor::from_array(&f.data().clone().into_dyn(), dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intrinsics_json() {
        let intr = intrinsics_from_json_bytes(
            br#"{"focal_x":2262.52,"focal_y":2265.3,"principal_x":1096.98,"principal_y":513.137,"baseline":0.209313}"#,
        )
        .unwrap();
        assert_eq!(intr.baseline, Some(0.209313));
        assert!(intrinsics_from_json_bytes(br#"{"focal_y":-1,"principal_y":0}"#).is_err());
    }

    #[test]
    fn io_errors_are_io() {
        let e = read_bytes("/definitely/not/here.pvt").unwrap_err();
        assert!(e.is_io());
    }
}
