//! Sequence manifests: the ordered annotated frames of one video.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::read_bytes;
use crate::error::{Error, Result};
use crate::metrics::VpqConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panoptic_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries_path: Option<PathBuf>,
}

fn default_version() -> u32 {
    1
}

fn default_stride() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceManifest {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_stride")]
    pub sampling_stride: u32,
    #[serde(default)]
    pub frames: Vec<FrameEntry>,
}

impl Default for SequenceManifest {
    fn default() -> Self {
        SequenceManifest {
            version: 1,
            sampling_stride: 5,
            frames: Vec::new(),
        }
    }
}

impl SequenceManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::invalid(
                "manifest",
                format!("unsupported version {}", self.version),
            ));
        }
        if self.sampling_stride == 0 {
            return Err(Error::invalid("manifest", "sampling_stride must be positive"));
        }
        for (position, pair) in self.frames.windows(2).enumerate() {
            if pair[1].frame_index <= pair[0].frame_index {
                return Err(Error::FrameOrder {
                    index: pair[1].frame_index,
                    position: position + 1,
                });
            }
        }
        Ok(())
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let m: SequenceManifest = serde_json::from_slice(bytes)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// VPQ windows matching this manifest's sampling stride.
    pub fn vpq_config(&self) -> VpqConfig {
        VpqConfig::from_stride(self.sampling_stride)
    }

    /// Resolves a frame path against the manifest's directory when relative.
    pub fn resolve(base: &Path, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            base.join(path)
        }
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SequenceManifest> {
    SequenceManifest::from_json_bytes(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sequence_is_valid() {
        let m = SequenceManifest::from_json_bytes(br#"{"frames": []}"#).unwrap();
        assert_eq!(m.sampling_stride, 5);
        assert!(m.frames.is_empty());
    }

    #[test]
    fn out_of_order_rejected_with_index() {
        let json = br#"{"frames":[{"frame_index":0},{"frame_index":5},{"frame_index":5}]}"#;
        match SequenceManifest::from_json_bytes(json) {
            Err(Error::FrameOrder { index, position }) => assert_eq!((index, position), (5, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json() {
        assert!(matches!(
            SequenceManifest::from_json_bytes(b"{frames"),
            Err(Error::Json(_))
        ));
    }

    #[test]
    fn stride_drives_windows() {
        let json = br#"{"sampling_stride":5,"frames":[{"frame_index":0},{"frame_index":5},{"frame_index":10},{"frame_index":15}]}"#;
        let m = SequenceManifest::from_json_bytes(json).unwrap();
        let cfg = m.vpq_config();
        let windows: Vec<usize> = cfg.k_labels.iter().map(|k| cfg.window_len(*k)).collect();
        assert_eq!(cfg.k_labels, vec![0, 5, 10, 15]);
        assert_eq!(windows, vec![1, 2, 3, 4]);
        assert!(windows.iter().all(|w| *w <= m.frames.len()));
    }
}
