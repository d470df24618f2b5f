//! 16-bit grayscale depth/disparity PNGs and RGB panoptic PNGs.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_bytes};
use crate::depth::{disparity_to_depth, CameraIntrinsics, DepthMap};
use crate::error::{Error, Result};
use crate::metrics::{PanopticMap, SegmentInfo};

/// Largest decoded image accepted, in bytes.
const DECODE_LIMIT: usize = 256 << 20;

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let decoder = png::Decoder::new_with_limits(Cursor::new(bytes), png::Limits { bytes: DECODE_LIMIT });
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::PngLayout("image too large".into()))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data)?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

fn encode(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let (w, h) = (
        u32::try_from(width).map_err(|_| Error::PngLayout(format!("width {width} too large")))?,
        u32::try_from(height).map_err(|_| Error::PngLayout(format!("height {height} too large")))?,
    );
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, w, h);
        encoder.set_color(color);
        encoder.set_depth(depth);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(data)?;
        writer.finish()?;
    }
    Ok(out)
}

/// Raw 16-bit grayscale samples, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray16 {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u16>,
}

impl Gray16 {
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let d = decode(bytes)?;
        if d.color != png::ColorType::Grayscale {
            return Err(Error::PngLayout(format!("expected grayscale, got {:?}", d.color)));
        }
        if d.depth != png::BitDepth::Sixteen {
            return Err(Error::PngLayout(format!(
                "{}-bit PNG given; depth and disparity maps must be 16-bit grayscale",
                d.depth as u8
            )));
        }
        let values = d
            .data
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        Ok(Gray16 {
            width: d.width,
            height: d.height,
            values,
        })
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let data: Vec<u8> = self.values.iter().flat_map(|v| v.to_be_bytes()).collect();
        encode(
            self.width,
            self.height,
            png::ColorType::Grayscale,
            png::BitDepth::Sixteen,
            &data,
        )
    }
}

/// Interpretation of a 16-bit PNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthPngMode {
    /// `meters = value / 256`, 0 invalid.
    Depth256,
    /// `disparity = (value - 1) / 256`, 0 invalid.
    CityscapesDisparity,
}

/// `value / 256` meters; 0 is invalid.
pub fn decode_depth256(v: u16) -> f64 {
    v as f64 / 256.0
}

/// Nearest 1/256 step; valid depths below half a step are kept as the
/// smallest valid value rather than collapsing to invalid.
pub fn encode_depth256(meters: f64) -> Result<u16> {
    if meters == 0.0 {
        return Ok(0);
    }
    let v = (meters * 256.0).round();
    if !(0.0..=u16::MAX as f64).contains(&v) {
        return Err(Error::invalid(
            "depth PNG",
            format!("depth {meters} m not representable in 16 bits"),
        ));
    }
    Ok((v as u16).max(1))
}

/// `round(d * 256) + 1`; disparities at or below zero encode as invalid.
pub fn encode_disparity(disparity: f64) -> Result<u16> {
    if disparity <= 0.0 {
        return Ok(0);
    }
    let v = (disparity * 256.0).round() + 1.0;
    if v > u16::MAX as f64 {
        return Err(Error::invalid(
            "disparity PNG",
            format!("disparity {disparity} not representable in 16 bits"),
        ));
    }
    Ok(v as u16)
}

/// Decodes depth from PNG bytes. Disparity mode needs `focal_x` and
/// `baseline` in the intrinsics.
pub fn depth_from_png_bytes(bytes: &[u8], mode: DepthPngMode, intr: Option<&CameraIntrinsics>) -> Result<DepthMap> {
    let g = Gray16::from_png_bytes(bytes)?;
    match mode {
        DepthPngMode::Depth256 => DepthMap::new(
            g.width,
            g.height,
            g.values.iter().map(|&v| decode_depth256(v)).collect(),
        ),
        DepthPngMode::CityscapesDisparity => {
            let intr = intr.ok_or_else(|| Error::invalid("disparity PNG", "camera intrinsics required"))?;
            disparity_to_depth(&g.values, g.width, g.height, intr)
        }
    }
}

pub fn depth_to_png_bytes(map: &DepthMap, mode: DepthPngMode, intr: Option<&CameraIntrinsics>) -> Result<Vec<u8>> {
    let values = match mode {
        DepthPngMode::Depth256 => map
            .values()
            .iter()
            .map(|&d| encode_depth256(d))
            .collect::<Result<Vec<_>>>()?,
        DepthPngMode::CityscapesDisparity => {
            let intr = intr.ok_or_else(|| Error::invalid("disparity PNG", "camera intrinsics required"))?;
            let (Some(fx), Some(b)) = (intr.focal_x, intr.baseline) else {
                return Err(Error::invalid("disparity PNG", "focal_x and baseline required"));
            };
            map.values()
                .iter()
                .map(|&d| if d > 0.0 { encode_disparity(b * fx / d) } else { Ok(0) })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Gray16 {
        width: map.width(),
        height: map.height(),
        values,
    }
    .to_png_bytes()
}

pub fn read_depth_png(path: impl AsRef<Path>, mode: DepthPngMode, intr: Option<&CameraIntrinsics>) -> Result<DepthMap> {
    depth_from_png_bytes(&read_bytes(path)?, mode, intr)
}

pub fn write_depth_png(
    path: impl AsRef<Path>,
    map: &DepthMap,
    mode: DepthPngMode,
    intr: Option<&CameraIntrinsics>,
) -> Result<()> {
    write_bytes(path, &depth_to_png_bytes(map, mode, intr)?)
}

/// Raw disparity samples, for callers that need the un-converted values.
pub fn read_disparity_values(path: impl AsRef<Path>) -> Result<Gray16> {
    Gray16::from_png_bytes(&read_bytes(path)?)
}

/// `[r, g, b]` of a segment id; ids must fit in 24 bits.
pub fn id_to_rgb(id: u32) -> Result<[u8; 3]> {
    if id >= 1 << 24 {
        return Err(Error::invalid(
            "panoptic PNG",
            format!("segment id {id} exceeds 24 bits"),
        ));
    }
    Ok([(id & 0xff) as u8, ((id >> 8) & 0xff) as u8, (id >> 16) as u8])
}

pub fn rgb_to_id(rgb: [u8; 3]) -> u32 {
    rgb[0] as u32 + 256 * rgb[1] as u32 + 65536 * rgb[2] as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentsInfoDoc {
    pub version: u32,
    pub segments_info: Vec<SegmentInfo>,
}

pub fn parse_segments_info(bytes: &[u8]) -> Result<Vec<SegmentInfo>> {
    let doc: SegmentsInfoDoc = serde_json::from_slice(bytes)?;
    if doc.version != 1 {
        return Err(Error::invalid(
            "segments_info",
            format!("unsupported version {}", doc.version),
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = doc.segments_info.iter().find(|s| !seen.insert(s.id)) {
        return Err(Error::DuplicateSegment(dup.id));
    }
    Ok(doc.segments_info)
}

pub fn segments_info_to_json(map: &PanopticMap) -> Result<String> {
    let doc = SegmentsInfoDoc {
        version: 1,
        segments_info: map.segments().copied().collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn panoptic_from_png_bytes(png_bytes: &[u8], segments_info_json: &[u8]) -> Result<PanopticMap> {
    let d = decode(png_bytes)?;
    if d.color != png::ColorType::Rgb || d.depth != png::BitDepth::Eight {
        return Err(Error::PngLayout(format!(
            "panoptic PNG must be 8-bit RGB, got {:?} at {} bits",
            d.color, d.depth as u8
        )));
    }
    let ids = d.data.chunks_exact(3).map(|c| rgb_to_id([c[0], c[1], c[2]])).collect();
    PanopticMap::new(d.width, d.height, ids, parse_segments_info(segments_info_json)?)
}

pub fn panoptic_to_png_bytes(map: &PanopticMap) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(map.ids().len() * 3);
    for &id in map.ids() {
        data.extend_from_slice(&id_to_rgb(id)?);
    }
    encode(
        map.width(),
        map.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &data,
    )
}

pub fn read_panoptic_png(png_path: impl AsRef<Path>, segments_info_path: impl AsRef<Path>) -> Result<PanopticMap> {
    panoptic_from_png_bytes(&read_bytes(png_path)?, &read_bytes(segments_info_path)?)
}

pub fn write_panoptic_png(
    map: &PanopticMap,
    png_path: impl AsRef<Path>,
    segments_info_path: impl AsRef<Path>,
) -> Result<()> {
    write_bytes(png_path, &panoptic_to_png_bytes(map)?)?;
    write_bytes(segments_info_path, segments_info_to_json(map)?.as_bytes())
}

/// Renders an 8-bit grayscale preview of a depth map (near = bright,
/// invalid = black).
pub fn depth_preview_png(map: &DepthMap) -> Result<Vec<u8>> {
    let (lo, hi) = map.valid_range().unwrap_or((0.0, 1.0));
    let span = (hi - lo).max(f64::EPSILON);
    let data: Vec<u8> = map
        .values()
        .iter()
        .map(|&d| {
            if d > 0.0 {
                (255.0 - 200.0 * (d - lo) / span).round() as u8
            } else {
                0
            }
        })
        .collect();
    encode(
        map.width(),
        map.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_300() {
        assert_eq!(id_to_rgb(300).unwrap(), [44, 1, 0]);
        assert_eq!(rgb_to_id([44, 1, 0]), 300);
        assert_eq!(rgb_to_id([0, 0, 0]), 0);
        assert!(id_to_rgb(1 << 24).is_err());
    }

    #[test]
    fn depth256_values() {
        assert_eq!(decode_depth256(2560), 10.0);
        assert_eq!(decode_depth256(0), 0.0);
        assert_eq!(encode_depth256(10.0).unwrap(), 2560);
        assert_eq!(encode_depth256(0.0001).unwrap(), 1);
        assert!(encode_depth256(300.0).is_err());
    }

    #[test]
    fn eight_bit_rejected() {
        let png = encode(2, 1, png::ColorType::Grayscale, png::BitDepth::Eight, &[1, 2]).unwrap();
        let err = Gray16::from_png_bytes(&png).unwrap_err().to_string();
        assert!(err.contains("8-bit"), "{err}");
    }

    #[test]
    fn gray16_round_trip() {
        let g = Gray16 {
            width: 3,
            height: 2,
            values: vec![0, 1, 255, 256, 65535, 2560],
        };
        assert_eq!(Gray16::from_png_bytes(&g.to_png_bytes().unwrap()).unwrap(), g);
    }

    #[test]
    fn segments_info_duplicates() {
        let json = br#"{"version":1,"segments_info":[{"id":1,"category_id":2,"is_thing":true},{"id":1,"category_id":3,"is_thing":false}]}"#;
        assert!(matches!(parse_segments_info(json), Err(Error::DuplicateSegment(1))));
        assert!(parse_segments_info(br#"{"version":2,"segments_info":[]}"#).is_err());
    }
}
