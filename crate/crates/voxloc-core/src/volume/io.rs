//! Volume and image file formats.
//!
//! `VVOL1`: 5-byte magic `VVOL1`, newline, one JSON header line
//! `{"shape":[d0,d1,d2],"dtype":"f32le"}`, newline, then `d0·d1·d2`
//! little-endian f32 values with axis 2 fastest. Round trips are
//! bit-identical.
//!
//! Slices export as binary PGM (P5, 8-bit, min–max normalized) for visual
//! inspection, with an optional bounding-box overlay drawn as a
//! max-intensity 1-pixel rectangle.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BBox3D, Slice2D, Volume3D};

const VOL_MAGIC: &[u8; 6] = b"VVOL1\n";

#[derive(Serialize, Deserialize)]
struct VolHeader {
    shape: [usize; 3],
    dtype: String,
}

pub fn save_volume(vol: &Volume3D, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(VOL_MAGIC)?;
    let header = VolHeader {
        shape: vol.shape(),
        dtype: "f32le".to_string(),
    };
    serde_json::to_writer(&mut out, &header)
        .map_err(|e| Error::BadHeader(format!("header serialization failed: {e}")))?;
    out.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(vol.num_voxels() * 4);
    for v in vol.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume3D> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_volume(&bytes)
}

fn parse_volume(bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() < VOL_MAGIC.len() || &bytes[..VOL_MAGIC.len()] != VOL_MAGIC {
        let found = bytes
            .iter()
            .take(5)
            .map(|&b| b as char)
            .collect::<String>();
        return Err(Error::BadMagic {
            expected: "VVOL1".to_string(),
            found,
        });
    }
    let rest = &bytes[VOL_MAGIC.len()..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::BadHeader("missing header line terminator".into()))?;
    let header: VolHeader = serde_json::from_slice(&rest[..newline])
        .map_err(|e| Error::BadHeader(format!("unparseable header: {e}")))?;
    if header.dtype != "f32le" {
        return Err(Error::BadHeader(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    if header.shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(format!(
            "zero extent in header shape {:?}",
            header.shape
        )));
    }
    let payload = &rest[newline + 1..];
    let expected = header.shape.iter().product::<usize>() * 4;
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3D::new(header.shape, data)
}

pub fn save_bbox_json(bbox: &BBox3D, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, bbox)
        .map_err(|e| Error::BadHeader(format!("bbox serialization failed: {e}")))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_bbox_json(path: &Path) -> Result<BBox3D> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let parsed: BBox3D = serde_json::from_str(&text)
        .map_err(|e| Error::BadHeader(format!("unparseable bbox JSON: {e}")))?;
    BBox3D::new(parsed.axes)
}

/// Writes a slice as 8-bit binary PGM, min–max normalized.
///
/// `rect`, when present, is `[[row_lo, row_hi), [col_lo, col_hi)]` and is
/// drawn as a 1-pixel max-intensity rectangle on top of the image.
pub fn write_pgm(slice: &Slice2D, rect: Option<[[usize; 2]; 2]>, path: &Path) -> Result<()> {
    let (h, w) = (slice.height, slice.width);
    let lo = slice.data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = slice.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels: Vec<u8> = slice
        .data
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    if let Some([[r0, r1], [c0, c1]]) = rect {
        let r1 = r1.min(h);
        let c1 = c1.min(w);
        if r0 < r1 && c0 < c1 {
            for c in c0..c1 {
                pixels[r0 * w + c] = 255;
                pixels[(r1 - 1) * w + c] = 255;
            }
            for r in r0..r1 {
                pixels[r * w + c0] = 255;
                pixels[r * w + c1 - 1] = 255;
            }
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(&pixels)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn volume_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..512).map(|_| rng.random::<f32>() * 5.0 - 2.5).collect();
        let vol = Volume3D::new([8, 8, 8], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vvol");
        save_volume(&vol, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded.shape(), vol.shape());
        assert_eq!(loaded.data(), vol.data());
        // Byte-identical on re-save too.
        let path2 = dir.path().join("v2.vvol");
        save_volume(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_detected() {
        let err = parse_volume(b"NOPE!\nrest").unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }), "{err}");
    }

    #[test]
    fn truncated_payload_detected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VVOL1\n");
        bytes.extend_from_slice(br#"{"shape":[2,2,2],"dtype":"f32le"}"#);
        bytes.push(b'\n');
        bytes.extend_from_slice(&[0u8; 7 * 4]); // 7 floats for an 8-voxel volume
        let err = parse_volume(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::Truncated { expected: 32, found: 28 }),
            "{err}"
        );
    }

    #[test]
    fn zero_extent_shape_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VVOL1\n");
        bytes.extend_from_slice(br#"{"shape":[2,0,2],"dtype":"f32le"}"#);
        bytes.push(b'\n');
        let err = parse_volume(&bytes).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(_)), "{err}");
    }

    #[test]
    fn bbox_json_round_trip() {
        let bbox = BBox3D::new([[1, 5], [2, 8], [0, 3]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("box.json");
        save_bbox_json(&bbox, &path).unwrap();
        assert_eq!(load_bbox_json(&path).unwrap(), bbox);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains(r#""axes":[[1,5],[2,8],[0,3]]"#), "{text}");
    }

    #[test]
    fn pgm_has_expected_header_and_overlay() {
        let slice = Slice2D::new(4, 6, (0..24).map(|v| v as f32).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        write_pgm(&slice, Some([[1, 3], [1, 4]]), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n6 4\n255\n"));
        let pixels = &bytes[b"P5\n6 4\n255\n".len()..];
        assert_eq!(pixels.len(), 24);
        assert_eq!(pixels[6 + 1], 255); // rectangle corner at (1,1)
        assert_eq!(pixels[2 * 6 + 3], 255); // and at (2,3)
    }
}
