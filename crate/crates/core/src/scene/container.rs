//! Binary scene container.
//!
//! ```text
//! "DOGS" | version u32
//! "CAMS" | count u64 | per view: id u64, fx fy cx cy f64, width height u32,
//!                      quaternion 4xf64, translation 3xf64, path (u32 len + utf-8)
//! "PNTS" | count u64 | xyz 3xf32 per point | rgb 3xu8 per point
//! "GSPL" | count u64 | k u32 | ids u64 | positions 3xf32 | quaternions 4xf32
//!                    | log_scales 3xf32 | features kxf32 | opacity_logits f32
//! ```
//! All integers and floats are little-endian. GSPL is optional.

use std::fs;
use std::path::Path;

use super::{CameraView, SceneDataset, ScenePoint};
use crate::codec::{read_cloud_arrays, write_cloud_arrays, Precision, Reader, Writer};
use crate::error::{Error, Result};
use crate::scene::GaussianCloud;

pub const MAGIC: [u8; 4] = *b"DOGS";
pub const VERSION: u32 = 1;

const TAG_CAMS: [u8; 4] = *b"CAMS";
const TAG_PNTS: [u8; 4] = *b"PNTS";
const TAG_GSPL: [u8; 4] = *b"GSPL";

pub fn encode_scene(dataset: &SceneDataset) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&MAGIC);
    w.u32(VERSION);

    w.bytes(&TAG_CAMS);
    w.u64(dataset.views.len() as u64);
    for v in &dataset.views {
        w.u64(v.view_id);
        for x in [v.fx, v.fy, v.cx, v.cy] {
            w.f64(x);
        }
        w.u32(v.width);
        w.u32(v.height);
        v.rotation.iter().for_each(|&x| w.f64(x));
        v.translation.iter().for_each(|&x| w.f64(x));
        w.u32(v.image_path.len() as u32);
        w.bytes(v.image_path.as_bytes());
    }

    w.bytes(&TAG_PNTS);
    w.u64(dataset.points.len() as u64);
    for p in &dataset.points {
        p.position.iter().for_each(|&x| w.f32(x));
    }
    for p in &dataset.points {
        w.bytes(&p.rgb);
    }

    if let Some(cloud) = &dataset.checkpoint {
        encode_checkpoint_section(&mut w, cloud);
    }
    w.into_inner()
}

fn encode_checkpoint_section(w: &mut Writer, cloud: &GaussianCloud) {
    w.bytes(&TAG_GSPL);
    w.u64(cloud.len() as u64);
    w.u32(cloud.feature_dim() as u32);
    write_cloud_arrays(w, cloud, Precision::F32);
}

pub fn decode_scene(bytes: &[u8]) -> Result<SceneDataset> {
    let mut r = Reader::new(bytes, "header");
    let magic = r.tag()?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }

    let mut dataset = SceneDataset::default();
    while !r.is_empty() {
        r.set_section("section tag");
        match r.tag()? {
            TAG_CAMS => {
                r.set_section("CAMS");
                dataset.views = read_cameras(&mut r)?;
            }
            TAG_PNTS => {
                r.set_section("PNTS");
                dataset.points = read_points(&mut r)?;
            }
            TAG_GSPL => {
                r.set_section("GSPL");
                dataset.checkpoint = Some(read_checkpoint(&mut r)?);
            }
            other => return Err(Error::UnknownSection(other)),
        }
    }
    Ok(dataset)
}

fn read_cameras(r: &mut Reader<'_>) -> Result<Vec<CameraView>> {
    let count = r.u64()?;
    // Smallest possible view record is 108 bytes.
    if count.saturating_mul(108) > r.remaining() as u64 {
        return Err(Error::Truncated { section: "CAMS" });
    }
    let mut views = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let view_id = r.u64()?;
        let (fx, fy, cx, cy) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let (width, height) = (r.u32()?, r.u32()?);
        let rotation = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let translation = [r.f64()?, r.f64()?, r.f64()?];
        let len = r.u32()? as usize;
        let image_path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::InvalidPath)?
            .to_owned();
        views.push(CameraView {
            view_id,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
            image_path,
        });
    }
    Ok(views)
}

fn read_points(r: &mut Reader<'_>) -> Result<Vec<ScenePoint>> {
    let count = r.u64()?;
    if count.saturating_mul(15) > r.remaining() as u64 {
        return Err(Error::Truncated { section: "PNTS" });
    }
    let n = count as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push(ScenePoint {
            position: [r.f32()?, r.f32()?, r.f32()?],
            rgb: [0; 3],
        });
    }
    for p in &mut points {
        p.rgb.copy_from_slice(r.take(3)?);
    }
    Ok(points)
}

fn read_checkpoint(r: &mut Reader<'_>) -> Result<GaussianCloud> {
    let count = r.u64()?;
    let k = r.u32()? as usize;
    read_cloud_arrays(r, count, k, Precision::F32).map_err(|e| match e {
        Error::CountOverflow { .. } => Error::Truncated { section: "GSPL" },
        e => e,
    })
}

pub fn save_scene(dataset: &SceneDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_scene(dataset))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneDataset> {
    decode_scene(&fs::read(path)?)
}

/// Writes a file holding only the container header and a GSPL section.
pub fn save_checkpoint(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(&MAGIC);
    w.u32(VERSION);
    encode_checkpoint_section(&mut w, cloud);
    fs::write(path, w.into_inner())?;
    Ok(())
}

/// Loads the GSPL section of a container file.
pub fn load_checkpoint(path: &Path) -> Result<GaussianCloud> {
    load_scene(path)?
        .checkpoint
        .ok_or(Error::Truncated { section: "GSPL" })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{GaussianPrimitive, ShDegree};

    pub(crate) fn sample_dataset() -> SceneDataset {
        let view = CameraView {
            view_id: 7,
            fx: 100.0,
            fy: 101.5,
            cx: 32.0,
            cy: 31.0,
            width: 64,
            height: 62,
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.1, -0.2, 5.0],
            image_path: "images/007.ppm".into(),
        };
        SceneDataset {
            points: vec![
                ScenePoint {
                    position: [0.5, 1.5, -2.0],
                    rgb: [255, 0, 12],
                },
                ScenePoint {
                    position: [-1.25, 0.0, 3.0],
                    rgb: [1, 2, 3],
                },
            ],
            views: vec![view],
            checkpoint: None,
        }
    }

    #[test]
    fn round_trip_two_points_one_view() {
        let d = sample_dataset();
        assert_eq!(decode_scene(&encode_scene(&d)).unwrap(), d);
    }

    #[test]
    fn empty_points_round_trip() {
        let mut d = sample_dataset();
        d.points.clear();
        assert_eq!(decode_scene(&encode_scene(&d)).unwrap(), d);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut d = sample_dataset();
        let mut cloud = GaussianCloud::new(ShDegree::Zero);
        cloud.push(&GaussianPrimitive {
            id: 3,
            position: [1.0, 2.0, 3.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [-1.0, -2.0, -0.5],
            features: vec![0.25, 0.5, 0.75],
            opacity_logit: -2.0,
        });
        d.checkpoint = Some(cloud);
        assert_eq!(decode_scene(&encode_scene(&d)).unwrap(), d);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_scene(&sample_dataset());
        bytes[0] = b'X';
        assert!(matches!(decode_scene(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode_scene(&sample_dataset());
        bytes[4] = 99;
        assert!(matches!(
            decode_scene(&bytes),
            Err(Error::UnsupportedVersion { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_section() {
        let bytes = encode_scene(&sample_dataset());
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(
            decode_scene(cut),
            Err(Error::Truncated { section: "PNTS" })
        ));
    }

    #[test]
    fn unknown_section() {
        let mut bytes = encode_scene(&sample_dataset());
        bytes.extend_from_slice(b"ZZZZ");
        assert!(matches!(
            decode_scene(&bytes),
            Err(Error::UnknownSection(_))
        ));
    }
}
