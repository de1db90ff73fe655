//! Little-endian byte helpers shared by the scene container and the wire
//! payload format.

use crate::error::{Error, Result};
use crate::scene::GaussianCloud;

/// Scalar width used for Gaussian parameter arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// 32-bit floats (checkpoint and reference payload layout).
    #[default]
    F32,
    /// 64-bit floats; lossless for in-memory parameters.
    F64,
}

impl Precision {
    pub const fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            other => Err(Error::Protocol(format!("unknown precision tag {other}"))),
        }
    }

    /// Bytes per Gaussian: id + 3 + 4 + 3 + k + 1 scalars.
    pub const fn stride(self, feature_dim: usize) -> usize {
        8 + (11 + feature_dim) * self.width()
    }
}

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn scalar(&mut self, v: f64, precision: Precision) {
        match precision {
            Precision::F32 => self.f32(v as f32),
            Precision::F64 => self.f64(v),
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], section: &'static str) -> Self {
        Self {
            buf,
            pos: 0,
            section,
        }
    }

    pub fn set_section(&mut self, section: &'static str) {
        self.section = section;
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                section: self.section,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn tag(&mut self) -> Result<[u8; 4]> {
        self.array()
    }

    pub fn scalar(&mut self, precision: Precision) -> Result<f64> {
        match precision {
            Precision::F32 => Ok(self.f32()? as f64),
            Precision::F64 => self.f64(),
        }
    }
}

/// Writes the per-property arrays of `cloud` (no count prefix).
pub fn write_cloud_arrays(w: &mut Writer, cloud: &GaussianCloud, precision: Precision) {
    w.buf
        .reserve(cloud.len() * precision.stride(cloud.feature_dim()));
    for &id in &cloud.ids {
        w.u64(id);
    }
    for p in &cloud.positions {
        p.iter().for_each(|&v| w.scalar(v, precision));
    }
    for q in &cloud.rotations {
        q.iter().for_each(|&v| w.scalar(v, precision));
    }
    for s in &cloud.log_scales {
        s.iter().for_each(|&v| w.scalar(v, precision));
    }
    for &f in &cloud.features {
        w.scalar(f, precision);
    }
    for &o in &cloud.opacity_logits {
        w.scalar(o, precision);
    }
}

/// Reads `count` Gaussians laid out by [`write_cloud_arrays`]. Fails with
/// [`Error::CountOverflow`] when the declared count cannot fit in the bytes
/// left, and with [`Error::NonMonotoneIds`] when IDs are not strictly ascending.
pub fn read_cloud_arrays(
    r: &mut Reader<'_>,
    count: u64,
    feature_dim: usize,
    precision: Precision,
) -> Result<GaussianCloud> {
    let stride = precision.stride(feature_dim) as u64;
    let available = r.remaining();
    match count.checked_mul(stride) {
        None => return Err(Error::CountOverflow { count, available }),
        Some(total) if total > available as u64 => {
            return Err(Error::Truncated { section: r.section })
        }
        Some(_) => {}
    }
    let n = count as usize;
    let mut cloud = GaussianCloud::with_feature_dim(feature_dim);
    cloud.ids.reserve(n);
    for i in 0..n {
        let id = r.u64()?;
        if i > 0 && cloud.ids[i - 1] >= id {
            return Err(Error::NonMonotoneIds { index: i });
        }
        cloud.ids.push(id);
    }
    for _ in 0..n {
        cloud.positions.push([
            r.scalar(precision)?,
            r.scalar(precision)?,
            r.scalar(precision)?,
        ]);
    }
    for _ in 0..n {
        cloud.rotations.push([
            r.scalar(precision)?,
            r.scalar(precision)?,
            r.scalar(precision)?,
            r.scalar(precision)?,
        ]);
    }
    for _ in 0..n {
        cloud.log_scales.push([
            r.scalar(precision)?,
            r.scalar(precision)?,
            r.scalar(precision)?,
        ]);
    }
    cloud.features.reserve(n * feature_dim);
    for _ in 0..n * feature_dim {
        cloud.features.push(r.scalar(precision)?);
    }
    for _ in 0..n {
        cloud.opacity_logits.push(r.scalar(precision)?);
    }
    Ok(cloud)
}

/// FNV-1a over the bit patterns of every field; used to compare models
/// produced by different runs.
pub fn cloud_checksum(cloud: &GaussianCloud) -> u64 {
    let mut w = Writer::new();
    w.u64(cloud.len() as u64);
    write_cloud_arrays(&mut w, cloud, Precision::F64);
    fnv1a(&w.buf)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
