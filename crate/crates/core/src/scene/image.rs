//! RGB images with PPM (P6) and PNG I/O.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `round(255 * clamp(x, 0, 1))` per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "expected {} bytes, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    /// Writes PPM for `.ppm` paths and PNG for `.png`.
    pub fn save(&self, path: &Path) -> Result<()> {
        match extension(path).as_deref() {
            Some("png") => self.save_png(path),
            _ => self.save_ppm(path),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        match extension(path).as_deref() {
            Some("png") => Self::load_png(path),
            _ => Self::load_ppm(path),
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // Skip whitespace and comments.
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Image("truncated PPM header".into()));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| Error::Image("bad PPM header".into()))?,
            );
        }
        if fields[0] != "P6" {
            return Err(Error::Image(format!(
                "unsupported PPM magic {:?}",
                fields[0]
            )));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Image(format!("bad PPM field {s:?}")))
        };
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(Error::Image(format!("unsupported PPM maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(Error::Image("truncated PPM raster".into()));
        }
        Self::from_rgb8(w, h, &bytes[pos..pos + need])
    }

    fn save_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm())?;
        Ok(())
    }

    fn load_ppm(path: &Path) -> Result<Self> {
        Self::decode_ppm(&fs::read(path)?)
    }

    fn save_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(fs::File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Image(e.to_string()))?;
        writer
            .write_image_data(&self.to_rgb8())
            .map_err(|e| Error::Image(e.to_string()))?;
        writer.finish().map_err(|e| Error::Image(e.to_string()))?;
        Ok(())
    }

    fn load_png(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(fs::File::open(path)?);
        let mut reader = png::Decoder::new(file)
            .read_info()
            .map_err(|e| Error::Image(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Image(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image("only 8-bit PNG is supported".into()));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => bytes.to_vec(),
            png::ColorType::Rgba => bytes
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
            other => {
                return Err(Error::Image(format!(
                    "unsupported PNG color type {other:?}"
                )))
            }
        };
        Self::from_rgb8(w, h, &rgb)
    }

    /// Horizontal concatenation, used for side-by-side strips.
    pub fn hstack(images: &[&Image]) -> Result<Image> {
        let Some(first) = images.first() else {
            return Ok(Image::new(0, 0));
        };
        let h = first.height;
        if images.iter().any(|im| im.height != h) {
            return Err(Error::Image("hstack needs equal heights".into()));
        }
        let w: usize = images.iter().map(|im| im.width).sum();
        let mut out = Image::new(w, h);
        for y in 0..h {
            let mut x0 = 0;
            for im in images {
                for x in 0..im.width {
                    out.set_pixel(x0 + x, y, im.pixel(x, y));
                }
                x0 += im.width;
            }
        }
        Ok(out)
    }
}

pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image {
        let mut img = Image::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        img
    }

    #[test]
    fn ppm_round_trip() {
        let img = sample();
        assert_eq!(Image::decode_ppm(&img.encode_ppm()).unwrap(), img);
    }

    #[test]
    fn ppm_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = Image::decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.2]);
    }

    #[test]
    fn ppm_truncated_raster() {
        let bytes = b"P6\n2 2\n255\n\x00\x00".to_vec();
        assert!(Image::decode_ppm(&bytes).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = sample();
        img.save(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), img);
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5), 128);
    }
}
