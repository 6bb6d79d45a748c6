//! Binary PGM/PPM reading and writing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major image with values in `[0, 1]`, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DataLength {
                shape: vec![height, width, channels],
                expected: width * height * channels,
                actual: data.len(),
            });
        }
        let data = data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// `[h·w, c]` pixel tensor.
    pub fn to_pixels(&self) -> Tensor {
        Tensor::new(vec![self.height * self.width, self.channels], self.data.clone()).expect("length checked")
    }

    /// Image from a `[h·w, c]` tensor, clamping to `[0, 1]`.
    pub fn from_pixels(pixels: &Tensor, height: usize, width: usize) -> Result<Self> {
        let (n, c) = pixels.dims2("from_pixels")?;
        if n != height * width {
            return Err(Error::invalid(format!("{n} pixels do not form a {height}x{width} image")));
        }
        Self::new(width, height, c, pixels.data().to_vec())
    }

    /// 8-bit P5 (gray) or P6 (RGB) encoding.
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round() as u8));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone().into(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{what} out of range")))
    }
}

/// Decodes binary PGM/PPM bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &str) -> Result<ImageBuffer> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        path: path.to_string(),
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err("expected magic P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if !(1..=65535).contains(&maxval) {
        return Err(c.err(format!("maxval {maxval} outside 1..=65535")));
    }
    if width == 0 || height == 0 {
        return Err(c.err("zero image extent"));
    }
    match c.bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected whitespace before pixel data")),
    }
    let wide = maxval > 255;
    let count = width * height * channels;
    let need = count * if wide { 2 } else { 1 };
    let payload = &bytes[c.pos..];
    if payload.len() < need {
        c.pos = bytes.len();
        return Err(c.err(format!("truncated pixel data: need {need} bytes, found {}", payload.len())));
    }
    let scale = maxval as f64;
    let data = if wide {
        payload[..need]
            .chunks(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / scale)
            .collect()
    } else {
        payload[..need].iter().map(|&b| b as f64 / scale).collect()
    };
    ImageBuffer::new(width, height, channels, data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}

pub fn save_image(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    image.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_8bit_normalization() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0, 255, 128, 64]);
        let img = decode(&bytes, "t.pgm").unwrap();
        assert_eq!(img.channels, 1);
        assert_eq!(img.data, vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn red_pixel_keeps_channel_order() {
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend([255, 0, 0]);
        assert_eq!(decode(&bytes, "r.ppm").unwrap().data, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let mut bytes = b"P5\n# comment\n1 1\n65535\n".to_vec();
        bytes.extend([0x80, 0x00]);
        let img = decode(&bytes, "w.pgm").unwrap();
        assert!((img.data[0] - 32768.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn round_trip_at_8_bits() {
        let data: Vec<f64> = (0..24).map(|i| (i * 10) as f64 / 255.0).collect();
        let img = ImageBuffer::new(4, 2, 3, data).unwrap();
        let back = decode(&img.encode(), "rt").unwrap();
        assert_eq!(back, img);
        let again = decode(&back.encode(), "rt").unwrap();
        assert_eq!(again.encode(), img.encode());
    }

    #[test]
    fn errors_carry_offsets() {
        match decode(b"P7\n1 1\n255\n\0", "x") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match decode(b"P5\n2 x\n", "x") {
            Err(Error::Parse { offset, message, .. }) => {
                assert_eq!(offset, 5);
                assert!(message.contains("height"));
            }
            other => panic!("{other:?}"),
        }
        match decode(b"P6\n2 2\n255\n\x01\x02", "x") {
            Err(Error::Parse { offset, message, .. }) => {
                assert_eq!(offset, 13);
                assert!(message.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn values_clamped_on_construction() {
        let img = ImageBuffer::new(1, 1, 1, vec![1.7]).unwrap();
        assert_eq!(img.data, vec![1.0]);
    }
}
