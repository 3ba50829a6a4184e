//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::grad::ImageTensor;
use crate::{Error, Result};

/// Encodes `x` as P6 (3 channels) or P5 (1 channel); values are mapped by
/// `round(v · 255)` after clamping to `[0, 1]`.
pub fn encode(x: &ImageTensor) -> Vec<u8> {
    let magic = if x.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", x.width(), x.height()).into_bytes();
    out.extend(x.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Raster {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return self.fail(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("");
        text.parse().or_else(|_| {
            self.pos = start;
            self.fail(format!("{what} out of range"))
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<ImageTensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return cur.fail("expected magic P6 or P5"),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = {
        cur.skip_space();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        cur.pos = maxval_at;
        return cur.fail(format!("maxval must be 255, got {maxval}"));
    }
    if width == 0 || height == 0 {
        return cur.fail("image has zero size");
    }
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return cur.fail("expected a single whitespace byte after the header");
    }
    cur.pos += 1;
    let need = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        cur.pos = bytes.len();
        return cur.fail(format!("truncated payload: need {need} bytes, found {}", payload.len()));
    }
    if payload.len() > need {
        cur.pos += need;
        return cur.fail("trailing bytes after payload");
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageTensor::new(height, width, channels, data)
}

pub fn write_ppm(x: &ImageTensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode(x)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let mut bytes = b"P6 1 1 255 ".to_vec();
        bytes.extend([255, 255, 255]);
        let x = decode(&bytes).unwrap();
        assert_eq!(x.shape(), (1, 1, 3));
        assert!(x.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn comments_and_pgm() {
        let mut bytes = b"P5\n# comment\n2 1\n255\n".to_vec();
        bytes.extend([0, 51]);
        let x = decode(&bytes).unwrap();
        assert_eq!(x.data(), &[0.0, 0.2]);
    }

    #[test]
    fn roundtrip_within_quantisation() {
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| (i as f64 * 0.137).fract()).collect();
        let x = ImageTensor::new(4, 3, 3, data).unwrap();
        let y = decode(&encode(&x)).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() <= 1.0 / 255.0);
    }

    #[test]
    fn errors_carry_offsets() {
        match decode(b"P6 1 1 65535 \0\0\0\0\0\0") {
            Err(Error::Raster { offset, msg }) => {
                assert_eq!(offset, 7);
                assert!(msg.contains("maxval"));
            }
            other => panic!("{other:?}"),
        }
        match decode(b"P6 2 2 255 abc") {
            Err(Error::Raster { offset, msg }) => {
                assert_eq!(offset, 14);
                assert!(msg.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"P3 1 1 255 "), Err(Error::Raster { offset: 0, .. })));
        assert!(matches!(decode(b"P6 x"), Err(Error::Raster { offset: 3, .. })));
    }
}
