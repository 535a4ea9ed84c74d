//! Binary PPM (`P6`, 8-bit) images.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Raw interleaved RGB bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub rgb: Vec<u8>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("PPM: {}", msg.into()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("{what} out of range")))
    }
}

impl Ppm {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(bad("missing P6 magic"));
        }
        let mut c = Cursor { bytes, pos: 2 };
        let width = c.number("width")?;
        let height = c.number("height")?;
        let maxval = c.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(bad("zero-sized image"));
        }
        if !(1..=255).contains(&maxval) {
            return Err(bad(format!("maxval {maxval} is not 8-bit")));
        }
        match bytes.get(c.pos) {
            Some(b) if b.is_ascii_whitespace() => c.pos += 1,
            _ => return Err(bad("missing separator after header")),
        }
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| bad("dimensions overflow"))?;
        let body = &bytes[c.pos..];
        if body.len() != need {
            return Err(bad(format!(
                "expected {need} pixel bytes, found {}",
                body.len()
            )));
        }
        if body.iter().any(|&v| v as usize > maxval) {
            return Err(bad("sample exceeds maxval"));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            rgb: body.to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    /// `3×H×W`, scaled to `[0, 1]` and normalized per channel with the usual
    /// ImageNet statistics.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let m = f64::from(self.maxval);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            let v = f64::from(self.rgb[p * 3 + c]) / m;
            T::lit((v - MEAN[c]) / STD[c])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let img = Ppm {
            width: 2,
            height: 1,
            maxval: 255,
            rgb: vec![255, 0, 0, 0, 255, 0],
        };
        let parsed = Ppm::parse(&img.encode()).unwrap();
        assert_eq!(parsed, img);
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert!((t.at(&[0, 0, 0]) - (1.0 - MEAN[0]) / STD[0]).abs() < 1e-12);
        assert!((t.at(&[1, 0, 1]) - (1.0 - MEAN[1]) / STD[1]).abs() < 1e-12);
    }

    #[test]
    fn comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 1\n# depth\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(Ppm::parse(&bytes).unwrap().rgb, vec![1, 2, 3]);
    }

    #[test]
    fn malformed() {
        for bytes in [
            &b"P3\n1 1\n255\n\x00\x00\x00"[..],
            &b"P6\n1 1\n255\n\x00\x00"[..],
            &b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00"[..],
            &b"P6\nx 1\n255\n\x00\x00\x00"[..],
            &b"P6\n0 1\n255\n"[..],
            &b"P6\n1 1\n10\n\x00\xff\x00"[..],
        ] {
            assert!(
                matches!(Ppm::parse(bytes), Err(Error::Format(_))),
                "{bytes:?}"
            );
        }
    }
}
