//! Binary PPM (`P6`) and PGM (`P5`) with maxval 255.

use std::io::Write;

use super::FormatError;
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
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

    fn number(&mut self, kind: &'static str, what: &str) -> Result<usize, FormatError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if self.pos >= self.bytes.len() {
                FormatError::Truncated { kind }
            } else {
                FormatError::malformed(kind, format!("expected {what}"))
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| FormatError::malformed(kind, format!("{what} out of range")))
    }
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, FormatError> {
        if !matches!(channels, 1 | 3) || width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(FormatError::malformed("image", "inconsistent dimensions"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let kind = "netpbm";
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            Some(_) => return Err(FormatError::malformed(kind, "expected P5 or P6 magic")),
            None => return Err(FormatError::Truncated { kind }),
        };
        let mut h = Header { bytes, pos: 2 };
        let width = h.number(kind, "width")?;
        let height = h.number(kind, "height")?;
        let maxval = h.number(kind, "maxval")?;
        if maxval != 255 {
            return Err(FormatError::malformed(kind, format!("maxval {maxval} unsupported")));
        }
        if width == 0 || height == 0 {
            return Err(FormatError::malformed(kind, "empty image"));
        }
        match bytes.get(h.pos) {
            Some(b) if b.is_ascii_whitespace() => h.pos += 1,
            Some(_) => return Err(FormatError::malformed(kind, "missing separator after maxval")),
            None => return Err(FormatError::Truncated { kind }),
        }
        let len = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| FormatError::malformed(kind, "dimensions overflow"))?;
        let body = bytes
            .get(h.pos..h.pos + len)
            .ok_or(FormatError::Truncated { kind })?;
        Ok(Self {
            width,
            height,
            channels,
            data: body.to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.encode())
    }

    /// `[C, H, W]` with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, hw) = (self.channels, self.width * self.height);
        let mut out = vec![0.0; c * hw];
        for (p, px) in self.data.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * hw + p] = f64::from(v) / 255.0;
            }
        }
        Tensor::new(&[c, self.height, self.width], out).expect("C x H x W buffer")
    }

    /// Quantizes a `[C, H, W]` tensor: `round(255 * clamp(v, 0, 1))`.
    pub fn from_tensor(t: &Tensor) -> Result<Self, FormatError> {
        let (c, h, w) = match *t.shape() {
            [c, h, w] => (c, h, w),
            [h, w] => (1, h, w),
            _ => return Err(FormatError::malformed("image", format!("cannot store shape {:?}", t.shape()))),
        };
        let hw = h * w;
        let mut data = vec![0u8; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                data[p * c + ch] = quantize(t.data()[ch * hw + p]);
            }
        }
        Self::new(w, h, c, data)
    }
}

pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Bilinear resize of a `[C, H, W]` tensor.
pub fn resize_chw(t: &Tensor, out_h: usize, out_w: usize) -> crate::Result<Tensor> {
    if t.dim(1) == out_h && t.dim(2) == out_w {
        return Ok(t.clone());
    }
    let hwc = ops::chw_to_hwc(t)?;
    let r = ops::resize_bilinear(&hwc, out_h, out_w)?;
    let c = t.dim(0);
    let mut out = vec![0.0; r.numel()];
    for (p, px) in r.data().chunks(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * out_h * out_w + p] = v;
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comments() {
        let img = Image::new(2, 1, 3, vec![1, 2, 3, 250, 251, 252]).unwrap();
        assert_eq!(Image::decode(&img.encode()).unwrap(), img);
        let commented = b"P5 # gray\n2 # w\n2\n255\n\x00\x01\x02\x03";
        let g = Image::decode(commented).unwrap();
        assert_eq!((g.width, g.height, g.data.len()), (2, 2, 4));
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(Image::decode(b"P6\n2 2\n255\n\x00"), Err(FormatError::Truncated { .. })));
        assert!(matches!(Image::decode(b"P5\n1 1\n65535\n\x00\x00"), Err(FormatError::Malformed { .. })));
        assert!(matches!(Image::decode(b"P3\n1 1\n255\n0"), Err(FormatError::Malformed { .. })));
        assert!(matches!(Image::decode(b"P6\n2"), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn tensor_quantization_round_trips() {
        let img = Image::new(3, 2, 1, vec![0, 17, 128, 200, 254, 255]).unwrap();
        assert_eq!(Image::from_tensor(&img.to_tensor()).unwrap(), img);
    }
}
