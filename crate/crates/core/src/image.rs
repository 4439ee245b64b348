//! RGB images, 2-D masks, and their binary PNM codecs (P6 / P5, 8-bit).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// RGB image with channel-first float samples nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pixels: Tensor<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Format(format!("image must be (3, H, W), got {s:?}")));
        }
        Ok(Self { pixels })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> T) -> Self {
        let pixels = Tensor::from_fn(&[3, height, width], |i| {
            let c = i / (height * width);
            let r = (i / width) % height;
            f(c, r, i % width)
        });
        Self { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> T {
        self.pixels.data()[(c * self.height() + r) * self.width() + col]
    }

    /// 8-bit quantization used by the PPM writer and the integer stubs.
    pub fn to_rgb8(&self) -> Vec<[u8; 3]> {
        let (h, w) = (self.height(), self.width());
        (0..h * w)
            .map(|p| {
                let mut px = [0u8; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    *v = quantize(self.pixels.data()[c * h * w + p]);
                }
                px
            })
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[[u8; 3]]) -> Result<Self> {
        if rgb.len() != height * width {
            return Err(Error::Corruption("pixel count does not match dimensions".into()));
        }
        Ok(Self::from_fn(height, width, |c, r, col| {
            cast::<T>(rgb[r * width + col][c] as f64 / 255.0)
        }))
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        for px in self.to_rgb8() {
            out.extend_from_slice(&px);
        }
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let (w, h, body) = parse_pnm(bytes, b"P6")?;
        if body.len() != w * h * 3 {
            return Err(Error::Corruption(format!(
                "PPM {w}x{h} needs {} bytes, has {}",
                w * h * 3,
                body.len()
            )));
        }
        let rgb: Vec<[u8; 3]> = body.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::from_rgb8(h, w, &rgb)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm_bytes(&bytes)
    }
}

fn quantize<T: Scalar>(v: T) -> u8 {
    let v = v.as_f64();
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Returns (width, height, payload) of a binary PNM with maxval 255.
fn parse_pnm<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Corruption("truncated PNM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PNM header field".into()))?;
    }
    if fields[2] != 255 {
        return Err(Error::Format("only maxval 255 is supported".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Corruption("truncated PNM header".into()));
    }
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvenance {
    CrossAttn,
    Segmenter,
    Composite,
    BinaryIntermediate,
}

/// A real-valued 2-D map in `[0, 1]`, tagged with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMask<T> {
    data: Tensor<T>,
    pub provenance: MaskProvenance,
}

impl<T: Scalar> BlendMask<T> {
    pub fn new(data: Tensor<T>, provenance: MaskProvenance) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::Format(format!("mask must be 2-D, got {:?}", data.shape())));
        }
        if data.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::validation("mask", "values must lie in [0, 1]"));
        }
        let mask = Self { data, provenance };
        if provenance == MaskProvenance::BinaryIntermediate && !mask.is_binary() {
            return Err(Error::validation("mask", "binary mask holds values outside {0, 1}"));
        }
        Ok(mask)
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool], provenance: MaskProvenance) -> Result<Self> {
        let data = Tensor::new(
            &[height, width],
            bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )?;
        Self::new(data, provenance)
    }

    pub fn zeros(height: usize, width: usize, provenance: MaskProvenance) -> Self {
        Self {
            data: Tensor::zeros(&[height, width]),
            provenance,
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data.at2(r, c)
    }

    pub fn is_binary(&self) -> bool {
        self.data.data().iter().all(|&v| v == T::zero() || v == T::one())
    }

    /// Foreground test used by every binary operation (`v >= 0.5`).
    pub fn to_bools(&self) -> Vec<bool> {
        let half = cast::<T>(0.5);
        self.data.data().iter().map(|&v| v >= half).collect()
    }

    pub fn count_foreground(&self) -> usize {
        self.to_bools().iter().filter(|&&b| b).count()
    }

    pub fn with_provenance(mut self, provenance: MaskProvenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// P5 encoding with `255 <-> 1.0` linear mapping.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        out.extend(self.data.data().iter().map(|&v| quantize(v)));
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8], provenance: MaskProvenance) -> Result<Self> {
        let (w, h, body) = parse_pnm(bytes, b"P5")?;
        if body.len() != w * h {
            return Err(Error::Corruption(format!(
                "PGM {w}x{h} needs {} bytes, has {}",
                w * h,
                body.len()
            )));
        }
        let data = Tensor::new(
            &[h, w],
            body.iter().map(|&b| cast::<T>(b as f64 / 255.0)).collect(),
        )?;
        Self::new(data, provenance)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_pgm(path: impl AsRef<Path>, provenance: MaskProvenance) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm_bytes(&bytes, provenance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_on_quantized_values() {
        let img = Image::<f32>::from_fn(5, 7, |c, r, col| ((c * 31 + r * 7 + col) % 256) as f32 / 255.0);
        let back = Image::<f32>::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert_eq!((back.height(), back.width()), (5, 7));
    }

    #[test]
    fn pgm_binary_maps_to_0_255() {
        let m = BlendMask::<f32>::from_bools(2, 2, &[true, false, false, true], MaskProvenance::BinaryIntermediate).unwrap();
        let bytes = m.to_pgm_bytes();
        assert_eq!(&bytes[bytes.len() - 4..], &[255, 0, 0, 255]);
        let back = BlendMask::<f32>::from_pgm_bytes(&bytes, MaskProvenance::BinaryIntermediate).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn pnm_header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let m = BlendMask::<f64>::from_pgm_bytes(bytes, MaskProvenance::Segmenter).unwrap();
        assert_eq!(m.data().data(), &[0.0, 1.0]);
    }

    #[test]
    fn binary_provenance_rejects_fractional() {
        let t = Tensor::<f32>::new(&[1, 2], vec![0.0, 0.5]).unwrap();
        assert!(BlendMask::new(t.clone(), MaskProvenance::BinaryIntermediate).is_err());
        assert!(BlendMask::new(t, MaskProvenance::Composite).is_ok());
    }

    #[test]
    fn truncated_ppm_is_corruption() {
        let mut b = Image::<f32>::from_fn(2, 2, |_, _, _| 0.5).to_ppm_bytes();
        b.pop();
        assert!(matches!(Image::<f32>::from_ppm_bytes(&b), Err(Error::Corruption(_))));
    }
}
