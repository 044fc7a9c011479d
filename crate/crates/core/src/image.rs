//! 8-bit RGB rasters and their PNG and tensor forms.

use std::io::Cursor;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Row-major `H×W×3` pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; width * height * 3] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 || width == 0 || height == 0 {
            return dim_err(format!("{} bytes for a {width}×{height} RGB image", pixels.len()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luminance in [0, 1] per pixel.
    pub fn gray(&self) -> Vec<f64> {
        self.pixels
            .chunks(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect()
    }

    /// `[3, H, W]` in [−1, 1].
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / hw, i % hw);
            self.pixels[p * 3 + c] as f64 / 127.5 - 1.0
        })
    }

    /// Inverse of [`RgbImage::to_tensor`], clamping to [−1, 1] and rounding.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, h, w] = match t.shape() {
            [c, h, w] => [*c, *h, *w],
            s => return dim_err(format!("image tensor must be [3, H, W], got {s:?}")),
        };
        if c != 3 {
            return dim_err(format!("image tensor must have 3 channels, got {c}"));
        }
        let hw = h * w;
        let mut pixels = vec![0u8; hw * 3];
        for (i, v) in t.data().iter().enumerate() {
            let (ch, p) = (i / hw, i % hw);
            pixels[p * 3 + ch] = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        }
        Self::from_pixels(w, h, pixels)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&self.pixels)?;
        w.finish()?;
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info()?;
        let size = reader.output_buffer_size().ok_or_else(|| Error::Format("PNG too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format(format!("expected 8-bit RGB PNG, got {:?}/{:?}", info.color_type, info.bit_depth)));
        }
        buf.truncate(info.buffer_size());
        Self::from_pixels(info.width as usize, info.height as usize, buf)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_png(&std::fs::read(path)?)
    }

    /// SHA-256 of the raw pixels, hex encoded.
    pub fn pixel_hash(&self) -> String {
        hex::encode(Sha256::digest(&self.pixels))
    }
}
