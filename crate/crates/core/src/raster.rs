//! Dense row-major image buffers and PNG export.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Row-major `height × width × channels` image of reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Image {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = self.offset(row, col);
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = self.offset(row, col);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_squared_error(&self, other: &Image) -> f64 {
        debug_assert!(self.same_shape(other));
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    /// Peak signal-to-noise ratio in dB for signals in [0, 1].
    pub fn psnr(&self, other: &Image) -> f64 {
        let mse = self.mean_squared_error(other);
        if mse <= 0.0 {
            return f64::INFINITY;
        }
        -10.0 * mse.log10()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// 8-bit encoding, clamped to [0, 1]. Gray images become RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixel_count() * 3);
        for px in self.data.chunks(self.channels) {
            for c in 0..3 {
                let v = px[c.min(self.channels - 1)];
                out.push(quantize_u8(v));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// PNG bytes (8-bit RGB; RGBA when the image has four channels).
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let (w, h) = (self.width as u32, self.height as u32);
        let mut bytes = Vec::new();
        let mut cursor = std::io::Cursor::new(&mut bytes);
        if self.channels == 4 {
            let raw: Vec<u8> = self.data.iter().map(|&v| quantize_u8(v)).collect();
            let buf = image::RgbaImage::from_raw(w, h, raw)
                .ok_or_else(|| Error::invalid("rgba buffer size"))?;
            buf.write_to(&mut cursor, image::ImageFormat::Png)?;
        } else {
            let buf = image::RgbImage::from_raw(w, h, self.to_rgb8())
                .ok_or_else(|| Error::invalid("rgb buffer size"))?;
            buf.write_to(&mut cursor, image::ImageFormat::Png)?;
        }
        Ok(bytes)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Image::from_data(w as usize, h as usize, 3, data)
    }
}

#[inline]
fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Sidecar metadata for 16-bit depth PNGs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMeta {
    pub max_depth: f64,
    pub width: usize,
    pub height: usize,
}

/// Encodes a single-channel depth image as 16-bit grayscale PNG where
/// `65535` maps to `max_depth`.
pub fn encode_depth_png(depth: &Image, max_depth: f64) -> Result<Vec<u8>> {
    if depth.channels != 1 {
        return Err(Error::invalid("depth image must have one channel"));
    }
    if !(max_depth > 0.0) {
        return Err(Error::invalid("max_depth must be positive"));
    }
    let raw: Vec<u16> = depth
        .data
        .iter()
        .map(|&d| ((d / max_depth).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(depth.width as u32, depth.height as u32, raw)
            .ok_or_else(|| Error::invalid("depth buffer size"))?;
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

/// Writes `<stem>.png` and `<stem>.json` with the declared max depth.
pub fn save_depth(depth: &Image, max_depth: f64, dir: &Path, stem: &str) -> Result<()> {
    std::fs::write(dir.join(format!("{stem}.png")), encode_depth_png(depth, max_depth)?)?;
    let meta = DepthMeta {
        max_depth,
        width: depth.width,
        height: depth.height,
    };
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_vec_pretty(&meta).expect("depth meta serializes"),
    )?;
    Ok(())
}

/// Normals in [-1, 1] remapped to [0, 1] for display.
pub fn normal_to_display(normal: &Image) -> Image {
    Image {
        data: normal.data.iter().map(|v| v * 0.5 + 0.5).collect(),
        ..normal.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let a = Image::filled(4, 4, &[0.2, 0.3, 0.4]);
        assert!(a.psnr(&a).is_infinite());
        let mut b = a.clone();
        b.data[0] += 0.1;
        assert!(b.psnr(&a).is_finite());
    }

    #[test]
    fn png_roundtrip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Image::new(3, 2, 3);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = (i as f64 * 13.0 % 255.0) / 255.0;
        }
        let path = dir.path().join("a.png");
        a.save_png(&path).unwrap();
        let b = Image::load_png(&path).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn depth_png_decodes_to_declared_scale() {
        let depth = Image::from_data(2, 1, 1, vec![0.0, 2.0]).unwrap();
        let bytes = encode_depth_png(&depth, 4.0).unwrap();
        let img = image::load_from_memory(&bytes).unwrap().to_luma16();
        assert_eq!(img.as_raw(), &vec![0u16, 32768]);
    }
}
