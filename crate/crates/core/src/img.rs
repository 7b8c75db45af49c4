//! In-memory RGB images in [0,1] and 8-bit PNG round-tripping.

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB, row-major, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(h: usize, w: usize) -> Self {
        ImageBuf { h, w, data: vec![0.0; h * w * 3] }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), h * w * 3, "image data length");
        ImageBuf { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        self.data[(y * self.w + x) * 3 + ch] = v;
    }

    pub fn same_shape(&self, other: &ImageBuf) -> bool {
        self.h == other.h && self.w == other.w
    }

    /// Quantize to the 8-bit grid PNG encoding will apply. Rendering runs
    /// this before comparisons so in-memory frames equal their decoded files.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, bytes)
            .expect("buffer length matches dims");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<ImageBuf> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Ok(ImageBuf { h, w, data })
    }

    /// Mean absolute per-pixel difference across all channels.
    pub fn mean_abs_diff(&self, other: &ImageBuf) -> Result<f32> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        let sum: f32 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len() as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_preserves_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageBuf::new(5, 7);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.013) % 1.0;
        }
        img.quantize_u8();
        let path = dir.path().join("t.png");
        img.save_png(&path).unwrap();
        let back = ImageBuf::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn mean_abs_diff_shape_mismatch() {
        let a = ImageBuf::new(4, 4);
        let b = ImageBuf::new(4, 5);
        assert!(a.mean_abs_diff(&b).is_err());
    }
}
