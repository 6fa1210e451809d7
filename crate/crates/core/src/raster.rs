//! Float rasters and PNG/JPEG I/O.
//!
//! Pixel values are stored as `f32` on the 0..=255 scale so that radiometric
//! corrections and warps do not accumulate 8-bit quantization error between
//! stages. Quantization happens once, when a raster is written to disk.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayRaster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbRaster {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    /// Builds a raster by evaluating `f(x, y)` at every pixel, row-major.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f32; 3]) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at a continuous position; `None` outside `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        let (x0, y0, fx, fy) = bilinear_cell(x, y, self.width, self.height)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
            let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            out[c] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
        Some(out)
    }

    /// Rec. 601 luma.
    pub fn to_gray(&self) -> GrayRaster {
        GrayRaster {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .into_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
            .collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    /// Quantizes to 8 bits (round, clamp) and writes a PNG with optional text chunks.
    pub fn save_png(&self, path: impl AsRef<Path>, meta: &[(&str, &str)]) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .flat_map(|p| p.iter().map(|&v| quantize_u8(v)))
            .collect();
        write_png(
            path.as_ref(),
            self.width,
            self.height,
            png::ColorType::Rgb,
            png::BitDepth::Eight,
            &bytes,
            meta,
        )
    }

    /// Rounds every channel to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| p.map(|v| quantize_u8(v) as f32))
                .collect(),
        }
    }
}

impl GrayRaster {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f32> {
        let (x0, y0, fx, fy) = bilinear_cell(x, y, self.width, self.height)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = self.get(x0, y0) as f64 * (1.0 - fx) + self.get(x1, y0) as f64 * fx;
        let bottom = self.get(x0, y1) as f64 * (1.0 - fx) + self.get(x1, y1) as f64 * fx;
        Some((top * (1.0 - fy) + bottom * fy) as f32)
    }

    pub fn save_png(&self, path: impl AsRef<Path>, meta: &[(&str, &str)]) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize_u8(v)).collect();
        write_png(
            path.as_ref(),
            self.width,
            self.height,
            png::ColorType::Grayscale,
            png::BitDepth::Eight,
            &bytes,
            meta,
        )
    }
}

fn bilinear_cell(x: f64, y: f64, width: usize, height: usize) -> Option<(usize, usize, f64, f64)> {
    const EPS: f64 = 1e-9;
    if width == 0 || height == 0 || !x.is_finite() || !y.is_finite() {
        return None;
    }
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    if x < -EPS || y < -EPS || x > max_x + EPS || y > max_y + EPS {
        return None;
    }
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    Some((x0, y0, x - x0 as f64, y - y0 as f64))
}

#[inline]
pub(crate) fn quantize_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Writes raw samples as a PNG. `meta` entries become `tEXt` chunks, in order.
pub fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
    meta: &[(&str, &str)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let to_image_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    for (key, value) in meta {
        encoder
            .add_text_chunk(key.to_string(), value.to_string())
            .map_err(to_image_err)?;
    }
    let mut writer = encoder.write_header().map_err(to_image_err)?;
    writer.write_image_data(bytes).map_err(to_image_err)?;
    writer.finish().map_err(to_image_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_grid_values_exactly() {
        let img = RgbRaster::from_fn(4, 3, |x, y| [x as f32, y as f32, (x * y) as f32]);
        assert_eq!(img.sample_bilinear(2.0, 1.0), Some([2.0, 1.0, 2.0]));
        assert_eq!(img.sample_bilinear(3.0, 2.0), Some([3.0, 2.0, 6.0]));
        let mid = img.sample_bilinear(1.5, 0.5).unwrap();
        assert!((mid[0] - 1.5).abs() < 1e-6 && (mid[1] - 0.5).abs() < 1e-6);
        assert_eq!(img.sample_bilinear(-0.5, 0.0), None);
        assert_eq!(img.sample_bilinear(0.0, 2.5), None);
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = RgbRaster::from_fn(5, 4, |x, y| [x as f32 * 10.4, y as f32 * 60.0, 300.0]);
        img.save_png(&path, &[("seed", "7")]).unwrap();
        let back = RgbRaster::load(&path).unwrap();
        assert_eq!(back, img.quantized());
        assert_eq!(back.get(4, 3), [42.0, 180.0, 255.0]);
    }
}
