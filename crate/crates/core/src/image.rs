use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// H×W×3 RGB image with channel values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// 8-bit quantisation used by every codec-facing path.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::shape("rgb8 buffer length"));
        }
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Codec(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
        let rgb = img.to_rgb8();
        Self::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
    }

    /// CHW tensor in model space `2·v − 1`.
    pub fn to_model<S: Scalar>(&self) -> Vec<S> {
        let hw = self.width * self.height;
        let mut out = vec![S::zero(); 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = S::lit(2.0 * self.data[p * 3 + c] as f64 - 1.0);
            }
        }
        out
    }

    /// Inverse of [`Image::to_model`]; values are not clamped.
    pub fn from_model<S: Scalar>(x: &[S], width: usize, height: usize) -> Self {
        let hw = width * height;
        assert_eq!(x.len(), 3 * hw);
        let mut data = vec![0.0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = ((x[c * hw + p].as_f64() + 1.0) * 0.5) as f32;
            }
        }
        Self { width, height, data }
    }

    /// Tile equally sized images into a `rows × cols` mosaic.
    pub fn grid(cells: &[Image], cols: usize, background: [f32; 3]) -> Image {
        assert!(cols > 0 && !cells.is_empty());
        let (w, h) = (cells[0].width, cells[0].height);
        let rows = cells.len().div_ceil(cols);
        let mut out = Image::filled(cols * w, rows * h, background);
        for (i, cell) in cells.iter().enumerate() {
            let (ox, oy) = ((i % cols) * w, (i / cols) * h);
            for y in 0..h {
                for x in 0..w {
                    out.set_pixel(ox + x, oy + y, cell.pixel(x, y));
                }
            }
        }
        out
    }
}
