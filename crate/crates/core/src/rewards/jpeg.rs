use jpeg_encoder::{ColorType, Encoder, SamplingFactor};

use crate::error::{Error, Result};
use crate::image::Image;

/// Codec identity recorded next to pinned byte-count fixtures.
pub const CODEC_ID: &str = "jpeg-encoder 0.7 baseline, 4:2:0, standard Huffman tables";

/// Encoded size in bytes of the 8-bit quantised image.
pub fn jpeg_size(image: &Image, quality: u8) -> Result<usize> {
    if image.width == 0 || image.height == 0 || image.width > u16::MAX as usize || image.height > u16::MAX as usize {
        return Err(Error::Codec(format!("cannot encode {}x{} image", image.width, image.height)));
    }
    let pixels = image.to_rgb8();
    let mut out = Vec::new();
    let mut enc = Encoder::new(&mut out, quality);
    enc.set_sampling_factor(SamplingFactor::F_2_2);
    enc.set_optimized_huffman_tables(false);
    enc.set_progressive(false);
    enc.encode(&pixels, image.width as u16, image.height as u16, ColorType::Rgb)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out.len())
}

/// Compressed size in kilobytes (bytes / 1024).
pub fn incompressibility(image: &Image, quality: u8) -> Result<f64> {
    Ok(jpeg_size(image, quality)? as f64 / 1024.0)
}

pub fn compressibility(image: &Image, quality: u8) -> Result<f64> {
    Ok(-incompressibility(image, quality)?)
}
