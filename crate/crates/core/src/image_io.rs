//! PNG output for frames, saliency maps and debug dumps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{BitError, Result};

fn write(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| BitError::Format(format!("png header: {e}")))?;
    writer
        .write_image_data(data)
        .map_err(|e| BitError::Format(format!("png data: {e}")))?;
    Ok(())
}

/// Interleaved RGB bytes.
pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(BitError::Argument(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    write(path, width, height, png::ColorType::Rgb, rgb)
}

/// Grayscale image from values in `[0, 1]`.
pub fn write_gray(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    if values.len() != width * height {
        return Err(BitError::Argument(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write(path, width, height, png::ColorType::Grayscale, &bytes)
}

/// Planar `3 x H x W` floats in `[0, 1]` (one frame of an observation) as RGB.
pub fn write_planar(path: &Path, width: usize, height: usize, planar: &[f32]) -> Result<()> {
    let plane = width * height;
    if planar.len() != 3 * plane {
        return Err(BitError::Argument("planar RGB data has the wrong length".into()));
    }
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((planar[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_rgb(path, width, height, &rgb)
}
