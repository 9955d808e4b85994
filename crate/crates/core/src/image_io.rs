//! PNG input/output for grayscale images and stomach masks.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma};

use crate::types::{GrayImage, StomachMask};
use crate::{Error, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    Ok(reader.decode()?)
}

/// Loads an 8- or 16-bit single-channel PNG, scaling by `2^depth − 1`.
pub fn load_gray_image(path: &Path) -> Result<GrayImage> {
    match open(path)? {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let px = buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            GrayImage::new(w as usize, h as usize, px, 8)
        }
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let px = buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
            GrayImage::new(w as usize, h as usize, px, 16)
        }
        other => {
            let ct = other.color();
            if ct.channel_count() != 1 {
                Err(Error::Format(format!(
                    "{}: {} channels ({ct:?}); expected a single-channel image",
                    path.display(),
                    ct.channel_count()
                )))
            } else {
                Err(Error::Format(format!(
                    "{}: unsupported bit depth {} ({ct:?}); expected 8 or 16",
                    path.display(),
                    ct.bits_per_pixel()
                )))
            }
        }
    }
}

/// Writes a 16-bit grayscale PNG (intensities rounded to the nearest level).
pub fn save_gray_png16(img: &GrayImage, path: &Path) -> Result<()> {
    let data: Vec<u16> = img
        .pixels()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, data).expect("buffer size");
    buf.save(path)?;
    Ok(())
}

/// Writes an 8-bit grayscale PNG.
pub fn save_gray_png8(img: &GrayImage, path: &Path) -> Result<()> {
    let data: Vec<u8> = img.pixels().iter().map(|&v| quantize_u8(v)).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, data).expect("buffer size");
    buf.save(path)?;
    Ok(())
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Masks are stored as 8-bit PNGs, 255 inside and 0 outside.
pub fn save_mask(mask: &StomachMask, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, data).expect("buffer size");
    buf.save(path)?;
    Ok(())
}

/// Any non-zero intensity counts as inside.
pub fn load_mask(path: &Path) -> Result<StomachMask> {
    let img = load_gray_image(path)?;
    let bits = img.pixels().iter().map(|&v| v > 0.0).collect();
    StomachMask::new(img.width(), img.height(), bits)
}
