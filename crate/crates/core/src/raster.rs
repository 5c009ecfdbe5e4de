//! PNG/raster file adapters for images, masks and stroke layers.

use std::path::Path;

use image::{GrayImage, RgbImage, RgbaImage};

use crate::codec::{ImageBuffer, RegionMask};
use crate::error::{Error, Result};

/// Threshold at or above which an 8-bit mask pixel counts as known.
pub const MASK_THRESHOLD: u8 = 128;

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    Ok(image::open(path)?)
}

fn from_bytes(bytes: &[u8]) -> Result<image::DynamicImage> {
    Ok(image::load_from_memory(bytes)?)
}

fn rgb_buffer(img: &RgbImage) -> Result<ImageBuffer> {
    let data = img.as_raw().iter().map(|v| f32::from(*v) / 255.0).collect();
    ImageBuffer::new(img.height() as usize, img.width() as usize, 3, data)
}

fn rgba_buffer(img: &RgbaImage) -> Result<ImageBuffer> {
    let data = img.as_raw().iter().map(|v| f32::from(*v) / 255.0).collect();
    ImageBuffer::new(img.height() as usize, img.width() as usize, 4, data)
}

fn gray_mask(img: &GrayImage) -> Result<RegionMask> {
    let bits = img.as_raw().iter().map(|v| *v >= MASK_THRESHOLD).collect();
    RegionMask::from_bits(img.height() as usize, img.width() as usize, bits)
}

pub fn load_rgb(path: &Path) -> Result<ImageBuffer> {
    rgb_buffer(&open(path)?.to_rgb8())
}

pub fn load_rgba(path: &Path) -> Result<ImageBuffer> {
    rgba_buffer(&open(path)?.to_rgba8())
}

pub fn load_mask(path: &Path) -> Result<RegionMask> {
    gray_mask(&open(path)?.to_luma8())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<ImageBuffer> {
    rgb_buffer(&from_bytes(bytes)?.to_rgb8())
}

pub fn decode_rgba(bytes: &[u8]) -> Result<ImageBuffer> {
    rgba_buffer(&from_bytes(bytes)?.to_rgba8())
}

pub fn decode_mask(bytes: &[u8]) -> Result<RegionMask> {
    gray_mask(&from_bytes(bytes)?.to_luma8())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 3- or 4-channel buffer as an 8-bit PNG.
pub fn encode_png(image: &ImageBuffer) -> Result<Vec<u8>> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let raw: Vec<u8> = image.data().iter().map(|v| quantize(*v)).collect();
    let dynamic = match image.channels() {
        3 => image::DynamicImage::ImageRgb8(
            RgbImage::from_raw(w, h, raw).ok_or_else(|| Error::invalid("bad rgb buffer"))?,
        ),
        4 => image::DynamicImage::ImageRgba8(
            RgbaImage::from_raw(w, h, raw).ok_or_else(|| Error::invalid("bad rgba buffer"))?,
        ),
        c => return Err(Error::invalid(format!("cannot encode {c}-channel image"))),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn encode_mask_png(mask: &RegionMask) -> Result<Vec<u8>> {
    let raw = mask.bits().iter().map(|b| if *b { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .ok_or_else(|| Error::invalid("bad mask buffer"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(image: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_mask_png(mask: &RegionMask, path: &Path) -> Result<()> {
    let bytes = encode_mask_png(mask)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_for_8bit_values() {
        let img = ImageBuffer::from_fn(8, 16, 3, |y, x, c| ((y * 31 + x * 7 + c * 101) % 256) as f32 / 255.0)
            .unwrap();
        let back = decode_rgb(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn mask_threshold_at_128() {
        let raw = vec![0u8, 127, 128, 255];
        let img = GrayImage::from_raw(4, 1, raw).unwrap();
        let mut bytes = std::io::Cursor::new(Vec::new());
        img.write_to(&mut bytes, image::ImageFormat::Png).unwrap();
        let m = decode_mask(bytes.get_ref()).unwrap();
        assert_eq!(m.bits(), &[false, false, true, true]);
    }

    #[test]
    fn alpha_above_zero_defines_stroke() {
        let raw = vec![255, 0, 0, 0, 255, 0, 0, 1, 0, 0, 255, 255];
        let img = RgbaImage::from_raw(3, 1, raw).unwrap();
        let mut bytes = std::io::Cursor::new(Vec::new());
        img.write_to(&mut bytes, image::ImageFormat::Png).unwrap();
        let s = decode_rgba(bytes.get_ref()).unwrap();
        assert_eq!(s.alpha_mask().unwrap().bits(), &[false, true, true]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_rgb(Path::new("/definitely/not/here.png")),
            Err(Error::Io { .. })
        ));
    }
}
