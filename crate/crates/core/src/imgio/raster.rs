//! 8/16-bit raster images (PNG, PPM/PGM) and PFM images on disk.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use super::{parse_pfm, write_pfm, ImageBuffer, PfmImage};
use crate::{Error, Result};

/// Decodes PNG/PNM/PFM bytes, normalizing integer codes by the format's
/// maximum code value.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.starts_with(b"Pf") || bytes.starts_with(b"PF") {
        return parse_pfm(bytes)?.into_image();
    }
    let img =
        image::load_from_memory(bytes).map_err(|e| Error::Format(format!("image decode: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => (
            1,
            b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        ),
        DynamicImage::ImageLuma16(b) => (
            1,
            b.into_raw()
                .into_iter()
                .map(|v| v as f32 / 65535.0)
                .collect(),
        ),
        DynamicImage::ImageLumaA8(b) => (
            1,
            b.into_raw()
                .chunks_exact(2)
                .map(|p| p[0] as f32 / 255.0)
                .collect(),
        ),
        DynamicImage::ImageLumaA16(b) => (
            1,
            b.into_raw()
                .chunks_exact(2)
                .map(|p| p[0] as f32 / 65535.0)
                .collect(),
        ),
        DynamicImage::ImageRgb8(b) => (
            3,
            b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        ),
        DynamicImage::ImageRgb16(b) => (
            3,
            b.into_raw()
                .into_iter()
                .map(|v| v as f32 / 65535.0)
                .collect(),
        ),
        other => {
            let rgb = other.to_rgb8();
            (
                3,
                rgb.into_raw()
                    .into_iter()
                    .map(|v| v as f32 / 255.0)
                    .collect(),
            )
        }
    };
    ImageBuffer::new(h, w, channels, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn to_u8(img: &ImageBuffer) -> Vec<u8> {
    img.data()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect()
}

fn encode_with(img: &ImageBuffer, format: ImageFormat) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = if img.channels() == 1 {
        DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w, h, to_u8(img)).expect("sized buffer"),
        )
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, to_u8(img)).expect("sized buffer"))
    };
    let mut out = Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, format)
        .map_err(|e| Error::Encode(format!("{format:?}: {e}")))?;
    Ok(out.into_inner())
}

/// 8-bit PNG with values rounded to the nearest code.
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    encode_with(img, ImageFormat::Png)
}

/// Writes by extension: `.pfm` keeps full f32 precision, `.png`, `.ppm` and
/// `.pgm` are quantized to 8 bits.
pub fn write_image(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "pfm" => write_pfm(&PfmImage::from(img))?,
        "png" => encode_png(img)?,
        "ppm" | "pgm" | "pnm" => encode_with(img, ImageFormat::Pnm)?,
        _ => {
            return Err(Error::Config(format!(
                "unsupported output image extension {:?} (use png, ppm, pgm or pfm)",
                path.display()
            )))
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
