//! KITTI 2015 disparity PNGs: 16-bit grayscale, disparity = code / 256,
//! code 0 marks a pixel without ground truth.

use std::io::Cursor;

use image::{DynamicImage, ImageFormat};

use super::DisparityMap;
use crate::{Error, Result};

const KITTI_SCALE: f32 = 256.0;

pub fn parse_kitti_disparity(png_bytes: &[u8]) -> Result<DisparityMap> {
    let img = image::load_from_memory_with_format(png_bytes, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("KITTI disparity PNG: {e}")))?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::Format(format!(
            "KITTI disparity must be 16-bit single-channel PNG, found {:?}",
            img.color()
        )));
    };
    let (w, h) = buf.dimensions();
    let codes = buf.into_raw();
    let valid = codes.iter().map(|&c| c != 0).collect();
    let values = codes.iter().map(|&c| c as f32 / KITTI_SCALE).collect();
    DisparityMap::new(h as usize, w as usize, values, valid)
}

/// Encodes valid pixels as `round(d * 256)` and invalid ones as 0.
pub fn write_kitti_disparity(map: &DisparityMap) -> Result<Vec<u8>> {
    let mut codes = Vec::with_capacity(map.values().len());
    for (&v, &ok) in map.values().iter().zip(map.valid()) {
        if !ok {
            codes.push(0u16);
            continue;
        }
        let code = (v * KITTI_SCALE).round();
        if !(1.0..=65535.0).contains(&code) {
            return Err(Error::Encode(format!(
                "disparity {v} is not representable as a non-zero 16-bit KITTI code"
            )));
        }
        codes.push(code as u16);
    }
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        map.width() as u32,
        map.height() as u32,
        codes,
    )
    .ok_or_else(|| Error::Encode("KITTI buffer size mismatch".into()))?;
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageLuma16(buf)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Encode(format!("KITTI PNG: {e}")))?;
    Ok(out.into_inner())
}
