//! Portable Float Map.
//!
//! Header: `Pf` (one channel) or `PF` (three channels), whitespace, width,
//! height, scale, then a single whitespace byte and `width * height *
//! channels` IEEE-754 f32 values. A negative scale marks a little-endian
//! payload. Rows are stored bottom-up.

use super::{DisparityMap, ImageBuffer};
use crate::{Error, Result};

/// Raw PFM contents with rows in top-down order.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PfmImage {
    /// Interprets a single-channel PFM as disparity; values pass through
    /// unchanged and non-finite or negative pixels are marked invalid.
    pub fn into_disparity(self) -> Result<DisparityMap> {
        if self.channels != 1 {
            return Err(Error::Format(format!(
                "disparity PFM must have 1 channel, found {}",
                self.channels
            )));
        }
        DisparityMap::from_values(self.height, self.width, self.data)
    }

    pub fn into_image(self) -> Result<ImageBuffer> {
        ImageBuffer::new(self.height, self.width, self.channels, self.data)
    }
}

impl From<&DisparityMap> for PfmImage {
    fn from(map: &DisparityMap) -> Self {
        PfmImage {
            width: map.width(),
            height: map.height(),
            channels: 1,
            data: map.values().to_vec(),
        }
    }
}

impl From<&ImageBuffer> for PfmImage {
    fn from(img: &ImageBuffer) -> Self {
        PfmImage {
            width: img.width(),
            height: img.height(),
            channels: img.channels(),
            data: img.data().to_vec(),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("PFM header truncated before {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::Format(format!("PFM {what} is not ASCII")))
    }
}

fn parse_dim(tok: &str, what: &str) -> Result<usize> {
    let v: i64 = tok
        .parse()
        .map_err(|_| Error::Format(format!("PFM {what} {tok:?} is not an integer")))?;
    if v <= 0 {
        return Err(Error::Format(format!(
            "PFM {what} must be positive, got {v}"
        )));
    }
    Ok(v as usize)
}

pub fn parse_pfm(bytes: &[u8]) -> Result<PfmImage> {
    let channels = match bytes.get(..2) {
        Some(b"Pf") => 1,
        Some(b"PF") => 3,
        _ => return Err(Error::Format("PFM magic must be 'Pf' or 'PF'".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = parse_dim(cur.token("width")?, "width")?;
    let height = parse_dim(cur.token("height")?, "height")?;
    let scale_tok = cur.token("scale")?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::Format(format!("PFM scale {scale_tok:?} is not a number")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format(format!(
            "PFM scale must be non-zero, got {scale_tok}"
        )));
    }
    let little_endian = scale < 0.0;
    // exactly one whitespace byte separates header and payload
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::Format("PFM header not terminated".into())),
    }

    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format("PFM dimensions overflow".into()))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < count * 4 {
        return Err(Error::Format(format!(
            "PFM payload truncated: need {} bytes, have {}",
            count * 4,
            payload.len()
        )));
    }

    let row_len = width * channels;
    let mut data = vec![0f32; count];
    for (file_row, chunk) in payload[..count * 4].chunks_exact(row_len * 4).enumerate() {
        let y = height - 1 - file_row;
        let out = &mut data[y * row_len..(y + 1) * row_len];
        for (dst, b) in out.iter_mut().zip(chunk.chunks_exact(4)) {
            let raw = [b[0], b[1], b[2], b[3]];
            *dst = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
        }
    }
    Ok(PfmImage {
        width,
        height,
        channels,
        data,
    })
}

/// Canonical little-endian encoding (scale `-1.0`).
pub fn write_pfm(img: &PfmImage) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::Encode(format!(
                "PFM supports 1 or 3 channels, not {c}"
            )))
        }
    };
    if img.width == 0 || img.height == 0 {
        return Err(Error::Encode("PFM cannot encode an empty image".into()));
    }
    let row_len = img.width * img.channels;
    if img.data.len() != row_len * img.height {
        return Err(Error::Encode(format!(
            "PFM data length {} does not match {}x{}x{}",
            img.data.len(),
            img.height,
            img.width,
            img.channels
        )));
    }
    if let Some(v) = img.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Encode(format!(
            "PFM cannot encode non-finite value {v}"
        )));
    }
    let header = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len() * 4);
    out.extend_from_slice(header.as_bytes());
    for row in img.data.chunks_exact(row_len).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}
