//! Dataset file formats and in-memory image types.

mod kitti;
mod manifest;
mod pfm;
mod raster;

pub use kitti::{parse_kitti_disparity, write_kitti_disparity};
pub use manifest::{load_manifest, load_sample, DatasetManifest, GtFormat, ManifestEntry};
pub use pfm::{parse_pfm, write_pfm, PfmImage};
pub use raster::{decode_image, encode_png, read_image, write_image};

use crate::{Error, Result};

/// Height x width x channels image with values in `[0, 1]`, row-major and
/// channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Format(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Format(format!(
                "image data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Replicates a single channel into RGB; RGB images are returned as is.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    /// Channel mean. Single-channel images are returned as is.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| ((px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0) as f32)
            .collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Per-pixel disparity in pixels plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl DisparityMap {
    /// Builds a map, marking every pixel whose value is not finite and
    /// non-negative as invalid in addition to `valid`.
    pub fn new(height: usize, width: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Format(format!(
                "empty disparity map {height}x{width}"
            )));
        }
        let n = height * width;
        if values.len() != n || valid.len() != n {
            return Err(Error::Format(format!(
                "disparity map buffers ({}, {}) do not match {height}x{width}",
                values.len(),
                valid.len()
            )));
        }
        let valid = values
            .iter()
            .zip(valid)
            .map(|(v, ok)| ok && v.is_finite() && *v >= 0.0)
            .collect();
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    /// All pixels valid where the value is finite and non-negative.
    pub fn from_values(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::new(height, width, values, valid)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::from_values(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// A rectified stereo pair with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub id: String,
    pub left: ImageBuffer,
    pub right: ImageBuffer,
    pub gt: DisparityMap,
}

impl StereoSample {
    pub fn new(
        id: impl Into<String>,
        left: ImageBuffer,
        right: ImageBuffer,
        gt: DisparityMap,
    ) -> Result<Self> {
        let id = id.into();
        let dims = |h: usize, w: usize| format!("{h}x{w}");
        if left.height() != right.height()
            || left.width() != right.width()
            || left.height() != gt.height()
            || left.width() != gt.width()
        {
            return Err(Error::Format(format!(
                "sample {id}: left {}, right {}, gt {} disagree",
                dims(left.height(), left.width()),
                dims(right.height(), right.width()),
                dims(gt.height(), gt.width()),
            )));
        }
        if left.channels() != right.channels() {
            return Err(Error::Format(format!(
                "sample {id}: left has {} channels, right has {}",
                left.channels(),
                right.channels()
            )));
        }
        Ok(Self {
            id,
            left,
            right,
            gt,
        })
    }

    pub fn height(&self) -> usize {
        self.left.height()
    }

    pub fn width(&self) -> usize {
        self.left.width()
    }
}
