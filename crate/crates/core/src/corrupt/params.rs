//! Severity parameter tables, loaded from a TOML file shipped with the crate.

use std::sync::OnceLock;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const BUILTIN_PARAMS: &str = include_str!("../../data/corruption_params.toml");

type Row<T> = [T; 5];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sigma {
    pub sigma: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shot {
    pub lambda: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Impulse {
    pub rate: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defocus {
    pub radius: Row<f64>,
    pub alias_sigma: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Glass {
    pub sigma: Row<f64>,
    pub max_delta: Row<usize>,
    pub iterations: Row<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motion {
    pub radius: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Zoom {
    pub max_zoom: Row<f64>,
    pub step: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snow {
    pub flake_mean: Row<f64>,
    pub flake_std: Row<f64>,
    pub threshold: Row<f64>,
    pub blur_radius: Row<f64>,
    pub whitening: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frost {
    pub image_weight: Row<f64>,
    pub frost_weight: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fog {
    pub opacity: Row<f64>,
    pub decay: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Brightness {
    pub shift: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contrast {
    pub factor: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Elastic {
    pub alpha: Row<f64>,
    pub sigma: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pixelate {
    pub scale: Row<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jpeg {
    pub quality: Row<u8>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionParams {
    pub gaussian_noise: Sigma,
    pub shot_noise: Shot,
    pub impulse_noise: Impulse,
    pub defocus_blur: Defocus,
    pub frosted_glass_blur: Glass,
    pub motion_blur: Motion,
    pub zoom_blur: Zoom,
    pub snow: Snow,
    pub frost: Frost,
    pub fog: Fog,
    pub brightness: Brightness,
    pub contrast: Contrast,
    pub elastic: Elastic,
    pub pixelate: Pixelate,
    pub jpeg: Jpeg,
}

impl CorruptionParams {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("corruption parameters: {e}")))
    }

    /// Tables shipped with the crate.
    pub fn builtin() -> &'static Self {
        static P: OnceLock<CorruptionParams> = OnceLock::new();
        P.get_or_init(|| Self::parse(BUILTIN_PARAMS).expect("bundled parameter table parses"))
    }
}

/// Hex sha256 of the bundled parameter file.
pub fn params_hash() -> String {
    hex::encode(Sha256::digest(BUILTIN_PARAMS.as_bytes()))
}
