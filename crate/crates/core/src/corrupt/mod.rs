//! The fifteen 2D common corruptions at severities 1 to 5.
//!
//! Functional forms follow the usual common-corruption benchmark; severity
//! parameters come from `data/corruption_params.toml`. Every stochastic draw
//! uses a substream keyed by the spec seed and kind, so results are a pure
//! function of `(image, kind, severity, seed)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::imgio::{ImageBuffer, StereoSample};
use crate::rng::{derive_seed, substream};
use crate::{Error, Result};

mod filters;
pub mod jpeg;
pub mod params;

use filters::{Kernel, Planes};
pub use jpeg::{decode_jpeg, encode_jpeg, jpeg_roundtrip};
pub use params::{params_hash, CorruptionParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    FrostedGlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    Elastic,
    Pixelate,
    Jpeg,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 15] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::DefocusBlur,
        Self::FrostedGlassBlur,
        Self::MotionBlur,
        Self::ZoomBlur,
        Self::Snow,
        Self::Frost,
        Self::Fog,
        Self::Brightness,
        Self::Contrast,
        Self::Elastic,
        Self::Pixelate,
        Self::Jpeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::DefocusBlur => "defocus_blur",
            Self::FrostedGlassBlur => "frosted_glass_blur",
            Self::MotionBlur => "motion_blur",
            Self::ZoomBlur => "zoom_blur",
            Self::Snow => "snow",
            Self::Frost => "frost",
            Self::Fog => "fog",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Elastic => "elastic",
            Self::Pixelate => "pixelate",
            Self::Jpeg => "jpeg",
        }
    }

    /// Kinds that operate on colour and promote grayscale input to RGB.
    pub fn needs_color(self) -> bool {
        matches!(
            self,
            Self::Snow | Self::Frost | Self::Fog | Self::Brightness | Self::Jpeg
        )
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    /// Accepts the canonical name, its first word (`motion`, `gaussian`)
    /// and the names `glass_blur`, `elastic_transform`, `jpeg_compression`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        let alias = match s.as_str() {
            "glass_blur" => Some(Self::FrostedGlassBlur),
            "elastic_transform" => Some(Self::Elastic),
            "jpeg_compression" => Some(Self::Jpeg),
            _ => None,
        };
        alias
            .or_else(|| Self::ALL.into_iter().find(|k| k.name() == s))
            .or_else(|| {
                Self::ALL
                    .into_iter()
                    .find(|k| k.name().contains('_') && k.name().split('_').next() == Some(s.as_str()))
            })
            .ok_or_else(|| Error::Config(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            severity,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Config(format!(
                "severity must be in 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }
}

pub fn apply_corruption(image: &ImageBuffer, spec: &CorruptionSpec) -> Result<ImageBuffer> {
    apply_with(image, spec, CorruptionParams::builtin())
}

/// [`apply_corruption`] with explicit parameter tables.
pub fn apply_with(
    image: &ImageBuffer,
    spec: &CorruptionSpec,
    p: &CorruptionParams,
) -> Result<ImageBuffer> {
    spec.validate()?;
    if spec.kind.needs_color() && image.channels() == 1 {
        let out = apply_with(&image.to_rgb(), spec, p)?;
        return Ok(out.to_gray());
    }
    let s = spec.severity as usize - 1;
    let mut rng = substream(spec.seed, &["corrupt", spec.kind.name()]);
    let planes = Planes::from_image(image);
    let (h, w) = (planes.h, planes.w);

    let out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, p.gaussian_noise.sigma[s])
                .map_err(|e| Error::Config(format!("gaussian_noise sigma: {e}")))?;
            noise_planes(&planes, |v, r| v + n.sample(r), &mut rng)
        }
        CorruptionKind::ShotNoise => {
            let lambda = p.shot_noise.lambda[s];
            noise_planes(
                &planes,
                |v, r| {
                    let rate = (v * lambda).max(0.0);
                    if rate == 0.0 {
                        0.0
                    } else {
                        Poisson::new(rate).map(|d| d.sample(r)).unwrap_or(rate) / lambda
                    }
                },
                &mut rng,
            )
        }
        CorruptionKind::ImpulseNoise => {
            let rate = p.impulse_noise.rate[s];
            noise_planes(
                &planes,
                |v, r| {
                    if r.random::<f64>() < rate {
                        if r.random::<bool>() {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                },
                &mut rng,
            )
        }
        CorruptionKind::DefocusBlur => {
            let k = Kernel::disk(p.defocus_blur.radius[s]);
            let alias = p.defocus_blur.alias_sigma[s];
            planes.map_planes(|pl| filters::gaussian_blur(&k.apply(pl, h, w), h, w, alias))
        }
        CorruptionKind::FrostedGlassBlur => {
            let g = &p.frosted_glass_blur;
            let (sigma, delta) = (g.sigma[s], g.max_delta[s] as i64);
            let mut out = planes.map_planes(|pl| filters::gaussian_blur(pl, h, w, sigma));
            for _ in 0..g.iterations[s] {
                for y in (0..h as isize).rev() {
                    for x in (0..w as isize).rev() {
                        let dy = rng.random_range(-delta..=delta) as isize;
                        let dx = rng.random_range(-delta..=delta) as isize;
                        let (yy, xx) = (
                            (y + dy).clamp(0, h as isize - 1) as usize,
                            (x + dx).clamp(0, w as isize - 1) as usize,
                        );
                        let (a, b) = (y as usize * w + x as usize, yy * w + xx);
                        for pl in out.ch.iter_mut() {
                            pl.swap(a, b);
                        }
                    }
                }
            }
            out.map_planes(|pl| filters::gaussian_blur(pl, h, w, sigma))
        }
        CorruptionKind::MotionBlur => {
            let angle = rng.random_range(-45.0f64..45.0).to_radians();
            let k = Kernel::line(p.motion_blur.radius[s], angle);
            planes.map_planes(|pl| k.apply(pl, h, w))
        }
        CorruptionKind::ZoomBlur => {
            let (max_zoom, step) = (p.zoom_blur.max_zoom[s], p.zoom_blur.step[s]);
            let zooms: Vec<f64> = (0..)
                .map(|k| 1.0 + step * k as f64)
                .take_while(|z| *z < max_zoom)
                .collect();
            planes.map_planes(|pl| {
                let mut acc = pl.to_vec();
                for z in &zooms {
                    for (a, v) in acc.iter_mut().zip(filters::zoom(pl, h, w, *z)) {
                        *a += v;
                    }
                }
                let n = (zooms.len() + 1) as f64;
                acc.into_iter().map(|v| v / n).collect()
            })
        }
        CorruptionKind::Snow => {
            let c = &p.snow;
            let n = Normal::new(c.flake_mean[s], c.flake_std[s])
                .map_err(|e| Error::Config(format!("snow flake_std: {e}")))?;
            let layer: Vec<f64> = (0..h * w)
                .map(|_| {
                    let v: f64 = n.sample(&mut rng);
                    if v < c.threshold[s] {
                        0.0
                    } else {
                        v
                    }
                })
                .collect();
            let angle = rng.random_range(-135.0f64..-45.0).to_radians();
            let flakes = Kernel::line(c.blur_radius[s], angle).apply(&layer, h, w);
            let gray: Vec<f64> = (0..h * w)
                .map(|i| {
                    0.299 * planes.ch[0][i] + 0.587 * planes.ch[1][i] + 0.114 * planes.ch[2][i]
                })
                .collect();
            let wt = c.whitening[s];
            let mut out = planes.clone();
            for pl in out.ch.iter_mut() {
                for i in 0..h * w {
                    let v = pl[i];
                    let lifted = wt * v + (1.0 - wt) * v.max(gray[i] * 1.5 + 0.5);
                    // the layer is added twice, once rotated by 180 degrees
                    pl[i] = lifted + flakes[i] + flakes[h * w - 1 - i];
                }
            }
            out
        }
        CorruptionKind::Frost => {
            let tex = filters::frost_texture(h, w, &mut rng);
            let (a, b) = (p.frost.image_weight[s], p.frost.frost_weight[s]);
            planes.map_planes(|pl| pl.iter().zip(&tex).map(|(v, t)| a * v + b * t).collect())
        }
        CorruptionKind::Fog => {
            let (opacity, decay) = (p.fog.opacity[s], p.fog.decay[s]);
            let haze = filters::plasma(h, w, decay, &mut rng);
            let max_val = planes
                .ch
                .iter()
                .flat_map(|pl| pl.iter())
                .fold(0.0f64, |m, v| m.max(*v));
            planes.map_planes(|pl| {
                pl.iter()
                    .zip(&haze)
                    .map(|(v, f)| (v + opacity * f) * max_val / (max_val + opacity))
                    .collect()
            })
        }
        CorruptionKind::Brightness => {
            let shift = p.brightness.shift[s];
            let mut out = planes.clone();
            for i in 0..h * w {
                let (hh, ss, vv) =
                    filters::rgb_to_hsv(planes.ch[0][i], planes.ch[1][i], planes.ch[2][i]);
                let (r, g, b) = filters::hsv_to_rgb(hh, ss, (vv + shift).clamp(0.0, 1.0));
                out.ch[0][i] = r;
                out.ch[1][i] = g;
                out.ch[2][i] = b;
            }
            out
        }
        CorruptionKind::Contrast => {
            let c = p.contrast.factor[s];
            let n = (h * w * planes.ch.len()) as f64;
            let mean = planes.ch.iter().flat_map(|pl| pl.iter()).sum::<f64>() / n;
            planes.map_planes(|pl| pl.iter().map(|v| (v - mean) * c + mean).collect())
        }
        CorruptionKind::Elastic => {
            return elastic_transform(image, p.elastic.alpha[s], p.elastic.sigma[s], spec.seed);
        }
        CorruptionKind::Pixelate => {
            let scale = p.pixelate.scale[s];
            planes.map_planes(|pl| filters::pixelate(pl, h, w, scale))
        }
        CorruptionKind::Jpeg => return jpeg_roundtrip(image, p.jpeg.quality[s]),
    };
    Ok(out.to_image())
}

fn noise_planes<R: Rng>(planes: &Planes, f: impl Fn(f64, &mut R) -> f64, rng: &mut R) -> Planes {
    // pixel-major draw order so the stream does not depend on the plane layout
    let mut out = planes.clone();
    for i in 0..planes.h * planes.w {
        for (k, pl) in planes.ch.iter().enumerate() {
            out.ch[k][i] = f(pl[i], rng);
        }
    }
    out
}

/// Resamples at positions displaced by a smoothed random field whose largest
/// displacement is `alpha` pixels.
pub fn elastic_transform(
    image: &ImageBuffer,
    alpha: f64,
    sigma: f64,
    seed: u64,
) -> Result<ImageBuffer> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "elastic alpha must be >= 0, got {alpha}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "elastic sigma must be > 0, got {sigma}"
        )));
    }
    if alpha == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = substream(seed, &["corrupt", "elastic"]);
    let planes = Planes::from_image(image);
    let (h, w) = (planes.h, planes.w);
    let (dy, dx) = filters::displacement_field(h, w, alpha, sigma, &mut rng);
    Ok(planes
        .map_planes(|pl| filters::warp(pl, h, w, &dy, &dx))
        .to_image())
}

/// Corrupts both eyes with the same kind and severity. Each eye draws from
/// its own substream derived from `(seed, sample id, eye)`.
pub fn corrupt_stereo_pair(sample: &StereoSample, spec: &CorruptionSpec) -> Result<StereoSample> {
    let eye = |img: &ImageBuffer, name: &str| {
        let eye_spec = CorruptionSpec {
            seed: derive_seed(spec.seed, &[&sample.id, name]),
            ..*spec
        };
        apply_corruption(img, &eye_spec)
    };
    StereoSample::new(
        sample.id.clone(),
        eye(&sample.left, "left")?,
        eye(&sample.right, "right")?,
        sample.gt.clone(),
    )
}
