//! End-point error, dataset aggregates, mC-EPE and Pearson correlation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corrupt::CorruptionKind;
use crate::imgio::{DisparityMap, ImageBuffer};
use crate::{Error, Result};

/// How per-sample errors combine into a dataset mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    PerSample,
    PerPixel,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_sample" | "sample" => Ok(Self::PerSample),
            "per_pixel" | "pixel" => Ok(Self::PerPixel),
            other => Err(Error::Config(format!(
                "unknown weighting {other:?} (per_sample or per_pixel)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEpe {
    pub id: String,
    pub epe: f64,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean_epe: f64,
    pub n_pixels: usize,
    pub n_samples: usize,
    pub weighting: Weighting,
    pub per_sample: Vec<SampleEpe>,
}

impl MetricSummary {
    pub fn from_samples(per_sample: Vec<SampleEpe>, weighting: Weighting) -> Result<Self> {
        let mean_epe = match weighting {
            Weighting::PerSample => {
                dataset_mean_epe(&per_sample.iter().map(|s| s.epe).collect::<Vec<_>>())?
            }
            Weighting::PerPixel => pixel_weighted_mean_epe(&per_sample)?,
        };
        Ok(Self {
            mean_epe,
            n_pixels: per_sample.iter().map(|s| s.n_pixels).sum(),
            n_samples: per_sample.len(),
            weighting,
            per_sample,
        })
    }
}

/// Mean absolute disparity error over pixels valid in `gt`.
pub fn epe(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    Ok(epe_counted(pred, gt)?.0)
}

/// EPE together with the number of valid pixels it averages over.
pub fn epe_counted(pred: &DisparityMap, gt: &DisparityMap) -> Result<(f64, usize)> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((p, g), ok) in pred.values().iter().zip(gt.values()).zip(gt.valid()) {
        if *ok {
            sum += (*p as f64 - *g as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Metric("ground truth has no valid pixels".into()));
    }
    Ok((sum / n as f64, n))
}

pub fn dataset_mean_epe(per_sample: &[f64]) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(Error::Metric("mean over zero samples".into()));
    }
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

pub fn pixel_weighted_mean_epe(per_sample: &[SampleEpe]) -> Result<f64> {
    let n: usize = per_sample.iter().map(|s| s.n_pixels).sum();
    if n == 0 {
        return Err(Error::Metric("mean over zero pixels".into()));
    }
    Ok(per_sample
        .iter()
        .map(|s| s.epe * s.n_pixels as f64)
        .sum::<f64>()
        / n as f64)
}

/// Mean over the per-corruption dataset means; all 15 kinds must be present.
pub fn mc_epe(per_corruption: &BTreeMap<CorruptionKind, f64>) -> Result<f64> {
    let missing: Vec<&str> = CorruptionKind::ALL
        .iter()
        .filter(|k| !per_corruption.contains_key(k))
        .map(|k| k.name())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Metric(format!(
            "mC-EPE needs all 15 corruptions, missing {}",
            missing.join(", ")
        )));
    }
    let values: Vec<f64> = CorruptionKind::ALL
        .iter()
        .map(|k| per_corruption[k])
        .collect();
    dataset_mean_epe(&values)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Metric(format!(
            "pearson needs equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Metric("pearson needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Metric("pearson undefined for zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Peak signal-to-noise ratio in dB for images in `[0,1]`; identical images
/// give `+inf`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("PSNR operands differ in shape".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}
