//! Differentiable reference disparity estimator and a block-matching
//! baseline.
//!
//! The reference model is a shared convolutional feature stack, a
//! single-group correlation cost volume and a soft-argmin readout. Its weights
//! are seeded, orthonormalized random filters: the model is untrained, but
//! correlating random local features is still a working matcher on textured
//! scenes, and every stage is differentiable down to the input pixels.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Padding, Tensor};
use crate::imgio::{DisparityMap, ImageBuffer, StereoSample};
use crate::rng::substream;
use crate::{Error, Result};

const KERNEL: usize = 3;
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub max_disparity: usize,
    pub feature_channels: usize,
    pub feature_layers: usize,
    pub temperature: f64,
    pub weight_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_disparity: 32,
            feature_channels: 8,
            feature_layers: 2,
            temperature: 0.1,
            weight_seed: 0x5eed_d15b,
        }
    }
}

/// Named presets standing in for a model zoo.
pub const MODEL_PRESETS: &[&str] = &[
    "reference",
    "reference-sharp",
    "reference-deep",
    "reference-small",
];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let cfg = match name {
            "reference" => base,
            "reference-sharp" => Self {
                temperature: 0.01,
                ..base
            },
            "reference-deep" => Self {
                feature_channels: 12,
                feature_layers: 3,
                ..base
            },
            "reference-small" => Self {
                max_disparity: 16,
                feature_channels: 6,
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset {other:?} (known: {})",
                    MODEL_PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_disparity < 1 {
            return Err(Error::Config("max_disparity must be at least 1".into()));
        }
        if self.feature_channels < 1 || self.feature_layers < 1 {
            return Err(Error::Config(
                "feature stack needs at least one layer and channel".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Smallest image side the feature stack accepts.
    pub fn receptive_field(&self) -> usize {
        1 + (KERNEL - 1) * self.feature_layers
    }
}

/// Matching costs laid out as `[D, H, W]`; entry `(i, j, d)` compares left
/// pixel `(i, j)` with right pixel `(i, j - d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    tensor: Tensor,
}

impl CostVolume {
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "cost volume must be [D,H,W], got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self { tensor })
    }

    pub fn max_disparity(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, d: usize) -> f64 {
        self.tensor.data()[(d * self.height() + i) * self.width() + j]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// `[C, H, W]` tensor view of an image.
pub fn image_tensor(img: &ImageBuffer) -> Tensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.data();
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = src[(y * w + x) * c + ch] as f64;
            }
        }
    }
    Tensor::new(&[c, h, w], data).expect("sized")
}

/// `[H, W]` tensor as an all-valid disparity map.
pub fn disparity_from_tensor(t: &Tensor) -> Result<DisparityMap> {
    let [h, w] = t.shape() else {
        return Err(Error::Shape(format!(
            "disparity tensor must be [H,W], got {:?}",
            t.shape()
        )));
    };
    DisparityMap::from_values(*h, *w, t.data().iter().map(|v| *v as f32).collect())
}

fn orthonormal_rows(
    rows: usize,
    cols: usize,
    zero_mean: bool,
    seed: u64,
    labels: &[&str],
) -> Vec<f64> {
    let mut rng = substream(seed, labels);
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for r in 0..rows {
        if zero_mean {
            let mean = m[r].iter().sum::<f64>() / cols as f64;
            m[r].iter_mut().for_each(|v| *v -= mean);
        }
        // Gram-Schmidt while the row space has room, plain normalization after
        if r < cols {
            for p in 0..r {
                let dot: f64 = m[r].iter().zip(&m[p]).map(|(a, b)| a * b).sum();
                let prev = m[p].clone();
                m[r].iter_mut().zip(&prev).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = m[r].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            m[r].iter_mut().for_each(|v| *v /= norm);
        }
    }
    m.into_iter().flatten().collect()
}

#[derive(Debug, Clone)]
struct FeatureStack {
    kernels: Vec<Tensor>,
}

impl FeatureStack {
    fn new(cfg: &ModelConfig, in_channels: usize) -> Self {
        let c = cfg.feature_channels;
        let tag = in_channels.to_string();
        let kernels = (0..cfg.feature_layers)
            .map(|layer| {
                let cin = if layer == 0 { in_channels } else { c };
                let cols = cin * KERNEL * KERNEL;
                // first layer filters are zero-mean so flat regions give zero features
                let gain = if layer == 0 { 3.0 } else { 1.5 };
                let mut w = orthonormal_rows(
                    c,
                    cols,
                    layer == 0,
                    cfg.weight_seed,
                    &["weights", &tag, &layer.to_string()],
                );
                w.iter_mut().for_each(|v| *v *= gain);
                Tensor::new(&[c, cin, KERNEL, KERNEL], w).expect("sized")
            })
            .collect();
        Self { kernels }
    }

    fn forward(&self, g: &mut Graph, image: NodeId) -> Result<NodeId> {
        let mut x = image;
        let last = self.kernels.len() - 1;
        for (i, k) in self.kernels.iter().enumerate() {
            let kn = g.constant(k.clone());
            let padded = g.pad_edge(x, KERNEL / 2)?;
            x = g.conv2d(padded, kn, Padding::Valid)?;
            if i != last {
                x = g.tanh(x)?;
            }
        }
        Ok(x)
    }
}

/// Per-pixel L2 normalization over the channel axis of a `[C,H,W]` node.
fn normalize_channels(g: &mut Graph, f: NodeId) -> Result<NodeId> {
    let c = g.value(f)?.shape()[0];
    let sq = g.mul(f, f)?;
    let n2 = g.sum_axis(sq, 0)?;
    let n2 = g.add_scalar(n2, NORM_EPS)?;
    let n = g.sqrt(n2)?;
    let nb = g.broadcast_axis(n, 0, c)?;
    g.div(f, nb)
}

/// Negative normalized correlation volume `[D,H,W]` on a graph. Right-image
/// lookups left of column 0 clamp to column 0.
pub fn cost_volume_node(
    g: &mut Graph,
    feat_left: NodeId,
    feat_right: NodeId,
    max_disparity: usize,
) -> Result<NodeId> {
    let (sl, sr) = (
        g.value(feat_left)?.shape().to_vec(),
        g.value(feat_right)?.shape().to_vec(),
    );
    if sl != sr || sl.len() != 3 {
        return Err(Error::Shape(format!(
            "feature shapes {sl:?} and {sr:?} must match as [C,H,W]"
        )));
    }
    if max_disparity < 1 || max_disparity > sl[2] {
        return Err(Error::Config(format!(
            "max disparity {max_disparity} must be in 1..={} (image width)",
            sl[2]
        )));
    }
    let fl = normalize_channels(g, feat_left)?;
    let fr = normalize_channels(g, feat_right)?;
    let corr = g.correlation(fl, fr, max_disparity)?;
    g.scalar_mul(corr, -1.0)
}

/// Expected disparity under `softmax_d(-cost / temperature)`, `[H,W]`.
pub fn soft_argmin_node(g: &mut Graph, volume: NodeId, temperature: f64) -> Result<NodeId> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let d = g.value(volume)?.shape().first().copied().unwrap_or(0);
    let logits = g.scalar_mul(volume, -1.0 / temperature)?;
    let p = g.softmax_axis(logits, 0)?;
    let disparities: Vec<f64> = (0..d).map(|k| k as f64).collect();
    g.weighted_sum(p, 0, &disparities)
}

pub fn build_cost_volume(
    feat_left: &Tensor,
    feat_right: &Tensor,
    max_disparity: usize,
) -> Result<CostVolume> {
    let mut g = Graph::untaped();
    let (l, r) = (g.input(feat_left.clone()), g.input(feat_right.clone()));
    let v = cost_volume_node(&mut g, l, r, max_disparity)?;
    CostVolume::from_tensor(g.value(v)?.clone())
}

pub fn soft_argmin(volume: &CostVolume, temperature: f64) -> Result<DisparityMap> {
    let mut g = Graph::untaped();
    let v = g.input(volume.tensor.clone());
    let d = soft_argmin_node(&mut g, v, temperature)?;
    disparity_from_tensor(g.value(d)?)
}

/// Loss value, clean prediction and input gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub prediction: Tensor,
    pub grad_left: Tensor,
    pub grad_right: Tensor,
}

#[derive(Debug, Clone)]
pub struct ReferenceModel {
    config: ModelConfig,
    gray: FeatureStack,
    rgb: FeatureStack,
}

impl ReferenceModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            gray: FeatureStack::new(&config, 1),
            rgb: FeatureStack::new(&config, 3),
            config,
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::new(ModelConfig::preset(name)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Shared feature stack applied to a `[C,H,W]` image node.
    pub fn features_node(&self, g: &mut Graph, image: NodeId) -> Result<NodeId> {
        let shape = g.value(image)?.shape().to_vec();
        let [c, h, w] = shape.as_slice() else {
            return Err(Error::Shape(format!(
                "image tensor must be [C,H,W], got {shape:?}"
            )));
        };
        let rf = self.config.receptive_field();
        if *h < rf || *w < rf {
            return Err(Error::Shape(format!(
                "image {h}x{w} is smaller than the {rf}x{rf} receptive field"
            )));
        }
        match c {
            1 => self.gray.forward(g, image),
            3 => self.rgb.forward(g, image),
            _ => Err(Error::Shape(format!("unsupported channel count {c}"))),
        }
    }

    pub fn extract_features(&self, image: &ImageBuffer) -> Result<Tensor> {
        let mut g = Graph::untaped();
        let x = g.input(image_tensor(image));
        let f = self.features_node(&mut g, x)?;
        Ok(g.value(f)?.clone())
    }

    /// Full pipeline on graph nodes; returns the `[H,W]` disparity node.
    pub fn forward(&self, g: &mut Graph, left: NodeId, right: NodeId) -> Result<NodeId> {
        if g.value(left)?.shape() != g.value(right)?.shape() {
            return Err(Error::Shape("left and right images differ in shape".into()));
        }
        let fl = self.features_node(g, left)?;
        let fr = self.features_node(g, right)?;
        let cv = cost_volume_node(g, fl, fr, self.config.max_disparity)?;
        soft_argmin_node(g, cv, self.config.temperature)
    }

    pub fn cost_volume(&self, left: &ImageBuffer, right: &ImageBuffer) -> Result<CostVolume> {
        build_cost_volume(
            &self.extract_features(left)?,
            &self.extract_features(right)?,
            self.config.max_disparity,
        )
    }

    pub fn predict_tensors(&self, left: &Tensor, right: &Tensor) -> Result<Tensor> {
        let mut g = Graph::untaped();
        let (l, r) = (g.input(left.clone()), g.input(right.clone()));
        let d = self.forward(&mut g, l, r)?;
        Ok(g.value(d)?.clone())
    }

    pub fn predict_pair(&self, left: &ImageBuffer, right: &ImageBuffer) -> Result<DisparityMap> {
        disparity_from_tensor(&self.predict_tensors(&image_tensor(left), &image_tensor(right))?)
    }

    pub fn predict(&self, sample: &StereoSample) -> Result<DisparityMap> {
        self.predict_pair(&sample.left, &sample.right)
    }

    /// Gradient of `head(prediction)` with respect to both input images.
    pub fn input_gradient<F>(&self, left: &Tensor, right: &Tensor, head: F) -> Result<LossGradient>
    where
        F: FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
    {
        let mut g = Graph::new();
        let (l, r) = (g.input(left.clone()), g.input(right.clone()));
        let pred = self.forward(&mut g, l, r)?;
        let loss = head(&mut g, pred)?;
        let loss_value = g.value(loss)?.item()?;
        let grads = g.backward(loss)?;
        Ok(LossGradient {
            loss: loss_value,
            prediction: g.value(pred)?.clone(),
            grad_left: grads.wrt(l)?.clone(),
            grad_right: grads.wrt(r)?.clone(),
        })
    }
}

/// Winner-take-all sum-of-absolute-differences matcher. Window coordinates
/// clamp at the borders, right-image columns left of 0 clamp to 0 and ties
/// resolve to the smaller disparity.
pub fn block_matching_oracle(
    sample: &StereoSample,
    max_disparity: usize,
    window: usize,
) -> Result<DisparityMap> {
    if window % 2 == 0 {
        return Err(Error::Config(format!(
            "block matching window must be odd, got {window}"
        )));
    }
    if max_disparity < 1 {
        return Err(Error::Config("max disparity must be at least 1".into()));
    }
    let (l, r) = (&sample.left, &sample.right);
    let (h, w, c) = (l.height(), l.width(), l.channels());
    let half = (window / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut out = vec![0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut best = (f64::INFINITY, 0usize);
            for d in 0..max_disparity {
                let mut sad = 0.0f64;
                for dy in -half..=half {
                    let y = clamp(i as isize + dy, h);
                    for dx in -half..=half {
                        let x = clamp(j as isize + dx, w);
                        let xr = clamp(x as isize - d as isize, w);
                        for ch in 0..c {
                            sad += (l.get(y, x, ch) as f64 - r.get(y, xr, ch) as f64).abs();
                        }
                    }
                }
                if sad < best.0 {
                    best = (sad, d);
                }
            }
            out[i * w + j] = best.1 as f32;
        }
    }
    DisparityMap::from_values(h, w, out)
}
