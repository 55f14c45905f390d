//! White-box attacks on disparity models: FGSM, BIM, PGD, APGD and CosPGD
//! under L-infinity or L2 budgets, targeted or not.
//!
//! Iterates are kept as adversarial images whose values are exactly
//! representable in `f32` and are rounded toward the clean image, so the
//! budget and the `[0,1]` range hold exactly for the stored result, not
//! only up to float error.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::imgio::{DisparityMap, ImageBuffer, StereoSample};
use crate::rng::substream;
use crate::stereoref::{image_tensor, LossGradient, ReferenceModel};
use crate::{Error, Result};

/// Anything that maps a stereo pair to disparity and can differentiate a
/// scalar head of its prediction with respect to both input images.
pub trait DisparityModel: Send + Sync {
    fn max_disparity(&self) -> usize;

    fn predict_tensors(&self, left: &Tensor, right: &Tensor) -> Result<Tensor>;

    fn loss_gradient(
        &self,
        left: &Tensor,
        right: &Tensor,
        head: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>,
    ) -> Result<LossGradient>;
}

impl DisparityModel for ReferenceModel {
    fn max_disparity(&self) -> usize {
        self.config().max_disparity
    }

    fn predict_tensors(&self, left: &Tensor, right: &Tensor) -> Result<Tensor> {
        ReferenceModel::predict_tensors(self, left, right)
    }

    fn loss_gradient(
        &self,
        left: &Tensor,
        right: &Tensor,
        head: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>,
    ) -> Result<LossGradient> {
        self.input_gradient(left, right, head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ThreatModel {
    #[serde(rename = "FGSM")]
    Fgsm,
    #[serde(rename = "BIM")]
    Bim,
    #[serde(rename = "PGD")]
    Pgd,
    #[serde(rename = "APGD")]
    Apgd,
    #[serde(rename = "CosPGD")]
    CosPgd,
}

impl ThreatModel {
    pub const ALL: [ThreatModel; 5] = [Self::Fgsm, Self::Bim, Self::Pgd, Self::Apgd, Self::CosPgd];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fgsm => "FGSM",
            Self::Bim => "BIM",
            Self::Pgd => "PGD",
            Self::Apgd => "APGD",
            Self::CosPgd => "CosPGD",
        }
    }
}

impl fmt::Display for ThreatModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ThreatModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown threat_model {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    Linf,
    L2,
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Linf" | "linf" | "inf" => Ok(Self::Linf),
            "L2" | "l2" => Ok(Self::L2),
            other => Err(Error::Config(format!(
                "lp_norm must be Linf or L2, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Target {
    #[default]
    None,
    /// Steer toward an all-zero disparity map.
    Zero,
    Map(DisparityMap),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eyes {
    #[default]
    Both,
    Left,
    Right,
}

impl FromStr for Eyes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            other => Err(Error::Config(format!(
                "eyes must be both, left or right, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub threat_model: ThreatModel,
    pub iterations: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub lp_norm: Norm,
    pub target: Target,
    pub seed: u64,
    pub eyes: Eyes,
}

impl AttackConfig {
    pub fn new(threat_model: ThreatModel, iterations: usize, alpha: f64, epsilon: f64, lp_norm: Norm) -> Self {
        Self {
            threat_model,
            iterations,
            alpha,
            epsilon,
            lp_norm,
            target: Target::None,
            seed: 0,
            eyes: Eyes::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.threat_model == ThreatModel::Apgd && self.lp_norm == Norm::L2 {
            return Err(Error::Config("APGD supports only the Linf norm".into()));
        }
        Ok(())
    }

    /// Iterations actually run; FGSM is a single step.
    pub fn effective_iterations(&self) -> usize {
        if self.threat_model == ThreatModel::Fgsm {
            1
        } else {
            self.iterations
        }
    }

    pub fn targeted(&self) -> bool {
        self.target != Target::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Plain,
    CosineWeighted,
}

/// Perturbation per eye, `[C,H,W]`, equal to adversarial minus clean.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta_left: Tensor,
    pub delta_right: Tensor,
}

impl Perturbation {
    pub fn norms(&self, norm: Norm) -> (f64, f64) {
        (lp_norm(self.delta_left.data(), norm), lp_norm(self.delta_right.data(), norm))
    }
}

pub fn lp_norm(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Linf => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Projection onto the epsilon ball: clamp for Linf, rescale for L2.
pub fn project_lp(delta: &mut [f64], epsilon: f64, norm: Norm) {
    match norm {
        Norm::Linf => delta.iter_mut().for_each(|d| *d = d.clamp(-epsilon, epsilon)),
        Norm::L2 => {
            let n = lp_norm(delta, Norm::L2);
            if n > epsilon {
                let s = epsilon / n;
                delta.iter_mut().for_each(|d| *d *= s);
            }
        }
    }
}

/// `clamp(x + delta, 0, 1)`.
pub fn clip_valid(x: &[f64], delta: &[f64]) -> Vec<f64> {
    x.iter().zip(delta).map(|(a, d)| (a + d).clamp(0.0, 1.0)).collect()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Embeds a disparity as the 2-vector `(s, 1-s)`, `s` a logistic squashing
/// of `v / D` centred on half the range.
pub fn embed(v: f64, max_disparity: usize) -> [f64; 2] {
    let s = 1.0 / (1.0 + (-4.0 * (2.0 * v / max_disparity as f64 - 1.0)).exp());
    [s, 1.0 - s]
}

pub fn cosine_weight(pred: f64, reference: f64, max_disparity: usize) -> f64 {
    let (a, b) = (embed(pred, max_disparity), embed(reference, max_disparity));
    let dot = a[0] * b[0] + a[1] * b[1];
    let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
    (dot / (na * nb)).min(1.0)
}

fn valid_count(reference: &DisparityMap) -> Result<usize> {
    match reference.valid_count() {
        0 => Err(Error::Metric("attack reference has no valid pixels".into())),
        n => Ok(n),
    }
}

/// Numeric attack loss: mean over valid reference pixels of the (optionally
/// cosine-weighted) absolute disparity error.
pub fn attack_loss(pred: &[f64], reference: &DisparityMap, mode: LossMode, max_disparity: usize) -> Result<f64> {
    if pred.len() != reference.values().len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, reference {}",
            pred.len(),
            reference.values().len()
        )));
    }
    let n = valid_count(reference)?;
    let mut sum = 0.0;
    for ((p, r), ok) in pred.iter().zip(reference.values()).zip(reference.valid()) {
        if *ok {
            let r = *r as f64;
            let w = match mode {
                LossMode::Plain => 1.0,
                LossMode::CosineWeighted => cosine_weight(*p, r, max_disparity),
            };
            sum += w * (p - r).abs();
        }
    }
    Ok(sum / n as f64)
}

/// Graph form of [`attack_loss`]. Per-pixel weights are constants; for
/// `CosineWeighted` they are computed from the current prediction and not
/// differentiated through, and `complement` switches them to `1 - cos`.
pub fn attack_loss_node(
    g: &mut Graph,
    pred: NodeId,
    reference: &DisparityMap,
    mode: LossMode,
    max_disparity: usize,
    complement: bool,
) -> Result<NodeId> {
    let shape = g.value(pred)?.shape().to_vec();
    if shape != [reference.height(), reference.width()] {
        return Err(Error::Shape(format!(
            "prediction {shape:?} vs reference {}x{}",
            reference.height(),
            reference.width()
        )));
    }
    let n = valid_count(reference)?;
    let p = g.value(pred)?.data().to_vec();
    let mut refs = Vec::with_capacity(p.len());
    let mut weights = Vec::with_capacity(p.len());
    for ((pv, r), ok) in p.iter().zip(reference.values()).zip(reference.valid()) {
        let r = if *ok { *r as f64 } else { 0.0 };
        refs.push(r);
        let w = match (ok, mode) {
            (false, _) => 0.0,
            (true, LossMode::Plain) => 1.0,
            (true, LossMode::CosineWeighted) => {
                let c = cosine_weight(*pv, r, max_disparity);
                if complement {
                    1.0 - c
                } else {
                    c
                }
            }
        };
        weights.push(w);
    }
    let r = g.constant(Tensor::new(&shape, refs)?);
    let w = g.constant(Tensor::new(&shape, weights)?);
    let diff = g.sub(pred, r)?;
    let a = g.abs(diff)?;
    let weighted = g.mul(a, w)?;
    let total = g.sum_all(weighted)?;
    g.scalar_mul(total, 1.0 / n as f64)
}

/// One iterate as seen by an observer.
#[derive(Debug)]
pub struct Iterate<'a> {
    pub step: usize,
    pub clean_left: &'a Tensor,
    pub clean_right: &'a Tensor,
    pub adv_left: &'a Tensor,
    pub adv_right: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub perturbation: Perturbation,
    pub adversarial: StereoSample,
    /// Plain loss of the clean prediction against the attack reference.
    pub clean_loss: f64,
    /// Plain loss of the returned iterate.
    pub final_loss: f64,
    /// Plain loss of every iterate, starting with the initial one.
    pub losses: Vec<f64>,
    /// Index into `losses` of the returned iterate.
    pub returned_step: usize,
}

/// Rounds `ideal` to an `f32` value, moving toward `clean` and staying
/// inside `[clean - eps, clean + eps]` when `eps` is given.
fn snap(clean: f64, ideal: f64, eps: Option<f64>) -> f64 {
    let mut v = ideal as f32;
    let toward = |v: f32| {
        if (v as f64) > clean {
            v.next_down()
        } else {
            v.next_up()
        }
    };
    if ((v as f64) - clean).abs() > (ideal - clean).abs() {
        v = toward(v);
    }
    if let Some(e) = eps {
        while ((v as f64) - clean).abs() > e {
            v = toward(v);
        }
    }
    (v as f64).clamp(0.0, 1.0)
}

struct Engine<'a> {
    model: &'a dyn DisparityModel,
    cfg: &'a AttackConfig,
    clean: [Tensor; 2],
    reference: DisparityMap,
    sign: f64,
    attack_eye: [bool; 2],
    d: usize,
}

impl Engine<'_> {
    fn project(&self, eye: usize, ideal: &[f64]) -> Tensor {
        let x = self.clean[eye].data();
        if !self.attack_eye[eye] {
            return self.clean[eye].clone();
        }
        let mut delta: Vec<f64> = ideal.iter().zip(x).map(|(a, b)| a - b).collect();
        project_lp(&mut delta, self.cfg.epsilon, self.cfg.lp_norm);
        let adv = clip_valid(x, &delta);
        let eps = (self.cfg.lp_norm == Norm::Linf).then_some(self.cfg.epsilon);
        let data = adv.iter().zip(x).map(|(a, c)| snap(*c, *a, eps)).collect();
        Tensor::new(self.clean[eye].shape(), data).expect("same shape")
    }

    /// Objective to ascend, its input gradients and the plain loss.
    fn gradient(&self, adv: &[Tensor; 2], mode: LossMode) -> Result<(f64, [Tensor; 2], f64)> {
        let reference = &self.reference;
        let (d, complement) = (self.d, self.cfg.targeted());
        let out = self.model.loss_gradient(&adv[0], &adv[1], &|g, p| {
            attack_loss_node(g, p, reference, mode, d, complement)
        })?;
        let plain = attack_loss(out.prediction.data(), reference, LossMode::Plain, d)?;
        Ok((self.sign * out.loss, [out.grad_left, out.grad_right], plain))
    }

    fn plain_loss(&self, adv: &[Tensor; 2]) -> Result<f64> {
        let pred = self.model.predict_tensors(&adv[0], &adv[1])?;
        attack_loss(pred.data(), &self.reference, LossMode::Plain, self.d)
    }

    fn signed_step(&self, adv: &[Tensor; 2], grads: &[Tensor; 2], step: f64) -> [Tensor; 2] {
        let mv = |eye: usize| {
            let ideal: Vec<f64> = adv[eye]
                .data()
                .iter()
                .zip(grads[eye].data())
                .map(|(a, g)| a + self.sign * step * sign(*g))
                .collect();
            self.project(eye, &ideal)
        };
        [mv(0), mv(1)]
    }

    fn random_start(&self) -> [Tensor; 2] {
        let mut rng = substream(self.cfg.seed, &["attack", "start"]);
        let eps = self.cfg.epsilon;
        let mut start = |eye: usize| {
            let ideal: Vec<f64> = self.clean[eye]
                .data()
                .iter()
                .map(|x| x + rng.random_range(-eps..=eps))
                .collect();
            self.project(eye, &ideal)
        };
        let l = start(0);
        let r = start(1);
        [l, r]
    }
}

/// Runs the configured attack. `observer` sees every iterate after
/// projection, including the starting point.
pub fn run_attack(
    model: &dyn DisparityModel,
    sample: &StereoSample,
    cfg: &AttackConfig,
    observer: Option<&mut dyn FnMut(&Iterate<'_>)>,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let reference = match &cfg.target {
        Target::None => sample.gt.clone(),
        Target::Zero => DisparityMap::filled(sample.height(), sample.width(), 0.0)?,
        Target::Map(m) => {
            if m.height() != sample.height() || m.width() != sample.width() {
                return Err(Error::Shape("target map does not match the sample".into()));
            }
            m.clone()
        }
    };
    let engine = Engine {
        model,
        cfg,
        clean: [image_tensor(&sample.left), image_tensor(&sample.right)],
        reference,
        sign: if cfg.targeted() { -1.0 } else { 1.0 },
        attack_eye: match cfg.eyes {
            Eyes::Both => [true, true],
            Eyes::Left => [true, false],
            Eyes::Right => [false, true],
        },
        d: model.max_disparity(),
    };
    let mut noop = |_: &Iterate<'_>| {};
    let observer: &mut dyn FnMut(&Iterate<'_>) = match observer {
        Some(o) => o,
        None => &mut noop,
    };
    let mut emit = |step: usize, adv: &[Tensor; 2]| {
        observer(&Iterate {
            step,
            clean_left: &engine.clean[0],
            clean_right: &engine.clean[1],
            adv_left: &adv[0],
            adv_right: &adv[1],
        })
    };

    let clean_loss = engine.plain_loss(&engine.clean)?;
    let (best, losses, returned_step) = match cfg.threat_model {
        ThreatModel::Fgsm | ThreatModel::Bim | ThreatModel::Pgd | ThreatModel::CosPgd => {
            let mode = if cfg.threat_model == ThreatModel::CosPgd {
                LossMode::CosineWeighted
            } else {
                LossMode::Plain
            };
            let mut adv = if matches!(cfg.threat_model, ThreatModel::Fgsm | ThreatModel::Bim) {
                engine.clean.clone()
            } else {
                engine.random_start()
            };
            emit(0, &adv);
            let mut losses = Vec::new();
            let steps = cfg.effective_iterations();
            for t in 0..steps {
                let (_, grads, plain) = engine.gradient(&adv, mode)?;
                losses.push(plain);
                adv = engine.signed_step(&adv, &grads, cfg.alpha);
                emit(t + 1, &adv);
            }
            losses.push(engine.plain_loss(&adv)?);
            (adv, losses, steps)
        }
        ThreatModel::Apgd => apgd(&engine, &mut emit)?,
    };

    let to_image = |t: &Tensor, like: &ImageBuffer| {
        let [c, h, w] = t.shape() else { unreachable!() };
        let mut data = vec![0f32; c * h * w];
        for ch in 0..*c {
            for y in 0..*h {
                for x in 0..*w {
                    data[(y * w + x) * c + ch] = t.data()[(ch * h + y) * w + x] as f32;
                }
            }
        }
        debug_assert!(like.height() == *h && like.width() == *w);
        ImageBuffer::new(*h, *w, *c, data)
    };
    let adversarial = StereoSample::new(
        sample.id.clone(),
        to_image(&best[0], &sample.left)?,
        to_image(&best[1], &sample.right)?,
        sample.gt.clone(),
    )?;
    let delta = |eye: usize| {
        let data = best[eye]
            .data()
            .iter()
            .zip(engine.clean[eye].data())
            .map(|(a, c)| a - c)
            .collect();
        Tensor::new(engine.clean[eye].shape(), data).expect("same shape")
    };
    Ok(AttackOutcome {
        perturbation: Perturbation {
            delta_left: delta(0),
            delta_right: delta(1),
        },
        adversarial,
        clean_loss,
        final_loss: losses[returned_step],
        losses,
        returned_step,
    })
}

const APGD_CHECKPOINTS: [f64; 5] = [0.22, 0.47, 0.69, 0.85, 1.0];
const APGD_MOMENTUM: f64 = 0.75;
const APGD_RHO: f64 = 0.75;

type ApgdResult = ([Tensor; 2], Vec<f64>, usize);

fn apgd(engine: &Engine<'_>, emit: &mut dyn FnMut(usize, &[Tensor; 2])) -> Result<ApgdResult> {
    let cfg = engine.cfg;
    let steps = cfg.iterations;
    let checkpoints: Vec<usize> = APGD_CHECKPOINTS
        .iter()
        .map(|p| ((p * steps as f64).ceil() as usize).clamp(1, steps))
        .collect();

    let mut eta = cfg.alpha;
    let mut x = engine.random_start();
    emit(0, &x);
    let (mut obj, mut grads, plain) = engine.gradient(&x, LossMode::Plain)?;
    let mut losses = vec![plain];
    let (mut best_x, mut best_obj, mut best_step) = (x.clone(), obj, 0usize);
    let mut prev = x.clone();

    let mut last_cp = 0usize;
    let mut improved = 0usize;
    let (mut eta_at_cp, mut best_at_cp) = (eta, best_obj);

    for k in 0..steps {
        let z = engine.signed_step(&x, &grads, eta);
        let next = if k == 0 {
            z
        } else {
            let mix = |eye: usize| {
                let ideal: Vec<f64> = x[eye]
                    .data()
                    .iter()
                    .zip(z[eye].data())
                    .zip(prev[eye].data())
                    .map(|((xv, zv), pv)| xv + APGD_MOMENTUM * (zv - xv) + (1.0 - APGD_MOMENTUM) * (xv - pv))
                    .collect();
                engine.project(eye, &ideal)
            };
            [mix(0), mix(1)]
        };
        emit(k + 1, &next);
        prev = std::mem::replace(&mut x, next);
        let (new_obj, new_grads, plain) = engine.gradient(&x, LossMode::Plain)?;
        losses.push(plain);
        if new_obj > obj {
            improved += 1;
        }
        obj = new_obj;
        grads = new_grads;
        if obj > best_obj {
            best_obj = obj;
            best_x = x.clone();
            best_step = k + 1;
        }

        let done = k + 1;
        if checkpoints.contains(&done) && done < steps {
            let span = done - last_cp;
            let few_gains = (improved as f64) < APGD_RHO * span as f64;
            let stalled = eta == eta_at_cp && best_obj == best_at_cp;
            if few_gains || stalled {
                eta /= 2.0;
                // restart from the best iterate; its gradient is recomputed
                x = best_x.clone();
                prev = x.clone();
                let (o, g, _) = engine.gradient(&x, LossMode::Plain)?;
                obj = o;
                grads = g;
            }
            last_cp = done;
            improved = 0;
            eta_at_cp = eta;
            best_at_cp = best_obj;
        }
    }
    Ok((best_x, losses, best_step))
}

pub fn fgsm(model: &dyn DisparityModel, sample: &StereoSample, cfg: &AttackConfig) -> Result<AttackOutcome> {
    run_as(model, sample, cfg, ThreatModel::Fgsm)
}

pub fn bim(model: &dyn DisparityModel, sample: &StereoSample, cfg: &AttackConfig) -> Result<AttackOutcome> {
    run_as(model, sample, cfg, ThreatModel::Bim)
}

pub fn pgd(model: &dyn DisparityModel, sample: &StereoSample, cfg: &AttackConfig) -> Result<AttackOutcome> {
    run_as(model, sample, cfg, ThreatModel::Pgd)
}

pub fn apgd_attack(model: &dyn DisparityModel, sample: &StereoSample, cfg: &AttackConfig) -> Result<AttackOutcome> {
    run_as(model, sample, cfg, ThreatModel::Apgd)
}

pub fn cospgd(model: &dyn DisparityModel, sample: &StereoSample, cfg: &AttackConfig) -> Result<AttackOutcome> {
    run_as(model, sample, cfg, ThreatModel::CosPgd)
}

fn run_as(model: &dyn DisparityModel, sample: &StereoSample, cfg: &AttackConfig, tm: ThreatModel) -> Result<AttackOutcome> {
    let cfg = AttackConfig {
        threat_model: tm,
        ..cfg.clone()
    };
    run_attack(model, sample, &cfg, None)
}
