use disprobe::attacks::{
    attack_loss, lp_norm, run_attack, AttackConfig, DisparityModel, Eyes, Iterate, LossMode, Norm,
    Target, ThreatModel,
};
use disprobe::diffcore::{Graph, NodeId, Tensor};
use disprobe::imgio::{DisparityMap, StereoSample};
use disprobe::stereoref::{image_tensor, LossGradient, ModelConfig, ReferenceModel};
use disprobe::{synth, Error, Result};

fn model() -> ReferenceModel {
    ReferenceModel::new(ModelConfig {
        max_disparity: 16,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn sample(seed: u64) -> StereoSample {
    synth::shifted_pair("s", 16, 32, 3, 1 + (seed % 6) as usize, seed)
}

fn cfg(tm: ThreatModel, norm: Norm, iterations: usize, seed: u64) -> AttackConfig {
    let eps = match norm {
        Norm::Linf => 8.0 / 255.0,
        Norm::L2 => 0.5,
    };
    AttackConfig {
        seed,
        ..AttackConfig::new(tm, iterations, 0.01, eps, norm)
    }
}

/// Independent budget check in `f64` on the clean and adversarial tensors.
fn violations(it: &Iterate<'_>, eps: f64, norm: Norm) -> usize {
    let mut bad = 0;
    for (clean, adv) in [(it.clean_left, it.adv_left), (it.clean_right, it.adv_right)] {
        let delta: Vec<f64> = adv.data().iter().zip(clean.data()).map(|(a, c)| a - c).collect();
        let ok = match norm {
            Norm::Linf => delta.iter().all(|d| d.abs() <= eps),
            Norm::L2 => delta.iter().map(|d| d * d).sum::<f64>().sqrt() <= eps + 1e-9,
        };
        bad += usize::from(!ok);
        bad += adv.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    }
    bad
}

#[test]
fn budget_holds_at_every_iterate() {
    let m = model();
    for tm in ThreatModel::ALL {
        for norm in [Norm::Linf, Norm::L2] {
            if tm == ThreatModel::Apgd && norm == Norm::L2 {
                continue;
            }
            for seed in 0..3 {
                let c = cfg(tm, norm, 8, seed);
                let mut bad = 0;
                let mut seen = 0;
                let mut obs = |it: &Iterate<'_>| {
                    seen += 1;
                    bad += violations(it, c.epsilon, norm);
                };
                let out = run_attack(&m, &sample(seed), &c, Some(&mut obs)).unwrap();
                assert_eq!(bad, 0, "{tm} {norm:?} seed {seed}");
                assert!(seen >= c.effective_iterations() + 1);
                let (l, r) = out.perturbation.norms(norm);
                let tol = if norm == Norm::L2 { 1e-9 } else { 0.0 };
                assert!(l <= c.epsilon + tol && r <= c.epsilon + tol);
            }
        }
    }
}

#[test]
fn fgsm_equals_single_step_bim() {
    let m = model();
    let s = sample(3);
    let a = run_attack(&m, &s, &cfg(ThreatModel::Fgsm, Norm::Linf, 20, 1), None).unwrap();
    let b = run_attack(&m, &s, &cfg(ThreatModel::Bim, Norm::Linf, 1, 9), None).unwrap();
    assert_eq!(a.adversarial, b.adversarial);
    let linf = lp_norm(a.perturbation.delta_left.data(), Norm::Linf);
    assert!(linf <= 0.01f64.min(8.0 / 255.0) + 1e-7);
}

#[test]
fn same_seed_same_trajectory() {
    let m = model();
    let s = sample(4);
    for tm in [ThreatModel::Pgd, ThreatModel::Apgd, ThreatModel::CosPgd] {
        let a = run_attack(&m, &s, &cfg(tm, Norm::Linf, 6, 42), None).unwrap();
        let b = run_attack(&m, &s, &cfg(tm, Norm::Linf, 6, 42), None).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.adversarial, b.adversarial);
        let c = run_attack(&m, &s, &cfg(tm, Norm::Linf, 6, 43), None).unwrap();
        assert_ne!(a.adversarial, c.adversarial);
    }
}

#[test]
fn pgd_start_is_inside_budget() {
    let m = model();
    let s = sample(5);
    let c = cfg(ThreatModel::Pgd, Norm::Linf, 1, 7);
    let mut first = None;
    let mut obs = |it: &Iterate<'_>| {
        if it.step == 0 {
            let d: Vec<f64> =
                it.adv_left.data().iter().zip(it.clean_left.data()).map(|(a, c)| a - c).collect();
            first = Some(lp_norm(&d, Norm::Linf));
        }
    };
    run_attack(&m, &s, &c, Some(&mut obs)).unwrap();
    let n = first.unwrap();
    assert!(n > 0.0 && n <= c.epsilon);
}

#[test]
fn apgd_returns_its_best_iterate() {
    let m = model();
    for seed in 0..4 {
        let out = run_attack(&m, &sample(seed), &cfg(ThreatModel::Apgd, Norm::Linf, 12, seed), None).unwrap();
        assert!(out.losses.iter().all(|l| out.final_loss >= *l));
    }
    let l2 = cfg(ThreatModel::Apgd, Norm::L2, 5, 0);
    assert!(matches!(run_attack(&m, &sample(0), &l2, None), Err(Error::Config(_))));
}

/// Finite-difference oracle: the loss along the signed gradient direction
/// at step `a` never falls below the clean loss for small `a`.
#[test]
fn fgsm_small_step_does_not_decrease_loss() {
    let m = model();
    for seed in 0..5 {
        let s = sample(seed);
        let c = AttackConfig {
            seed,
            ..AttackConfig::new(ThreatModel::Fgsm, 1, 1e-3, 8.0 / 255.0, Norm::Linf)
        };
        let out = run_attack(&m, &s, &c, None).unwrap();
        let pred = m.predict(&out.adversarial).unwrap();
        let direct = attack_loss(
            &pred.values().iter().map(|v| *v as f64).collect::<Vec<_>>(),
            &s.gt,
            LossMode::Plain,
            16,
        )
        .unwrap();
        assert!(direct >= out.clean_loss - 1e-6, "seed {seed}: {direct} < {}", out.clean_loss);
        assert!(out.final_loss >= out.clean_loss - 1e-9);
    }
}

#[test]
fn targeted_descends_toward_target() {
    let m = model();
    let s = sample(2);
    let c = AttackConfig {
        target: Target::Zero,
        ..cfg(ThreatModel::Pgd, Norm::Linf, 10, 0)
    };
    let out = run_attack(&m, &s, &c, None).unwrap();
    assert!(out.final_loss < out.clean_loss);

    let bim = cfg(ThreatModel::Bim, Norm::Linf, 10, 0);
    let untargeted = run_attack(&m, &s, &bim, None).unwrap();
    let c = AttackConfig {
        target: Target::Map(m.predict(&s).unwrap()),
        ..bim
    };
    let out = run_attack(&m, &s, &c, None).unwrap();
    assert!(out.clean_loss < 1e-6);
    assert!(out.final_loss < 0.1 * (untargeted.final_loss - untargeted.clean_loss));
}

/// Prediction `4 * left`, exact in `f32` for the synthetic textures.
struct Linear;

impl DisparityModel for Linear {
    fn max_disparity(&self) -> usize {
        4
    }

    fn predict_tensors(&self, left: &Tensor, _: &Tensor) -> Result<Tensor> {
        let s = left.shape();
        Tensor::new(&[s[1], s[2]], left.data().iter().map(|v| 4.0 * v).collect())
    }

    fn loss_gradient(
        &self,
        left: &Tensor,
        right: &Tensor,
        head: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>,
    ) -> Result<LossGradient> {
        let mut g = Graph::new();
        let (l, r) = (g.input(left.clone()), g.input(right.clone()));
        let flat = g.sum_axis(l, 0)?;
        let p = g.scalar_mul(flat, 4.0)?;
        let loss = head(&mut g, p)?;
        let grads = g.backward(loss)?;
        Ok(LossGradient {
            loss: g.value(loss)?.item()?,
            prediction: g.value(p)?.clone(),
            grad_left: grads.wrt(l)?.clone(),
            grad_right: grads.wrt(r)?.clone(),
        })
    }
}

#[test]
fn target_at_clean_prediction_stays_put() {
    let s = synth::shifted_pair("g", 8, 12, 1, 2, 5);
    let pred = Linear.predict_tensors(&image_tensor(&s.left), &image_tensor(&s.right)).unwrap();
    let target = DisparityMap::from_values(8, 12, pred.data().iter().map(|v| *v as f32).collect()).unwrap();
    for tm in [ThreatModel::Fgsm, ThreatModel::Bim, ThreatModel::CosPgd] {
        let c = AttackConfig {
            target: Target::Map(target.clone()),
            ..cfg(tm, Norm::Linf, 5, 0)
        };
        let out = run_attack(&Linear, &s, &c, None).unwrap();
        if tm == ThreatModel::CosPgd {
            assert!(out.final_loss < out.losses[0]);
        } else {
            assert_eq!(out.final_loss, 0.0);
            assert_eq!(out.adversarial, s);
        }
    }
}

#[test]
fn single_eye_leaves_other_untouched() {
    let m = model();
    let s = sample(1);
    let c = AttackConfig {
        eyes: Eyes::Left,
        ..cfg(ThreatModel::Bim, Norm::Linf, 3, 0)
    };
    let out = run_attack(&m, &s, &c, None).unwrap();
    assert_eq!(out.adversarial.right, s.right);
    assert!(lp_norm(out.perturbation.delta_left.data(), Norm::Linf) > 0.0);
}

struct Flat;

impl DisparityModel for Flat {
    fn max_disparity(&self) -> usize {
        4
    }

    fn predict_tensors(&self, left: &Tensor, _: &Tensor) -> Result<Tensor> {
        let s = left.shape();
        Tensor::new(&[s[1], s[2]], vec![1.0; s[1] * s[2]])
    }

    fn loss_gradient(
        &self,
        left: &Tensor,
        right: &Tensor,
        head: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>,
    ) -> Result<LossGradient> {
        let pred = self.predict_tensors(left, right)?;
        let mut g = Graph::new();
        let p = g.input(pred.clone());
        let loss = head(&mut g, p)?;
        Ok(LossGradient {
            loss: g.value(loss)?.item()?,
            prediction: pred,
            grad_left: Tensor::new(left.shape(), vec![0.0; left.data().len()])?,
            grad_right: Tensor::new(right.shape(), vec![0.0; right.data().len()])?,
        })
    }
}

#[test]
fn zero_gradient_leaves_sample_clean() {
    let s = sample(0);
    let out = run_attack(&Flat, &s, &cfg(ThreatModel::Fgsm, Norm::Linf, 1, 0), None).unwrap();
    assert_eq!(out.adversarial, s);
    let out = run_attack(&Flat, &s, &cfg(ThreatModel::Bim, Norm::L2, 5, 0), None).unwrap();
    assert_eq!(out.adversarial, s);
}

#[test]
fn invalid_reference_is_a_metric_error() {
    let s = sample(0);
    let gt = DisparityMap::from_values(16, 32, vec![f32::NAN; 512]).unwrap();
    let s = StereoSample::new("x", s.left, s.right, gt).unwrap();
    let r = run_attack(&model(), &s, &cfg(ThreatModel::Fgsm, Norm::Linf, 1, 0), None);
    assert!(matches!(r, Err(Error::Metric(_))));
}

/// Empirical comparisons over 20 seeded trials at T=20, alpha=0.01, eps=8/255.
#[test]
fn iterative_attacks_compare_as_expected() {
    use rayon::prelude::*;
    let m = model();
    let rows: Vec<[f64; 5]> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let s = synth::shifted_pair("t", 16, 32, 3, 1 + (seed % 8) as usize, 100 + seed);
            let mut out = [0.0; 5];
            for (i, tm) in ThreatModel::ALL.into_iter().enumerate() {
                out[i] = run_attack(&m, &s, &cfg(tm, Norm::Linf, 20, seed), None)
                    .unwrap()
                    .final_loss;
            }
            out
        })
        .collect();
    let frac = |f: &dyn Fn(&[f64; 5]) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / 20.0;
    let bim_vs_fgsm = frac(&|r| r[1] >= r[0]);
    let apgd_vs_pgd = frac(&|r| r[3] >= r[2]);
    let cos_vs_pgd = frac(&|r| r[4] >= r[2]);
    let cos_vs_fgsm = frac(&|r| r[4] >= r[0]);
    eprintln!("bim>=fgsm {bim_vs_fgsm} apgd>=pgd {apgd_vs_pgd} cospgd>=pgd {cos_vs_pgd}");
    assert!(bim_vs_fgsm >= 0.9);
    assert!(apgd_vs_pgd >= 0.6);
    // CosPGD trails PGD on plain EPE for this model; it still clears FGSM
    assert!(cos_vs_fgsm >= 0.9, "cospgd>=fgsm {cos_vs_fgsm}");
}
