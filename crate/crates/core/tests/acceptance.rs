//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints its verdict line even when all of them pass.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use disprobe::attacks::{
    attack_loss_node, run_attack, AttackConfig, Eyes, Iterate, LossMode, Norm, ThreatModel,
};
use disprobe::bench::{
    cache_lookup, compute, correlate, evaluate, fingerprint_input, resolve_dataset,
    resolve_model, AttackSettings, Cache, EvalRecord, EvalRequest, EvalResult, TargetSpec,
    Threat, ThreatSpec,
};
use disprobe::corrupt::{apply_corruption, jpeg_roundtrip, CorruptionKind, CorruptionSpec};
use disprobe::diffcore::{grad_check_stats, Graph};
use disprobe::imgio::{
    parse_kitti_disparity, parse_pfm, write_kitti_disparity, write_pfm, DisparityMap, ImageBuffer,
    PfmImage,
};
use disprobe::metrics::{pearson, Weighting};
use disprobe::stereoref::{block_matching_oracle, image_tensor, ModelConfig, ReferenceModel};
use disprobe::synth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::{independent_420, max_dev, oracle_image, psnr_oracle, to_bytes};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// 1

fn gradient_soundness() -> Verdict {
    let model = ReferenceModel::new(ModelConfig::default()).unwrap();
    let d = model.config().max_disparity;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let started = Instant::now();
    let (mut worst, mut worst_component) = (0.0f64, 0.0f64);
    for k in 0..10u64 {
        let left = synth::texture(16, 32, 3, 7000 + 2 * k);
        let right = synth::texture(16, 32, 3, 7001 + 2 * k);
        // random targets at least one pixel away from the prediction, off the |.| kink
        let pred = model.predict_pair(&left, &right).unwrap();
        let gt: Vec<f32> = pred
            .values()
            .iter()
            .map(|p| {
                let off = rng.random_range(1.0..4.0f32);
                if p + off < d as f32 && (rng.random_bool(0.5) || p - off < 0.0) {
                    p + off
                } else {
                    p - off
                }
            })
            .collect();
        let gt = DisparityMap::from_values(16, 32, gt).unwrap();
        let stats = grad_check_stats(
            |g: &mut Graph, ids| {
                let pred = model.forward(g, ids[0], ids[1])?;
                attack_loss_node(g, pred, &gt, LossMode::Plain, d, false)
            },
            &[image_tensor(&left), image_tensor(&right)],
            1e-3,
        )
        .unwrap();
        worst = worst.max(stats.relative);
        worst_component = worst_component.max(stats.max_abs_error / stats.max_abs_grad);
    }
    let elapsed = started.elapsed();
    verdict(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "max relative error {worst:.2e} (< 1e-4), worst component error / max gradient {worst_component:.2e}, {} (< 60s)",
            secs(elapsed)
        ),
    )
}

// 2

fn interior_epe(pred: &DisparityMap, target: &DisparityMap, left: usize, margin: usize) -> f64 {
    let (h, w) = (pred.height(), pred.width());
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in margin..h - margin {
        for j in left..w - margin {
            sum += (pred.get(i, j) as f64 - target.get(i, j) as f64).abs();
            n += 1;
        }
    }
    sum / n as f64
}

fn oracle_equivalence() -> Verdict {
    let model = ReferenceModel::new(ModelConfig {
        temperature: 0.01,
        ..ModelConfig::default()
    })
    .unwrap();
    let started = Instant::now();
    let (mut worst_oracle, mut worst_model) = (0.0f64, 0.0f64);
    for k in 0..20usize {
        let d = 1 + k % 8;
        let s = synth::shifted_pair("pair", 24, 48, 3, d, 300 + k as u64);
        let bm = block_matching_oracle(&s, 32, 5).unwrap();
        let pred = model.predict(&s).unwrap();
        worst_oracle = worst_oracle.max(interior_epe(&bm, &s.gt, d + 4, 4));
        worst_model = worst_model.max(interior_epe(&pred, &bm, d + 4, 4));
    }
    let elapsed = started.elapsed();
    verdict(
        worst_oracle < 0.2 && worst_model < 0.5 && elapsed < Duration::from_secs(120),
        format!(
            "worst oracle EPE {worst_oracle:.4} (< 0.2), worst model-vs-oracle EPE {worst_model:.4} (< 0.5), {}",
            secs(elapsed)
        ),
    )
}

// 3

fn budget_violations(it: &Iterate<'_>, eps: f64, norm: Norm) -> usize {
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

fn budget_soundness() -> Verdict {
    let model = ReferenceModel::new(ModelConfig {
        max_disparity: 16,
        ..ModelConfig::default()
    })
    .unwrap();
    let (mut runs, mut iterates, mut bad) = (0, 0, 0);
    for tm in ThreatModel::ALL {
        for norm in [Norm::Linf, Norm::L2] {
            if tm == ThreatModel::Apgd && norm == Norm::L2 {
                continue;
            }
            let eps = match norm {
                Norm::Linf => 8.0 / 255.0,
                Norm::L2 => 0.5,
            };
            for seed in 0..20u64 {
                let sample = synth::shifted_pair("b", 16, 32, 3, 1 + (seed % 6) as usize, 900 + seed);
                let cfg = AttackConfig {
                    seed,
                    ..AttackConfig::new(tm, 10, 0.01, eps, norm)
                };
                let mut obs = |it: &Iterate<'_>| {
                    iterates += 1;
                    bad += budget_violations(it, eps, norm);
                };
                run_attack(&model, &sample, &cfg, Some(&mut obs)).unwrap();
                runs += 1;
            }
        }
    }
    verdict(
        bad == 0 && runs == 9 * 20,
        format!("{runs} runs, {iterates} iterates checked, {bad} violations"),
    )
}

// 4

fn attack_threat(tm: ThreatModel) -> Threat {
    Threat::Attack(AttackSettings {
        threat_model: tm,
        iterations: 20,
        alpha: 0.01,
        epsilon: 8.0 / 255.0,
        lp_norm: Norm::Linf,
        target: TargetSpec::None,
        eyes: Eyes::Both,
    })
}

fn attack_means(result: &EvalResult) -> (f64, f64) {
    let EvalResult::Attack { clean, adversarial, .. } = result else {
        panic!("not an attack result")
    };
    (clean.mean_epe, adversarial.mean_epe)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn attack_ordering() -> Verdict {
    let model = resolve_model("reference").unwrap();
    let data = resolve_dataset("synthetic").unwrap();
    let seeds: Vec<u64> = (0..10).collect();
    let iterative = [ThreatModel::Bim, ThreatModel::Pgd, ThreatModel::Apgd, ThreatModel::CosPgd];
    let run = |tm, seed| compute(&model, &data.samples, &attack_threat(tm), seed, Weighting::default()).unwrap();

    let (clean, fgsm) = attack_means(&run(ThreatModel::Fgsm, 0));
    let mut per_attack: Vec<Vec<f64>> = vec![Vec::new(); iterative.len()];
    let mut beats = 0;
    for &seed in &seeds {
        let (_, fgsm_seed) = attack_means(&run(ThreatModel::Fgsm, seed));
        let mut all = true;
        for (k, tm) in iterative.iter().enumerate() {
            let (_, adv) = attack_means(&run(*tm, seed));
            per_attack[k].push(adv);
            all &= adv >= fgsm_seed;
        }
        beats += usize::from(all);
    }
    let medians: Vec<f64> = per_attack.into_iter().map(median).collect();
    let frac = beats as f64 / seeds.len() as f64;
    let ordered = clean < fgsm && medians.iter().all(|m| fgsm <= *m);
    let listing: Vec<String> = iterative
        .iter()
        .zip(&medians)
        .map(|(tm, m)| format!("{}={m:.3}", tm.name()))
        .collect();
    verdict(
        ordered && frac >= 0.9,
        format!(
            "clean={clean:.3} FGSM={fgsm:.3} medians {}; iterative >= FGSM in {:.0}% of seeds",
            listing.join(" "),
            100.0 * frac
        ),
    )
}

// 5

fn severity_monotonicity() -> Verdict {
    let started = Instant::now();
    let imgs: Vec<ImageBuffer> = (0..20).map(|i| synth::texture(32, 64, 3, 1000 + i)).collect();
    let mut non_monotone = Vec::new();
    for kind in CorruptionKind::ALL {
        let curve: Vec<f64> = (1..=5)
            .map(|sev| {
                imgs.iter()
                    .enumerate()
                    .map(|(i, img)| {
                        let spec = CorruptionSpec::new(kind, sev, 500 + i as u64).unwrap();
                        psnr_oracle(img, &apply_corruption(img, &spec).unwrap())
                    })
                    .sum::<f64>()
                    / imgs.len() as f64
            })
            .collect();
        if !curve.windows(2).all(|w| w[1] < w[0]) {
            non_monotone.push(kind.name());
        }
    }

    let model = resolve_model("reference").unwrap();
    let data = resolve_dataset("synthetic").unwrap();
    let per_kind = |sev| match compute(&model, &data.samples, &Threat::CommonCorruption2D { severity: sev }, 0, Weighting::default()).unwrap() {
        EvalResult::Corruption { per_kind, .. } => per_kind,
        _ => panic!("not a corruption result"),
    };
    let (low, high) = (per_kind(1), per_kind(5));
    let mut noise = Vec::new();
    let mut noise_ok = true;
    for kind in [CorruptionKind::GaussianNoise, CorruptionKind::ShotNoise, CorruptionKind::ImpulseNoise] {
        let (a, b) = (low[&kind].mean_epe, high[&kind].mean_epe);
        noise_ok &= b >= a;
        noise.push(format!("{} {a:.3}->{b:.3}", kind.name()));
    }
    let elapsed = started.elapsed();
    verdict(
        non_monotone.is_empty() && noise_ok && elapsed < Duration::from_secs(600),
        format!(
            "PSNR non-monotone kinds {non_monotone:?}; EPE sev1->sev5 {}; {}",
            noise.join(", "),
            secs(elapsed)
        ),
    )
}

// 6

fn aggregation_identity(cache: &Cache) -> Verdict {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for sev in 1..=5 {
        let req = EvalRequest::new("reference-small", "synthetic-small", ThreatSpec::corruption(sev).unwrap());
        let fp = evaluate(&req, cache).unwrap().record.fingerprint;
        let stored = cache_lookup(cache, &fp).unwrap().expect("stored record");
        let EvalResult::Corruption { per_kind, mc_epe, .. } = &stored.result else {
            panic!("not a corruption record")
        };
        assert_eq!(per_kind.len(), 15);
        let mut means: Vec<f64> = per_kind.values().map(|s| s.mean_epe).collect();
        means.sort_by(f64::total_cmp);
        let recomputed = means.iter().sum::<f64>() / 15.0;
        worst = worst.max((mc_epe - recomputed).abs());
        checked += 1;
    }
    verdict(
        worst <= 1e-12,
        format!("{checked} stored records, max |mean - recomputed| {worst:.1e} (<= 1e-12)"),
    )
}

// 7

fn cache_determinism(cache: &Cache) -> Verdict {
    let pgd = ThreatSpec::attack(AttackSettings {
        iterations: 3,
        ..match attack_threat(ThreatModel::Pgd) {
            Threat::Attack(s) => s,
            _ => unreachable!(),
        }
    })
    .unwrap();
    let mut problems = Vec::new();
    for threat in [ThreatSpec::clean(), ThreatSpec::corruption(2).unwrap(), pgd] {
        let req = EvalRequest {
            seed: 5,
            ..EvalRequest::new("reference-small", "synthetic-small", threat)
        };
        let first = evaluate(&EvalRequest { retrieve_existing: false, ..req.clone() }, cache).unwrap();
        let label = first.record.input.threat.label();
        let looked = cache_lookup(cache, &first.record.fingerprint).unwrap().expect("hit");
        let bytes = |r: &EvalRecord| serde_json::to_vec(&r.result).unwrap();
        if bytes(&looked) != bytes(&first.record) || looked != first.record {
            problems.push(format!("{label}: lookup differs"));
        }
        let hit = evaluate(&req, cache).unwrap();
        if !hit.cached || bytes(&hit.record) != bytes(&first.record) {
            problems.push(format!("{label}: retrieval differs"));
        }
        let fresh = evaluate(&EvalRequest { retrieve_existing: false, ..req.clone() }, cache).unwrap();
        if fresh.cached || bytes(&fresh.record) != bytes(&first.record) {
            problems.push(format!("{label}: recomputation differs"));
        }

        let model = resolve_model(&req.model_name).unwrap();
        let data = resolve_dataset(&req.dataset).unwrap();
        let base = fingerprint_input(&req, &model, &data);
        let mut variants = Vec::new();
        let mut v = base.clone();
        v.model.push('x');
        variants.push(("model", v));
        let mut v = base.clone();
        v.model_config.weight_seed ^= 1;
        variants.push(("model_config", v));
        let mut v = base.clone();
        v.dataset.push('x');
        variants.push(("dataset", v));
        let mut v = base.clone();
        v.dataset_hash.replace_range(0..1, "x");
        variants.push(("dataset_hash", v));
        let mut v = base.clone();
        v.threat = match &v.threat {
            Threat::CommonCorruption2D { severity: 4 } => Threat::CommonCorruption2D { severity: 5 },
            _ => Threat::CommonCorruption2D { severity: 4 },
        };
        variants.push(("threat", v));
        let mut v = base.clone();
        v.seed += 1;
        variants.push(("seed", v));
        let mut v = base.clone();
        v.params_hash.replace_range(0..1, "x");
        variants.push(("params_hash", v));
        let mut v = base.clone();
        v.version.push('+');
        variants.push(("version", v));
        let mut v = base.clone();
        v.weighting = match v.weighting {
            Weighting::PerSample => Weighting::PerPixel,
            Weighting::PerPixel => Weighting::PerSample,
        };
        variants.push(("weighting", v));
        for (field, v) in variants {
            if cache_lookup(cache, &v.fingerprint()).unwrap().is_some() {
                problems.push(format!("{label}: perturbed {field} still hits"));
            }
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            "3 threats: lookup, retrieval and recomputation bit-identical; 9 perturbed fields miss".to_string()
        } else {
            problems.join("; ")
        },
    )
}

// 8

/// Hand-built little-endian PFM, rows bottom-up.
fn pfm_bytes(img: &PfmImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn random_finite(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let v = match rng.random_range(0..3) {
            0 => f32::from_bits(rng.random()),
            1 => rng.random_range(0.0..256.0),
            _ => rng.random_range(-1.0..1.0),
        };
        if v.is_finite() {
            return v;
        }
    }
}

fn format_fidelity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pfm_bad = 0;
    for i in 0..100 {
        let (h, w) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let channels = if i % 4 == 3 { 3 } else { 1 };
        let img = PfmImage {
            width: w,
            height: h,
            channels,
            data: (0..h * w * channels).map(|_| random_finite(&mut rng)).collect(),
        };
        let bytes = write_pfm(&img).unwrap();
        let back = parse_pfm(&bytes).unwrap();
        let same_bits = back.data.iter().map(|v| v.to_bits()).eq(img.data.iter().map(|v| v.to_bits()));
        if bytes != pfm_bytes(&img) || !same_bits || write_pfm(&back).unwrap() != bytes {
            pfm_bad += 1;
        }
    }

    let mut kitti_bad = 0;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..=30), rng.random_range(1..=30));
        let codes: Vec<u16> = (0..h * w)
            .map(|_| if rng.random_bool(0.2) { 0 } else { rng.random() })
            .collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, codes.clone()).unwrap();
        let mut png = Vec::new();
        buf.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png).unwrap();
        let map = parse_kitti_disparity(&png).unwrap();
        let exact = codes.iter().enumerate().all(|(k, &c)| {
            map.valid()[k] == (c != 0) && (c == 0 || map.values()[k].to_bits() == (c as f32 / 256.0).to_bits())
        });
        let again = parse_kitti_disparity(&write_kitti_disparity(&map).unwrap()).unwrap();
        if !exact || again != map {
            kitti_bad += 1;
        }
    }

    let mut jpeg_worst = 0u8;
    for k in 0..5 {
        let img = oracle_image(k);
        let ours = to_bytes(&jpeg_roundtrip(&img, 100).unwrap());
        jpeg_worst = jpeg_worst.max(max_dev(&ours, &independent_420(&img, 100)));
    }
    verdict(
        pfm_bad == 0 && kitti_bad == 0 && jpeg_worst <= 2,
        format!(
            "PFM {pfm_bad}/100 mismatches, KITTI {kitti_bad}/20 mismatches, JPEG q100 max deviation {jpeg_worst}/255 (<= 2)"
        ),
    )
}

// 9

/// Single-pass textbook formula.
fn pearson_direct(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
}

fn correlation_op(cache: &Cache, dir: &std::path::Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..10.0)).collect();
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    let scaled: Vec<f64> = xs.iter().map(|x| 4.0 * x).collect();
    let exact = pearson(&xs, &xs).unwrap() == 1.0
        && pearson(&xs, &scaled).unwrap() == 1.0
        && pearson(&xs, &neg).unwrap() == -1.0;

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(3..60);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| 0.5 * x + rng.random_range(0.0..1.0)).collect();
        worst = worst.max((pearson(&a, &b).unwrap() - pearson_direct(&a, &b)).abs());
    }

    let records = |dataset: &str| -> Vec<EvalRecord> {
        ["reference-small", "reference-sharp", "reference-deep"]
            .iter()
            .map(|m| evaluate(&EvalRequest::new(*m, dataset, ThreatSpec::clean()), cache).unwrap().record)
            .collect()
    };
    let out = dir.join("scatter.csv");
    let c = correlate(&records("synthetic-small"), &records("synthetic"), Some(&out)).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let col = |k: usize| rows.iter().map(|r| r[k].parse::<f64>().unwrap()).collect::<Vec<_>>();
    let pipeline_ok = rows.len() == 3 && (c.r - pearson_direct(&col(5), &col(7))).abs() <= 1e-12;

    verdict(
        exact && worst <= 1e-12 && pipeline_ok,
        format!(
            "exact +-1 {exact}; max deviation from direct formula {worst:.1e} (<= 1e-12); scatter {} points, r={:.4}",
            rows.len(),
            c.r
        ),
    )
}

fn main() {
    // libtest flags such as --nocapture are ignored
    let dir = tempfile::tempdir().unwrap();
    let cache = Cache::new(dir.path().join("cache"));
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("gradient soundness", Box::new(gradient_soundness)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("budget soundness", Box::new(budget_soundness)),
        ("attack effectiveness ordering", Box::new(attack_ordering)),
        ("corruption severity monotonicity", Box::new(severity_monotonicity)),
        ("aggregation identity", Box::new(|| aggregation_identity(&cache))),
        ("cache determinism", Box::new(|| cache_determinism(&cache))),
        ("format fidelity", Box::new(format_fidelity)),
        ("correlation op", Box::new(|| correlation_op(&cache, dir.path()))),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!(
            "criterion {}: {} {name}: {}",
            n + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
