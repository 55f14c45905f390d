//! Evaluation orchestration: threat configs, dataset and model resolution,
//! the result cache and reports.

mod cache;
mod dataset;
mod record;
mod report;
mod threat;

pub use cache::{Cache, CACHE_ENV};
pub use dataset::{content_hash, resolve_dataset, Dataset, BUILTIN_DATASETS};
pub use record::{AttackSampleStats, EvalRecord, EvalResult, FingerprintInput};
pub use report::{
    correlate, emit_report, read_json_report, report_rows, write_csv, write_json, Correlation,
    ReportFormat, ReportRow, ScatterPoint,
};
pub use threat::{
    parse_pairs, parse_threat_config, parse_threat_config_with, parse_threat_text,
    threat_from_pairs, AttackSettings, TargetSpec, Threat, ThreatSpec, CORRUPTION_THREAT,
};

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::attacks::{lp_norm, run_attack, Norm};
use crate::corrupt::{corrupt_stereo_pair, params_hash, CorruptionKind, CorruptionSpec};
use crate::imgio::StereoSample;
use crate::metrics::{epe_counted, mc_epe, MetricSummary, SampleEpe, Weighting};
use crate::rng::derive_seed;
use crate::stereoref::ReferenceModel;
use crate::{Error, Result, VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    /// Model preset key.
    pub model_name: String,
    /// Built-in dataset name or manifest path.
    pub dataset: String,
    pub threat: ThreatSpec,
    pub retrieve_existing: bool,
    pub seed: u64,
    pub weighting: Weighting,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
}

impl EvalRequest {
    pub fn new(model_name: impl Into<String>, dataset: impl Into<String>, threat: ThreatSpec) -> Self {
        Self {
            model_name: model_name.into(),
            dataset: dataset.into(),
            threat,
            retrieve_existing: true,
            seed: 0,
            weighting: Weighting::default(),
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub record: EvalRecord,
    /// True when the record came from the cache.
    pub cached: bool,
}

pub fn resolve_model(name: &str) -> Result<ReferenceModel> {
    ReferenceModel::preset(name)
}

pub fn fingerprint_input(request: &EvalRequest, model: &ReferenceModel, dataset: &Dataset) -> FingerprintInput {
    FingerprintInput {
        model: request.model_name.clone(),
        model_config: model.config().clone(),
        dataset: dataset.key.clone(),
        dataset_hash: dataset.content_hash.clone(),
        threat: request.threat.variant.clone(),
        seed: request.seed,
        params_hash: params_hash(),
        version: VERSION.to_string(),
        weighting: request.weighting,
    }
}

/// Resolves model and dataset, then evaluates (or retrieves) the request.
pub fn evaluate(request: &EvalRequest, cache: &Cache) -> Result<Evaluation> {
    let model = resolve_model(&request.model_name)?;
    let dataset = resolve_dataset(&request.dataset)?;
    evaluate_on(request, &model, &dataset, cache)
}

/// Fingerprint of a request, resolving model and dataset.
pub fn request_fingerprint(request: &EvalRequest) -> Result<String> {
    let model = resolve_model(&request.model_name)?;
    let dataset = resolve_dataset(&request.dataset)?;
    Ok(fingerprint_input(request, &model, &dataset).fingerprint())
}

pub fn cache_lookup(cache: &Cache, fingerprint: &str) -> Result<Option<EvalRecord>> {
    cache.lookup(fingerprint)
}

/// Evaluation against an already resolved model and dataset. Nothing is
/// written to the cache unless every work unit succeeds.
pub fn evaluate_on(
    request: &EvalRequest,
    model: &ReferenceModel,
    dataset: &Dataset,
    cache: &Cache,
) -> Result<Evaluation> {
    let input = fingerprint_input(request, model, dataset);
    let fingerprint = input.fingerprint();
    if request.retrieve_existing {
        if let Some(record) = cache.lookup(&fingerprint)? {
            return Ok(Evaluation { record, cached: true });
        }
    }
    let started = Instant::now();
    let result = with_pool(request.jobs, || {
        compute(model, &dataset.samples, &request.threat.variant, request.seed, request.weighting)
    })?;
    let record = EvalRecord {
        fingerprint,
        input,
        threat_source_hash: request.threat.source_hash.clone(),
        result,
        created_at: chrono::Utc::now(),
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    cache.store(&record)?;
    Ok(Evaluation {
        record,
        cached: false,
    })
}

pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::State(format!("worker pool: {e}")))?;
    pool.install(f)
}

fn summarize(per_sample: Vec<SampleEpe>, weighting: Weighting) -> Result<MetricSummary> {
    MetricSummary::from_samples(per_sample, weighting)
}

fn sample_epe(model: &ReferenceModel, sample: &StereoSample) -> Result<SampleEpe> {
    let (epe, n_pixels) = epe_counted(&model.predict(sample)?, &sample.gt)?;
    Ok(SampleEpe {
        id: sample.id.clone(),
        epe,
        n_pixels,
    })
}

/// Runs the threat over all samples on the current rayon pool.
pub fn compute(
    model: &ReferenceModel,
    samples: &[StereoSample],
    threat: &Threat,
    seed: u64,
    weighting: Weighting,
) -> Result<EvalResult> {
    match threat {
        Threat::None => {
            let per = samples
                .par_iter()
                .map(|s| sample_epe(model, s))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalResult::Clean {
                summary: summarize(per, weighting)?,
            })
        }
        Threat::Attack(settings) => {
            let outcomes = attack_samples(model, samples, settings, seed)?;
            let mut clean = Vec::new();
            let mut adv = Vec::new();
            let mut stats = Vec::new();
            for o in outcomes {
                clean.push(o.clean);
                adv.push(o.adversarial_epe);
                stats.push(o.stats);
            }
            Ok(EvalResult::Attack {
                clean: summarize(clean, weighting)?,
                adversarial: summarize(adv, weighting)?,
                per_sample: stats,
            })
        }
        Threat::CommonCorruption2D { severity } => {
            let units: Vec<(CorruptionKind, &StereoSample)> = CorruptionKind::ALL
                .iter()
                .flat_map(|k| samples.iter().map(move |s| (*k, s)))
                .collect();
            let per_unit = units
                .par_iter()
                .map(|(kind, s)| {
                    let spec = CorruptionSpec::new(*kind, *severity, seed)?;
                    sample_epe(model, &corrupt_stereo_pair(s, &spec)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut per_kind = BTreeMap::new();
            for (kind, chunk) in CorruptionKind::ALL.iter().zip(per_unit.chunks(samples.len())) {
                per_kind.insert(*kind, summarize(chunk.to_vec(), weighting)?);
            }
            let means = per_kind.iter().map(|(k, s)| (*k, s.mean_epe)).collect();
            Ok(EvalResult::Corruption {
                severity: *severity,
                mc_epe: mc_epe(&means)?,
                per_kind,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackSampleOutcome {
    pub clean: SampleEpe,
    pub adversarial_epe: SampleEpe,
    pub stats: AttackSampleStats,
    pub adversarial: StereoSample,
}

/// Attacks every sample; each gets its own seed derived from `seed` and
/// the sample id.
pub fn attack_samples(
    model: &ReferenceModel,
    samples: &[StereoSample],
    settings: &AttackSettings,
    seed: u64,
) -> Result<Vec<AttackSampleOutcome>> {
    let base = settings.config(seed)?;
    samples
        .par_iter()
        .map(|s| {
            let cfg = crate::attacks::AttackConfig {
                seed: derive_seed(seed, &[&s.id, "attack"]),
                ..base.clone()
            };
            let out = run_attack(model, s, &cfg, None)?;
            let clean = sample_epe(model, s)?;
            let adversarial_epe = sample_epe(model, &out.adversarial)?;
            let p = &out.perturbation;
            let stats = AttackSampleStats {
                id: s.id.clone(),
                clean_epe: clean.epe,
                adversarial_epe: adversarial_epe.epe,
                linf_left: lp_norm(p.delta_left.data(), Norm::Linf),
                linf_right: lp_norm(p.delta_right.data(), Norm::Linf),
                l2_left: lp_norm(p.delta_left.data(), Norm::L2),
                l2_right: lp_norm(p.delta_right.data(), Norm::L2),
            };
            Ok(AttackSampleOutcome {
                clean,
                adversarial_epe,
                stats,
                adversarial: out.adversarial,
            })
        })
        .collect()
}
