//! Evaluation records and their fingerprints.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::threat::Threat;
use crate::corrupt::CorruptionKind;
use crate::metrics::{MetricSummary, Weighting};
use crate::stereoref::ModelConfig;

/// Everything that can change an evaluation's numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintInput {
    pub model: String,
    pub model_config: ModelConfig,
    pub dataset: String,
    pub dataset_hash: String,
    pub threat: Threat,
    pub seed: u64,
    pub params_hash: String,
    pub version: String,
    pub weighting: Weighting,
}

impl FingerprintInput {
    /// Hex sha256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("fingerprint input serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSampleStats {
    pub id: String,
    pub clean_epe: f64,
    pub adversarial_epe: f64,
    pub linf_left: f64,
    pub linf_right: f64,
    pub l2_left: f64,
    pub l2_right: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalResult {
    Clean {
        summary: MetricSummary,
    },
    Attack {
        clean: MetricSummary,
        adversarial: MetricSummary,
        per_sample: Vec<AttackSampleStats>,
    },
    Corruption {
        severity: u8,
        per_kind: BTreeMap<CorruptionKind, MetricSummary>,
        mc_epe: f64,
    },
}

impl EvalResult {
    /// Headline number: clean or adversarial mean EPE, or mC-EPE.
    pub fn mean_epe(&self) -> f64 {
        match self {
            EvalResult::Clean { summary } => summary.mean_epe,
            EvalResult::Attack { adversarial, .. } => adversarial.mean_epe,
            EvalResult::Corruption { mc_epe, .. } => *mc_epe,
        }
    }

    pub fn n_samples(&self) -> usize {
        match self {
            EvalResult::Clean { summary } => summary.n_samples,
            EvalResult::Attack { adversarial, .. } => adversarial.n_samples,
            EvalResult::Corruption { per_kind, .. } => {
                per_kind.values().map(|s| s.n_samples).max().unwrap_or(0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub fingerprint: String,
    pub input: FingerprintInput,
    /// sha256 of the threat config text, if it came from a file.
    pub threat_source_hash: Option<String>,
    pub result: EvalResult,
    pub created_at: DateTime<Utc>,
    pub runtime_seconds: f64,
}

impl EvalRecord {
    pub fn mean_epe(&self) -> f64 {
        self.result.mean_epe()
    }
}
