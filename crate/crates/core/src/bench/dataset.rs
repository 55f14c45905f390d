//! Dataset keys: built-in synthetic suites or paths to manifest files.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::imgio::{load_manifest, load_sample, StereoSample};
use crate::{synth, Error, Result};

/// Built-in suites: `(name, samples, height, width, channels, max shift)`.
pub const BUILTIN_DATASETS: &[(&str, usize, usize, usize, usize, usize)] = &[
    ("synthetic", 10, 32, 64, 3, 8),
    ("synthetic-small", 4, 16, 32, 3, 6),
    ("synthetic-gray", 10, 32, 64, 1, 8),
];

const SUITE_SEED: u64 = 0xd15b_e7c4;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub key: String,
    pub samples: Vec<StereoSample>,
    /// sha256 over sample ids, shapes and pixel data.
    pub content_hash: String,
}

impl Dataset {
    pub fn from_samples(key: impl Into<String>, samples: Vec<StereoSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("dataset has no samples".into()));
        }
        let content_hash = content_hash(&samples);
        Ok(Self {
            key: key.into(),
            samples,
            content_hash,
        })
    }
}

pub fn content_hash(samples: &[StereoSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.id.len() as u64).to_le_bytes());
        h.update(s.id.as_bytes());
        for dim in [s.height(), s.width(), s.left.channels()] {
            h.update((dim as u64).to_le_bytes());
        }
        for img in [&s.left, &s.right] {
            img.data().iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        for (v, ok) in s.gt.values().iter().zip(s.gt.valid()) {
            h.update(if *ok { v.to_le_bytes() } else { [0xff; 4] });
        }
    }
    hex::encode(h.finalize())
}

/// Resolves a built-in name or a manifest path.
pub fn resolve_dataset(key: &str) -> Result<Dataset> {
    if let Some((name, n, h, w, c, d)) = BUILTIN_DATASETS.iter().find(|b| b.0 == key) {
        return Dataset::from_samples(*name, synth::shifted_suite(name, *n, *h, *w, *c, *d, SUITE_SEED));
    }
    let path = Path::new(key);
    if !path.is_file() {
        let names: Vec<&str> = BUILTIN_DATASETS.iter().map(|b| b.0).collect();
        return Err(Error::Config(format!(
            "dataset {key:?} is neither a manifest file nor one of {}",
            names.join(", ")
        )));
    }
    let manifest = load_manifest(path)?;
    let samples = (0..manifest.len())
        .map(|i| load_sample(&manifest, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_samples(key, samples)
}
