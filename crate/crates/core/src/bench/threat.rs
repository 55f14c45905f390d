//! Threat configuration files: `key: value` lines, `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, Eyes, Norm, Target, ThreatModel};
use crate::imgio::parse_pfm;
use crate::{Error, Result};

pub const CORRUPTION_THREAT: &str = "2DCommonCorruption";

const KEYS: &[&str] = &[
    "threat_model",
    "iterations",
    "alpha",
    "epsilon",
    "lp_norm",
    "target",
    "eyes",
    "severity",
];
const ATTACK_KEYS: &[&str] = &["iterations", "alpha", "epsilon", "lp_norm", "target", "eyes"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetSpec {
    None,
    Zero,
    /// Explicit PFM disparity target; the content hash enters fingerprints.
    Pfm { path: PathBuf, sha256: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub threat_model: ThreatModel,
    pub iterations: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub lp_norm: Norm,
    pub target: TargetSpec,
    pub eyes: Eyes,
}

impl AttackSettings {
    /// Attack configuration for one run; loads the target map if any.
    pub fn config(&self, seed: u64) -> Result<AttackConfig> {
        let target = match &self.target {
            TargetSpec::None => Target::None,
            TargetSpec::Zero => Target::Zero,
            TargetSpec::Pfm { path, .. } => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                Target::Map(parse_pfm(&bytes)?.into_disparity()?)
            }
        };
        let cfg = AttackConfig {
            threat_model: self.threat_model,
            iterations: self.iterations,
            alpha: self.alpha,
            epsilon: self.epsilon,
            lp_norm: self.lp_norm,
            target,
            seed,
            eyes: self.eyes,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum Threat {
    None,
    Attack(AttackSettings),
    #[serde(rename = "2DCommonCorruption")]
    CommonCorruption2D { severity: u8 },
}

impl Threat {
    /// Short label used in reports: `clean`, the attack name or
    /// `2DCommonCorruption`.
    pub fn label(&self) -> String {
        match self {
            Threat::None => "clean".into(),
            Threat::Attack(a) => a.threat_model.name().into(),
            Threat::CommonCorruption2D { .. } => CORRUPTION_THREAT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatSpec {
    pub variant: Threat,
    /// sha256 of the config text, when parsed from a file.
    pub source_hash: Option<String>,
}

impl ThreatSpec {
    pub fn clean() -> Self {
        Self {
            variant: Threat::None,
            source_hash: None,
        }
    }

    pub fn corruption(severity: u8) -> Result<Self> {
        check_severity(severity as i64)?;
        Ok(Self {
            variant: Threat::CommonCorruption2D { severity },
            source_hash: None,
        })
    }

    pub fn attack(settings: AttackSettings) -> Result<Self> {
        settings.config_unchecked().validate()?;
        Ok(Self {
            variant: Threat::Attack(settings),
            source_hash: None,
        })
    }
}

fn check_severity(s: i64) -> Result<u8> {
    if (1..=5).contains(&s) {
        Ok(s as u8)
    } else {
        Err(Error::Config(format!("severity must be in 1..=5, got {s}")))
    }
}

/// Splits config text into key/value pairs. Both `key: value` and
/// `key = value` are accepted; values may be quoted.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some(at) = line.find([':', '=']) else {
            return Err(Error::Config(format!(
                "line {}: expected `key: value`, got {line:?}",
                n + 1
            )));
        };
        let key = line[..at].trim().to_string();
        let value = line[at + 1..]
            .trim()
            .trim_matches(|c| c == '"' || c == '\'')
            .to_string();
        out.push((key, value));
    }
    Ok(out)
}

/// Builds a threat from key/value pairs; later pairs override earlier ones,
/// which is how command-line flags override a file. Relative target paths
/// resolve against `base`.
pub fn threat_from_pairs(pairs: &[(String, String)], base: &Path) -> Result<Threat> {
    let mut map = BTreeMap::new();
    for (k, v) in pairs {
        if !KEYS.contains(&k.as_str()) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        map.insert(k.as_str(), v.as_str());
    }
    let threat_model = *map
        .get("threat_model")
        .ok_or_else(|| Error::Config("missing key threat_model".into()))?;

    if threat_model.eq_ignore_ascii_case("none") || threat_model.eq_ignore_ascii_case("clean") {
        if let Some(k) = map.keys().find(|k| **k != "threat_model") {
            return Err(Error::Config(format!("key {k} is not valid for threat_model {threat_model}")));
        }
        return Ok(Threat::None);
    }

    if threat_model == CORRUPTION_THREAT {
        if let Some(k) = map.keys().find(|k| ATTACK_KEYS.contains(k)) {
            return Err(Error::Config(format!("key {k} is not valid for {CORRUPTION_THREAT}")));
        }
        let raw = map
            .get("severity")
            .ok_or_else(|| Error::Config("missing key severity".into()))?;
        let s: i64 = raw
            .parse()
            .map_err(|_| Error::Config(format!("severity must be an integer, got {raw:?}")))?;
        return Ok(Threat::CommonCorruption2D {
            severity: check_severity(s)?,
        });
    }

    let tm: ThreatModel = threat_model.parse()?;
    if map.contains_key("severity") {
        return Err(Error::Config(format!("key severity is not valid for threat_model {tm}")));
    }
    let get = |k: &str| {
        map.get(k)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing key {k}")))
    };
    let num = |k: &str| -> Result<f64> {
        let v = get(k)?;
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::Config(format!("{k} must be a number, got {v:?}")))
    };
    let iterations_raw = get("iterations")?;
    let iterations: usize = iterations_raw.parse().map_err(|_| {
        Error::Config(format!("iterations must be a positive integer, got {iterations_raw:?}"))
    })?;
    let lp_norm: Norm = get("lp_norm")?.parse()?;
    let mut epsilon = num("epsilon")?;
    if lp_norm == Norm::Linf && epsilon >= 1.0 && epsilon.fract() == 0.0 {
        epsilon /= 255.0;
    }
    let target = match map.get("target").copied().unwrap_or("false") {
        "false" | "False" | "none" | "" => TargetSpec::None,
        "true" | "True" | "zero" => TargetSpec::Zero,
        path => {
            let path = if Path::new(path).is_absolute() {
                PathBuf::from(path)
            } else {
                base.join(path)
            };
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            TargetSpec::Pfm {
                sha256: hex::encode(Sha256::digest(&bytes)),
                path,
            }
        }
    };
    let eyes = match map.get("eyes") {
        Some(v) => v.parse()?,
        None => Eyes::Both,
    };
    let settings = AttackSettings {
        threat_model: tm,
        iterations,
        alpha: num("alpha")?,
        epsilon,
        lp_norm,
        target,
        eyes,
    };
    settings.config_unchecked().validate()?;
    Ok(Threat::Attack(settings))
}

impl AttackSettings {
    fn config_unchecked(&self) -> AttackConfig {
        AttackConfig {
            eyes: self.eyes,
            ..AttackConfig::new(
                self.threat_model,
                self.iterations,
                self.alpha,
                self.epsilon,
                self.lp_norm,
            )
        }
    }
}

pub fn parse_threat_text(text: &str, base: &Path, overrides: &[(String, String)]) -> Result<ThreatSpec> {
    let mut pairs = parse_pairs(text)?;
    pairs.extend(overrides.iter().cloned());
    Ok(ThreatSpec {
        variant: threat_from_pairs(&pairs, base)?,
        source_hash: Some(hex::encode(Sha256::digest(text.as_bytes()))),
    })
}

pub fn parse_threat_config(path: impl AsRef<Path>) -> Result<ThreatSpec> {
    parse_threat_config_with(path, &[])
}

/// Like [`parse_threat_config`] with extra pairs applied after the file.
pub fn parse_threat_config_with(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<ThreatSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_threat_text(&text, base, overrides)
}
