//! Run manifests: everything needed to replay a command to identical artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;

pub const MANIFEST_NAME: &str = "manifest.toml";

/// What a command was asked to do, apart from the configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Job {
    Train { data: Option<PathBuf>, resume: Option<PathBuf> },
    Flexify { from: PathBuf },
    Sample { checkpoint: PathBuf },
    Flops { checkpoint: Option<PathBuf>, cost: String },
    PackPlan { sizes: Vec<usize> },
    FilterStep { checkpoint: PathBuf, step: usize, filter: String, seeds: usize },
    Divergence { checkpoint: PathBuf, ts: Vec<usize>, probes: usize },
    ActivationDistance { checkpoint: PathBuf, taps: Vec<usize> },
    Diversity { checkpoint: PathBuf },
    DatasetGenerate,
    DatasetInspect { path: PathBuf },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Train { .. } => "train",
            Job::Flexify { .. } => "flexify",
            Job::Sample { .. } => "sample",
            Job::Flops { .. } => "flops",
            Job::PackPlan { .. } => "pack-plan",
            Job::FilterStep { .. } => "analyze filter-step",
            Job::Divergence { .. } => "analyze divergence",
            Job::ActivationDistance { .. } => "analyze activation-distance",
            Job::Diversity { .. } => "analyze diversity",
            Job::DatasetGenerate => "dataset generate",
            Job::DatasetInspect { .. } => "dataset inspect",
        }
    }

    /// Files the job reads.
    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            Job::Train { data, resume } => data.iter().chain(resume.iter()).map(PathBuf::as_path).collect(),
            Job::Flexify { from } => vec![from],
            Job::Flops { checkpoint, .. } => checkpoint.iter().map(PathBuf::as_path).collect(),
            Job::Sample { checkpoint }
            | Job::FilterStep { checkpoint, .. }
            | Job::Divergence { checkpoint, .. }
            | Job::ActivationDistance { checkpoint, .. }
            | Job::Diversity { checkpoint } => vec![checkpoint],
            Job::DatasetInspect { path } => vec![path],
            Job::PackPlan { .. } | Job::DatasetGenerate => vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    /// Hash `dir/rel` and record it under `rel`.
    pub fn of(dir: &Path, rel: &str) -> std::io::Result<Self> {
        let data = std::fs::read(dir.join(rel))?;
        Ok(Self { path: rel.to_string(), sha256: hex::encode(Sha256::digest(&data)), bytes: data.len() as u64 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsSummary {
    pub total: u64,
    pub baseline: u64,
    pub compute_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub plan: Option<String>,
    /// Conditional-branch patch size per step, `t = T..1`.
    pub step_sizes: Vec<usize>,
    pub flops: Option<FlopsSummary>,
    pub metrics: BTreeMap<String, f64>,
    /// Keys not at their built-in default, and where they were set.
    pub sources: BTreeMap<String, String>,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub job: Job,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(job: Job, config: RunConfig, sources: BTreeMap<String, String>) -> Self {
        Self {
            tool: format!("flexidit {}", env!("CARGO_PKG_VERSION")),
            command: job.name().to_string(),
            config_hash: config.hash(),
            seed: 0,
            plan: None,
            step_sizes: Vec::new(),
            flops: None,
            metrics: BTreeMap::new(),
            sources,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            job,
            config,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }
}

/// Hash an input file, recorded by the path it was given as.
pub fn input_artifact(path: &Path) -> std::io::Result<Artifact> {
    let data = std::fs::read(path)?;
    Ok(Artifact {
        path: path.to_string_lossy().into_owned(),
        sha256: hex::encode(Sha256::digest(&data)),
        bytes: data.len() as u64,
    })
}
